"""The full multimodal multilingual translation model and its branch losses."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .alignment import PoolHead
from .data import BOS, EOS, PAD, Batch
from .encoders import EncoderConfig, EncoderStates, TextEncoder, VisionEncoder
from .fusion import BRANCHES, CVLM, ConcatFusion, Decoder, FusedMemory, GatedFusion
from .layers import Module, normal_param
from .tensor import Tensor

DTYPES = {"fp32": np.float32, "fp64": np.float64}


@dataclass
class ModelConfig:
    vocab_size: int
    patch_dim: int
    text_encoder: EncoderConfig = field(default_factory=EncoderConfig)
    vision_encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: str = "cvlm"
    precision: str = "fp32"
    label_smoothing: float = 0.1
    loss_form: str = "kl"   # "kl" subtracts the smoothed-target entropy, "ce" does not

    def __post_init__(self):
        for name in ("text_encoder", "vision_encoder", "decoder"):
            v = getattr(self, name)
            if isinstance(v, dict):
                setattr(self, name, EncoderConfig(**v))
        dims = {self.text_encoder.d, self.vision_encoder.d, self.decoder.d}
        if len(dims) != 1:
            raise ValueError("text encoder, vision encoder and decoder must share the hidden dim")
        if self.fusion not in ("cvlm", "concat", "gated"):
            raise ValueError(f"unknown fusion {self.fusion!r}")
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}")
        if self.loss_form not in ("kl", "ce"):
            raise ValueError("loss_form must be 'kl' or 'ce'")

    @property
    def d(self) -> int:
        return self.decoder.d

    def to_dict(self) -> dict:
        return asdict(self)


class M3P(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        dtype = DTYPES[cfg.precision]
        rng = np.random.Generator(np.random.Philox(key=seed))
        d = cfg.d
        self.embedding = normal_param(rng, (cfg.vocab_size, d), 0.02, dtype)
        self.text_encoder = TextEncoder(cfg.text_encoder, self.embedding, rng, dtype)
        self.vision_encoder = VisionEncoder(cfg.vision_encoder, cfg.patch_dim, rng, dtype)
        if cfg.fusion == "cvlm":
            self.fusion = CVLM(d, cfg.decoder.heads, rng, dtype, cfg.decoder.dropout)
        elif cfg.fusion == "concat":
            self.fusion = ConcatFusion()
        else:
            self.fusion = GatedFusion(d, rng, dtype)
        self.decoder = Decoder(cfg.decoder, self.embedding, rng, dtype)
        self.text_pool = PoolHead(d, rng, dtype)
        self.image_pool = PoolHead(d, rng, dtype)
        self.dropout_rng = np.random.Generator(np.random.Philox(key=seed + 1))

    @property
    def dtype(self):
        return self.embedding.dtype

    def _rng(self):
        return self.dropout_rng if self.training else None

    # -- encoding --------------------------------------------------------
    def encode_text(self, ids: np.ndarray, pad_mask: np.ndarray | None = None) -> EncoderStates:
        return self.text_encoder(ids, pad_mask, self._rng())

    def encode_image(self, patches: np.ndarray) -> EncoderStates:
        return self.vision_encoder(patches, self._rng())

    def fuse(self, text: EncoderStates, vision: EncoderStates) -> FusedMemory:
        return self.fusion(text, vision, self._rng())

    def caption_memory(self, tgt_tag: np.ndarray, vision: EncoderStates) -> EncoderStates:
        """Image-only memory: the encoded bare target tag followed by the patches."""
        tag = self.encode_text(np.asarray(tgt_tag, dtype=np.int64)[:, None])
        hidden = T.concat([tag.hidden, vision.hidden], axis=1)
        return EncoderStates(hidden, np.concatenate([tag.pad_mask, vision.pad_mask], axis=1))

    def memory(self, batch: Batch, branch: str, text: EncoderStates | None = None,
               vision: EncoderStates | None = None) -> EncoderStates:
        if branch not in BRANCHES:
            raise ValueError(f"unknown branch {branch!r}")
        if branch in ("text", "fused") and text is None:
            text = self.encode_text(batch.src, batch.src_pad)
        if branch in ("image", "fused") and vision is None:
            vision = self.encode_image(batch.patches)
        if branch == "text":
            return text
        if branch == "image":
            return self.caption_memory(batch.tgt_tag, vision)
        return self.fuse(text, vision).as_states()

    # -- losses ----------------------------------------------------------
    def translation_loss(self, batch: Batch, memory: EncoderStates, loss_form: str | None = None) -> Tensor:
        prefix, labels = batch.tgt[:, :-1], batch.tgt[:, 1:]
        logits = self.decoder(prefix, memory, batch.tgt_pad[:, :-1], self._rng())
        return T.cross_entropy_label_smoothed(
            logits, labels, self.cfg.label_smoothing, PAD,
            subtract_entropy=(loss_form or self.cfg.loss_form) == "kl")

    def branch_loss(self, batch: Batch, branch: str, loss_form: str | None = None) -> Tensor:
        return self.branch_forward(batch, branch, loss_form)[0]

    def branch_forward(self, batch: Batch, branch: str, loss_form: str | None = None):
        """(loss, text states or None, vision states or None) for one branch."""
        text = self.encode_text(batch.src, batch.src_pad) if branch in ("text", "fused") else None
        vision = self.encode_image(batch.patches) if branch in ("image", "fused") else None
        mem = self.memory(batch, branch, text, vision)
        return self.translation_loss(batch, mem, loss_form), text, vision

    # -- decoding ----------------------------------------------------------
    def greedy_decode(self, memory: EncoderStates, max_len: int) -> np.ndarray:
        """Argmax decoding from bos; rows are padded with PAD after eos."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        B = memory.hidden.shape[0]
        out = np.full((B, 1), BOS, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        for _ in range(max_len):
            logits = self.decoder(out, memory)
            nxt = logits.data[:, -1].argmax(axis=-1)
            nxt = np.where(done, PAD, nxt)
            out = np.concatenate([out, nxt[:, None]], axis=1)
            done |= nxt == EOS
            if done.all():
                break
        return out

    def greedy_translate(self, batch: Batch, max_len: int = 32, mode: str = "fused") -> list[list[int]]:
        """Token ids (bos first, eos last when produced) for every batch row.

        ``mode`` picks the memory: ``fused`` (translation), ``text``, or
        ``image``/``caption`` (target tag + image only).
        """
        branch = "image" if mode == "caption" else mode
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                mem = self.memory(batch, branch)
                ids = self.greedy_decode(mem, max_len)
        finally:
            self.train(was_training)
        result = []
        for row in ids:
            seq = []
            for t in row:
                if t == PAD:
                    break
                seq.append(int(t))
                if t == EOS:
                    break
            result.append(seq)
        return result

    # -- state -------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()


def ablate_vision(model: M3P) -> M3P:
    """Copy of ``model`` whose fused memory carries no visual information.

    The fusion output projection is zeroed, so the fused memory reduces to
    the text states exactly.
    """
    clone = copy.deepcopy(model)
    fusion = clone.fusion
    if isinstance(fusion, CVLM):
        fusion.attn.o.weight.data[...] = 0.0
        fusion.attn.o.bias.data[...] = 0.0
    elif isinstance(fusion, GatedFusion):
        fusion.proj.weight.data[...] = 0.0
        fusion.proj.bias.data[...] = 0.0
    else:
        raise ValueError("vision ablation needs cvlm or gated fusion")
    return clone
