"""Training loop: temperature sampling, branch schedule, joint loss, Adam."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .alignment import ContrastiveBatch, first_occurrences, info_nce, pool
from .augment import augment_image, mask_text_spans, mask_token_ratio
from .config import RunConfig
from .data import (Batch, CorpusSet, SamplerConfig, Vocab, epoch_temperature, load_corpus_dir, sample_batch,
                   sampling_probs)
from .encoders import EncoderStates
from .evaluate import evaluate_bleu
from .fusion import pick_branch
from .model import M3P, ModelConfig
from .optim import Adam
from .tensor import Tensor

log = logging.getLogger(__name__)

__all__ = ["train", "Trainer", "TrainResult", "build_model", "load_model", "contrastive_loss",
           "lambda_at", "TrainingDiverged"]


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class LossBreakdown:
    step: int
    epoch: int
    branch: str
    l_m: float
    l_c: float | None
    l_all: float
    lam: float
    lr: float
    temperature: float

    def record(self) -> dict:
        return {"step": self.step, "epoch": self.epoch, "branch": self.branch, "l_m": self.l_m,
                "l_c": self.l_c, "l_all": self.l_all, "lambda": self.lam, "lr": self.lr,
                "temperature": self.temperature}


@dataclass
class TrainResult:
    model: M3P
    optimizer: Adam
    metrics: list[dict]
    out_dir: Path
    evals: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


def build_model(cfg: RunConfig, vocab_size: int, patch_dim: int) -> M3P:
    m = cfg.model
    mc = ModelConfig(vocab_size=vocab_size, patch_dim=patch_dim, text_encoder=m.text_encoder,
                     vision_encoder=m.vision_encoder, decoder=m.decoder, fusion=m.fusion,
                     precision=m.precision, label_smoothing=m.label_smoothing, loss_form=m.loss_form)
    return M3P(mc, seed=cfg.train.seed if m.seed is None else m.seed)


def lambda_at(step: int, total_steps: int, lam: float, ramp: float) -> float:
    """Contrastive weight, ramped linearly over the first ``ramp`` share of steps."""
    ramp_steps = ramp * total_steps
    if ramp_steps <= 0:
        return lam
    return lam * min(1.0, step / ramp_steps)


def contrastive_loss(model: M3P, batch: Batch, cfg: RunConfig, step: int, rng: np.random.Generator,
                     text: EncoderStates | None = None, vision: EncoderStates | None = None) -> Tensor:
    """In-batch InfoNCE between one augmented and one clean view.

    Even steps pair masked-span text with the clean image, odd steps the
    clean text with the augmented image. Rows sharing an image keep only
    their first occurrence so no positive doubles as a negative.
    """
    if step % 2 == 0:
        tokens = np.stack([mask_text_spans(row, cfg.augment, rng) for row in batch.src])
        text = model.encode_text(tokens, batch.src_pad)
        if vision is None:
            vision = model.encode_image(batch.patches)
    else:
        if text is None:
            text = model.encode_text(batch.src, batch.src_pad)
        patches = np.stack([augment_image(s.image, cfg.augment, rng).patches for s in batch.samples])
        vision = model.encode_image(patches)
    keep = first_occurrences(batch.image_keys)
    text_emb = pool(text, model.text_pool)[keep]
    image_emb = pool(vision, model.image_pool)[keep]
    loss = info_nce(ContrastiveBatch(text_emb, image_emb, cfg.align.tau))
    if cfg.align.text_text == "on":
        tgt = pool(model.encode_text(batch.tgt, batch.tgt_pad), model.text_pool)[keep]
        loss = loss + info_nce(ContrastiveBatch(text_emb, tgt, cfg.align.tau))
    return loss


def load_data(cfg: RunConfig) -> tuple[CorpusSet, CorpusSet | None, Vocab]:
    train_dir, test_dir, vocab_path = cfg.data_paths()
    for p in (train_dir, vocab_path):
        if not p.exists():
            raise FileNotFoundError(p)
    vocab = Vocab.load(vocab_path)
    train_set = load_corpus_dir(train_dir, vocab, cfg.data.patch_size)
    test_set = load_corpus_dir(test_dir, vocab, cfg.data.patch_size) if test_dir.exists() else None
    return train_set, test_set, vocab


class Trainer:
    def __init__(self, cfg: RunConfig, train_set: CorpusSet, test_set: CorpusSet | None = None,
                 out_dir: Path | None = None):
        self.cfg = cfg
        self.train_set = train_set
        self.test_set = test_set
        self.vocab = train_set.vocab
        patch_dim = train_set.corpora[0].samples[0].image.patch_dim
        self.model = build_model(cfg, len(self.vocab), patch_dim)
        t = cfg.train
        self.optimizer = Adam(self.model.named_parameters(), t.lr, (t.beta1, t.beta2), t.eps, t.warmup_steps)
        seeds = np.random.SeedSequence(t.seed).spawn(3)
        self.data_rng = np.random.Generator(np.random.Philox(seeds[0]))
        self.branch_rng = np.random.Generator(np.random.Philox(seeds[1]))
        self.aug_rng = np.random.Generator(np.random.Philox(seeds[2]))
        self.sampler = SamplerConfig(cfg.data.peak_temperature, cfg.data.initial_temperature,
                                     cfg.data.warmup_epochs, cfg.data.batch_size, t.seed)
        self.steps_per_epoch = t.steps_per_epoch or math.ceil(len(train_set) / cfg.data.batch_size)
        total = t.epochs * self.steps_per_epoch
        self.total_steps = min(total, t.max_steps) if t.max_steps else total
        self.out_dir = Path(out_dir) if out_dir is not None else cfg.resolve(t.out_dir)
        self.step = 0
        self.epoch = 0

    # -- one step ----------------------------------------------------------
    def train_step(self, batch: Batch, temperature: float) -> LossBreakdown:
        cfg, model = self.cfg, self.model
        step = self.step + 1
        branch = pick_branch(cfg.train.schedule, step, self.branch_rng)
        clean = batch
        if branch == "fused" and cfg.train.source_mask_max > 0:
            batch = self._mask_sources(batch)
        loss_m, text, vision = model.branch_forward(batch, branch)
        lam = lambda_at(step, self.total_steps, cfg.loss.lam, cfg.loss.lambda_ramp)
        loss_c = None
        if branch != "image":
            # the contrastive views always start from the clean source
            text = text if clean is batch else None
            loss_c = contrastive_loss(model, clean, cfg, step, self.aug_rng, text, vision)
        total = loss_m.astype(np.float64)
        if loss_c is not None and lam != 0.0:
            total = total + loss_c.astype(np.float64) * lam
        l_m = float(loss_m.astype(np.float64).data)
        l_c = None if loss_c is None else float(loss_c.astype(np.float64).data)
        if not math.isfinite(float(total.data)):
            self._dump_divergence(batch, branch, l_m, l_c)
        self.optimizer.zero_grad()
        total.backward()
        lr = self.optimizer.step()
        self.step = step
        return LossBreakdown(step, self.epoch, branch, l_m, l_c, float(total.data), lam, lr, temperature)

    def _mask_sources(self, batch: Batch) -> Batch:
        hi = self.cfg.train.source_mask_max
        rows = [mask_token_ratio(row, self.aug_rng.uniform(0.0, hi), self.aug_rng) for row in batch.src]
        return replace(batch, src=np.stack(rows))

    def _dump_divergence(self, batch: Batch, branch: str, l_m: float, l_c: float | None):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        norms = {n: float(np.linalg.norm(p.data)) for n, p in self.model.named_parameters()}
        dump = {"step": self.step + 1, "branch": branch, "l_m": l_m, "l_c": l_c,
                "src": batch.src.tolist(), "tgt": batch.tgt.tolist(), "param_norms": norms}
        path = self.out_dir / "divergence.json"
        path.write_text(json.dumps(dump, indent=1, allow_nan=True))
        raise TrainingDiverged(f"non-finite loss at step {self.step + 1} ({branch}); diagnostics in {path}")

    # -- loop --------------------------------------------------------------
    def run(self, epochs: int | None = None, log_path: Path | None = None, save: bool = True) -> TrainResult:
        epochs = self.cfg.train.epochs if epochs is None else epochs
        self.out_dir.mkdir(parents=True, exist_ok=True)
        log_path = log_path or self.out_dir / "metrics.jsonl"
        metrics: list[dict] = []
        evals: list[dict] = []
        best = -1.0
        self.model.train()
        with open(log_path, "w") as fh:
            for epoch in range(epochs):
                if self.step >= self.total_steps:
                    break
                self.epoch = epoch
                tau = epoch_temperature(epoch, self.sampler)
                q = sampling_probs(self.train_set.sizes, tau)
                for _ in range(self.steps_per_epoch):
                    if self.step >= self.total_steps:
                        break
                    batch = sample_batch(self.train_set, q, self.cfg.data.batch_size, self.data_rng)
                    rec = self.train_step(batch, tau).record()
                    metrics.append(rec)
                    fh.write(json.dumps(rec) + "\n")
                fh.flush()
                every = self.cfg.train.eval_every
                if every and (epoch + 1) % every == 0 and self.test_set is not None:
                    dev = self.test_set.all_samples()[: self.cfg.train.eval_limit]
                    bleu = evaluate_bleu(self.model, dev, self.vocab, "translate", self.cfg.train.max_len)
                    evals.append({"epoch": epoch, "step": self.step, "dev_bleu": bleu})
                    log.info("epoch %d step %d dev BLEU %.2f", epoch, self.step, bleu)
                    if save:
                        self.save(self.out_dir / "last.ckpt")
                        if bleu > best:
                            best = bleu
                            self.save(self.out_dir / "best.ckpt")
        final = None
        if save:
            final = self.out_dir / "last.ckpt"
            self.save(final)
        return TrainResult(self.model, self.optimizer, metrics, self.out_dir, evals, final)

    # -- persistence -------------------------------------------------------
    def checkpoint(self) -> ckpt.Checkpoint:
        tensors = {f"param/{n}": a for n, a in self.model.state_dict().items()}
        tensors.update(self.optimizer.state_arrays())
        rng = {name: ckpt.rng_state(g) for name, g in (("data", self.data_rng), ("branch", self.branch_rng),
                                                        ("augment", self.aug_rng),
                                                        ("dropout", self.model.dropout_rng))}
        return ckpt.Checkpoint(self.cfg.to_dict(), self.cfg.config_hash(), list(self.vocab.tokens), tensors,
                               self.step, self.epoch, rng)

    def save(self, path) -> None:
        ckpt.save(path, self.checkpoint())

    def restore(self, ck: ckpt.Checkpoint) -> None:
        if ck.config_hash != self.cfg.config_hash():
            raise ckpt.CheckpointError("checkpoint was written under a different run config")
        self.model.load_state_dict(ck.params())
        self.optimizer.load_state_arrays(ck.optimizer_arrays(), ck.step)
        for name, g in (("data", self.data_rng), ("branch", self.branch_rng), ("augment", self.aug_rng),
                        ("dropout", self.model.dropout_rng)):
            ckpt.restore_rng(g, ck.rng_states[name])
        self.step, self.epoch = ck.step, ck.epoch


def train(cfg: RunConfig, out_dir: Path | None = None) -> TrainResult:
    train_set, test_set, _ = load_data(cfg)
    return Trainer(cfg, train_set, test_set, out_dir).run()


def load_model(path, expected_hash: str | None = None) -> tuple[M3P, Vocab, RunConfig]:
    """Rebuild model, vocabulary and run config from a checkpoint file."""
    ck = ckpt.load(path, expected_hash)
    cfg = RunConfig.from_dict(ck.config)
    vocab = Vocab.from_tokens(ck.vocab)
    params = ck.params()
    patch_dim = params["vision_encoder.proj.weight"].shape[0]
    model = build_model(cfg, len(vocab), patch_dim)
    model.load_state_dict(params)
    ckpt.restore_rng(model.dropout_rng, ck.rng_states["dropout"])
    model.eval()
    return model, vocab, cfg
