"""Run configuration: TOML sections mapped onto dataclasses."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .augment import AugmentConfig
from .encoders import EncoderConfig
from .fusion import BranchSchedule


@dataclass
class DataSection:
    dir: str = "toy"
    train: str = ""
    test: str = ""
    vocab: str = ""
    patch_size: int = 8
    batch_size: int = 32
    initial_temperature: float = 1.0
    peak_temperature: float = 5.0
    warmup_epochs: int = 5

    def paths(self, base: Path | None = None) -> tuple[Path, Path, Path]:
        def resolve(value: str) -> Path:
            p = Path(value)
            return p if p.is_absolute() or base is None else base / p

        root = resolve(self.dir)
        return (resolve(self.train) if self.train else root / "train",
                resolve(self.test) if self.test else root / "test",
                resolve(self.vocab) if self.vocab else root / "vocab.txt")


@dataclass
class ModelSection:
    fusion: str = "cvlm"
    precision: str = "fp32"
    label_smoothing: float = 0.1
    loss_form: str = "kl"
    seed: int | None = None
    text_encoder: EncoderConfig = field(default_factory=EncoderConfig)
    vision_encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: EncoderConfig = field(default_factory=EncoderConfig)


@dataclass
class AlignSection:
    tau: float = 0.1
    text_text: str = "off"

    def __post_init__(self):
        if self.text_text not in ("off", "on"):
            raise ValueError("align.text_text must be 'off' or 'on'")
        if self.tau <= 0:
            raise ValueError("align.tau must be positive")


@dataclass
class LossSection:
    # ``lambda`` is a keyword, so the TOML key maps onto ``lam``
    lam: float = 1.0
    lambda_ramp: float = 0.1

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("loss.lambda must be >= 0")


@dataclass
class TrainSection:
    epochs: int = 30
    steps_per_epoch: int = 0          # 0: ceil(|D_all| / batch size)
    max_steps: int = 0                # 0: no cap
    lr: float = 3e-4
    warmup_steps: int = 200
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    seed: int = 0
    mdropnet: list[float] = field(default_factory=lambda: [0.25, 0.25, 0.50])
    source_mask_max: float = 0.0      # fused steps mask a U(0, max) share of source words
    eval_every: int = 1               # epochs; 0 disables
    eval_limit: int = 200
    max_len: int = 32
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("train.lr must be >= 0")
        if not 0.0 <= self.source_mask_max <= 1.0:
            raise ValueError("train.source_mask_max must lie in [0, 1]")
        BranchSchedule(*self.mdropnet)

    @property
    def schedule(self) -> BranchSchedule:
        return BranchSchedule(*self.mdropnet)


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    align: AlignSection = field(default_factory=AlignSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    base_dir: str = ""   # directory relative paths resolve against; not hashed

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        d["loss"]["lambda"] = d["loss"].pop("lam")
        return d

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, raw: dict, base_dir: str = "") -> "RunConfig":
        raw = json.loads(json.dumps(raw))  # deep copy
        known = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        loss = raw.get("loss", {})
        if "lambda" in loss:
            loss["lam"] = loss.pop("lambda")
        model = raw.get("model", {})
        for name in ("text_encoder", "vision_encoder", "decoder"):
            if name in model:
                model[name] = _build(EncoderConfig, model[name], f"model.{name}")
        return cls(
            data=_build(DataSection, raw.get("data", {}), "data"),
            model=_build(ModelSection, model, "model"),
            augment=_build(AugmentConfig, raw.get("augment", {}), "augment"),
            align=_build(AlignSection, raw.get("align", {}), "align"),
            loss=_build(LossSection, loss, "loss"),
            train=_build(TrainSection, raw.get("train", {}), "train"),
            base_dir=base_dir,
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        with path.open("rb") as fh:
            raw = tomllib.load(fh)
        return cls.from_dict(raw, base_dir=str(path.parent.resolve()))

    def resolve(self, value: str) -> Path:
        p = Path(value)
        if p.is_absolute() or not self.base_dir:
            return p
        return Path(self.base_dir) / p

    def data_paths(self) -> tuple[Path, Path, Path]:
        return self.data.paths(Path(self.base_dir) if self.base_dir else None)


def _build(cls, values: dict, section: str):
    if isinstance(values, cls):
        return values
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return cls(**values)
