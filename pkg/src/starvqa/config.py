"""Model and training configuration."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

MODES = ("video", "image")
LOSSES = ("vr", "l2", "cross_entropy")


@dataclass
class ModelConfig:
    n_frames: int = 16
    crop: int = 224
    patch: int = 16
    # None means the patch token length patch*patch*3.
    embed_dim: int | None = None
    heads: int = 12
    blocks: int = 12
    anchors: int = 6
    lo: float = 0.0
    hi: float = 5.0
    mlp_ratio: int = 4
    # Output classes of the cross-entropy head; None means one per anchor.
    num_classes: int | None = None
    mode: str = "video"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("n_frames", "crop", "patch", "heads", "blocks", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.patch > self.crop:
            raise ConfigError(f"patch {self.patch} larger than crop {self.crop}")
        if self.anchors < 2:
            raise ConfigError(f"anchors must be >= 2, got {self.anchors}")
        if not self.hi > self.lo:
            raise ConfigError(f"scaled MOS range needs hi > lo, got [{self.lo}, {self.hi}]")
        if self.dim % self.heads:
            raise ConfigError(f"embedding width {self.dim} not divisible by {self.heads} heads")
        if self.num_classes is not None and self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.mode == "image" and self.n_frames != 1:
            raise ConfigError("image mode uses a single frame; set n_frames=1")

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3

    @property
    def dim(self) -> int:
        return self.embed_dim if self.embed_dim is not None else self.patch_dim

    @property
    def n_patches(self) -> int:
        g = self.crop // self.patch
        return g * g

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def out_dim(self) -> int:
        return self.num_classes if self.num_classes is not None else self.anchors

    def replace(self, **changes) -> "ModelConfig":
        d = asdict(self)
        d.update(changes)
        return ModelConfig(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr0: float = 0.005
    momentum: float = 0.9
    decay_every: int = 10
    decay_factor: float = 0.1
    epochs: int = 30
    batch: int = 8
    seed: int = 0
    loss: str = "vr"
    test_fraction: float = 0.2

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if self.lr0 <= 0 or self.decay_factor <= 0 or self.momentum < 0:
            raise ConfigError("learning rate, decay factor and momentum must be positive")
        if self.decay_every < 1 or self.batch < 1 or self.epochs < 0:
            raise ConfigError("decay_every and batch must be >= 1, epochs >= 0")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")

    @property
    def mode(self) -> str:
        return self.model.mode

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        """Accepts nested ``{"model": {...}}`` or flat keys for model fields."""
        d = dict(d)
        model = dict(d.pop("model", {}) or {})
        model_keys = {f.name for f in fields(ModelConfig)}
        train_keys = {f.name for f in fields(cls)}
        for k in list(d):
            if k in model_keys:
                model[k] = d.pop(k)
        unknown = set(d) - train_keys
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(model=ModelConfig(**model), **d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(data)

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        model = d.pop("model")
        for k, v in changes.items():
            if k in model:
                model[k] = v
            else:
                d[k] = v
        return TrainConfig.from_dict({"model": model, **d})
