"""Model and training configuration.

All configs are plain dataclasses so they serialize to nested dicts (for
checkpoints and the effective-config echo) and back without loss.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Optional

from .errors import ConfigError

PATCH_STRIDES = (4, 2, 2, 2)
PATCH_KERNELS = (7, 3, 3, 3)
PYRAMID_STRIDES = (4, 8, 16, 32)

DCFM_VARIANTS = ("full", "alpha", "beta")
PHI_KERNELS = ("softplus", "shifted-rectifier")


@dataclass
class EncoderConfig:
    channels: tuple[int, ...] = (32, 64, 160, 256)
    depths: tuple[int, ...] = (2, 2, 2, 2)
    heads: tuple[int, ...] = (1, 2, 5, 8)
    sr_ratios: tuple[int, ...] = (8, 4, 2, 1)
    mlp_ratio: float = 4.0
    in_channels: int = 3

    @property
    def patch_strides(self) -> tuple[int, ...]:
        return PATCH_STRIDES

    def validate(self) -> None:
        for name in ("channels", "depths", "heads", "sr_ratios"):
            values = getattr(self, name)
            if len(values) != 4:
                raise ConfigError(f"encoder.{name} needs 4 entries, got {len(values)}")
            if any(int(v) != v or v < 1 for v in values):
                raise ConfigError(f"encoder.{name} must be positive integers, got {values}")
        for j, (c, h) in enumerate(zip(self.channels, self.heads)):
            if c % h:
                raise ConfigError(f"encoder.channels[{j}]={c} not divisible by heads[{j}]={h}")
        if any(a < b for a, b in zip(self.sr_ratios, self.sr_ratios[1:])):
            raise ConfigError(f"encoder.sr_ratios must be nonincreasing, got {self.sr_ratios}")
        if self.mlp_ratio <= 0:
            raise ConfigError("encoder.mlp_ratio must be positive")
        if self.in_channels < 1:
            raise ConfigError("encoder.in_channels must be positive")


@dataclass
class DcfmConfig:
    heads: int = 1
    num_agents: int = 16
    kernel_phi: str = "softplus"
    include_bias: bool = True
    variant: str = "full"

    def validate(self) -> None:
        if self.heads < 1:
            raise ConfigError("dcfm.heads must be positive")
        if self.num_agents < 1:
            raise ConfigError("dcfm.num_agents must be positive")
        if self.kernel_phi not in PHI_KERNELS:
            raise ConfigError(f"dcfm.kernel_phi must be one of {PHI_KERNELS}, got {self.kernel_phi!r}")
        if self.variant not in DCFM_VARIANTS:
            raise ConfigError(f"dcfm.variant must be one of {DCFM_VARIANTS}, got {self.variant!r}")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    dcfm: DcfmConfig = field(default_factory=DcfmConfig)
    use_pefm: bool = True
    use_dcfm: bool = True
    threshold: float = 0.5

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        enc = EncoderConfig(channels=(8, 16, 32, 64), depths=(1, 1, 1, 1), heads=(1, 2, 4, 8), mlp_ratio=2.0)
        return cls(encoder=enc, **overrides)

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.encoder.channels)

    def validate(self) -> None:
        self.encoder.validate()
        self.dcfm.validate()
        for c in self.encoder.channels:
            if c % self.dcfm.heads:
                raise ConfigError(f"channel width {c} not divisible by dcfm.heads={self.dcfm.heads}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")

    def variant_name(self) -> str:
        if not self.use_pefm:
            return "no-pefm"
        if not self.use_dcfm:
            return "no-dcfm"
        return {"full": "full", "alpha": "dcfm-alpha", "beta": "dcfm-beta"}[self.dcfm.variant]

    def with_variant(self, name: str) -> "ModelConfig":
        """Copy of this config switched to one of the ablation variants."""
        cfg = from_dict(ModelConfig, to_dict(self))
        cfg.use_pefm, cfg.use_dcfm, cfg.dcfm.variant = True, True, "full"
        if name == "no-pefm":
            cfg.use_pefm = False
        elif name == "no-dcfm":
            cfg.use_dcfm = False
        elif name in ("alpha", "dcfm-alpha"):
            cfg.dcfm.variant = "alpha"
        elif name in ("beta", "dcfm-beta"):
            cfg.dcfm.variant = "beta"
        elif name != "full":
            raise ConfigError(f"unknown variant {name!r}")
        return cfg


@dataclass
class TrainConfig:
    epochs: int = 500
    lr0: float = 5e-4
    lr_min: Optional[float] = None  # defaults to lr0 / 100
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 8
    seed: int = 0
    best_metric: str = "f1"
    eps_bce: float = 1e-7
    divergence_factor: float = 100.0
    divergence_patience: int = 5
    flip_augment: bool = False

    @property
    def lr_floor(self) -> float:
        return self.lr0 / 100.0 if self.lr_min is None else self.lr_min

    def validate(self) -> None:
        if not self.lr0 > 0:
            raise ConfigError("train.lr0 must be positive")
        if self.lr_min is not None and not 0 <= self.lr_min <= self.lr0:
            raise ConfigError("train.lr_min must lie in [0, lr0]")
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.best_metric not in ("f1", "iou", "precision", "recall"):
            raise ConfigError(f"train.best_metric must be a metric name, got {self.best_metric!r}")
        if not self.eps_bce > 0:
            raise ConfigError("train.eps_bce must be positive")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("train.betas must be two values in [0, 1)")


def to_dict(cfg) -> dict:
    out = dataclasses.asdict(cfg)

    def untuple(v):
        if isinstance(v, dict):
            return {k: untuple(x) for k, x in v.items()}
        if isinstance(v, tuple):
            return list(v)
        return v

    return untuple(out)


def _coerce(value: Any, annotation: str, key: str) -> Any:
    ann = annotation.replace("Optional[", "").rstrip("]") if annotation.startswith("Optional[") else annotation
    if annotation.startswith("Optional[") and value is None:
        return None
    try:
        if ann.startswith("tuple["):
            if isinstance(value, str):
                value = [v for v in value.replace("(", "").replace(")", "").split(",") if v.strip()]
            if not isinstance(value, (list, tuple)):
                raise TypeError
            inner = ann[len("tuple["):].split(",")[0].strip()
            cast = {"int": int, "float": float}[inner]
            items = tuple(cast(v) for v in value)
            if cast is int and any(isinstance(v, float) and not float(v).is_integer() for v in value):
                raise TypeError
            return items
        if ann == "bool":
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
                return value.lower() in ("true", "1", "yes")
            raise TypeError
        if ann == "int":
            if isinstance(value, bool):
                raise TypeError
            if isinstance(value, float) and not value.is_integer():
                raise TypeError
            return int(value)
        if ann == "float":
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if ann == "str":
            if not isinstance(value, str):
                raise TypeError
            return value
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {annotation}") from None
    raise ConfigError(f"{key}: unsupported field type {annotation}")


def from_dict(cls, data: dict, prefix: str = ""):
    """Build a (nested) config dataclass from a dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        full = f"{prefix}{key}"
        if key not in fields:
            raise ConfigError(f"unknown config key {full!r}")
        ann = fields[key].type
        sub = {"EncoderConfig": EncoderConfig, "DcfmConfig": DcfmConfig}.get(ann)
        if sub is not None:
            kwargs[key] = from_dict(sub, value, prefix=f"{full}.")
        else:
            kwargs[key] = _coerce(value, ann, full)
    return cls(**kwargs)
