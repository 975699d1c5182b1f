"""Configuration dataclasses and loading helpers.

Every tunable of the tracker lives here, grouped by subsystem.  Config files
are YAML (JSON is accepted since it is a YAML subset) and use the same
section names as the dataclasses: ``data``, ``backbone``, ``cls``, ``reg``,
``inst``, ``train``, ``track``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration values."""


@dataclass
class DatasetSpec:
    num_videos: int = 64
    frames_per_video: int = 30
    image_size: int = 128
    distractor_count: tuple[int, int] = (0, 2)
    occlusion_prob: float = 0.3
    speed: tuple[float, float] = (0.5, 2.5)
    target_size: tuple[float, float] = (18.0, 30.0)
    scale_variation: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.num_videos < 0:
            raise ConfigError(f"num_videos must be >= 0, got {self.num_videos}")
        if self.frames_per_video < 2:
            raise ConfigError(f"frames_per_video must be >= 2, got {self.frames_per_video}")
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")
        lo, hi = self.distractor_count
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad distractor_count range {self.distractor_count}")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ConfigError(f"occlusion_prob must lie in [0, 1], got {self.occlusion_prob}")
        if self.speed[0] < 0 or self.speed[1] < self.speed[0]:
            raise ConfigError(f"bad speed range {self.speed}")
        smin, smax = self.target_size
        if smin <= 2 or smax < smin or smax * (1 + self.scale_variation) > self.image_size / 2:
            raise ConfigError(f"bad target_size range {self.target_size}")
        if not 0.0 <= self.scale_variation < 0.5:
            raise ConfigError(f"scale_variation must lie in [0, 0.5), got {self.scale_variation}")


@dataclass
class CropConfig:
    """Geometry of the template/search crops fed to the network."""

    search_size: int = 128
    template_size: int = 88
    search_area_factor: float = 4.0
    template_area_factor: float = 2.0
    center_jitter: float = 0.2
    scale_jitter: float = 0.1


@dataclass
class BackboneConfig:
    widths: tuple[int, ...] = (16, 32, 64, 64)
    strides: tuple[int, ...] = (2, 2, 2, 1)

    @property
    def out_channels(self) -> int:
        return self.widths[-1]

    @property
    def stride(self) -> int:
        s = 1
        for v in self.strides:
            s *= v
        return s


@dataclass
class ClsConfig:
    reg_factor: float = 0.01
    sigma: float = 1.0
    filter_size: int = 5
    inner_steps: int = 20
    augmentation_count: int = 4
    peak_ratio: float = 0.8
    peak_exclusion_radius: int = 3
    max_set_size: int = 15

    def validate(self) -> None:
        if self.reg_factor < 0:
            raise ConfigError("cls.reg_factor must be >= 0")
        if self.filter_size % 2 == 0 or self.filter_size < 1:
            raise ConfigError("cls.filter_size must be odd and positive")
        if self.sigma <= 0:
            raise ConfigError("cls.sigma must be > 0")
        if self.max_set_size < 1:
            raise ConfigError("cls.max_set_size must be >= 1")


@dataclass
class RegConfig:
    sigma_y: tuple[float, float, float, float] = (0.05, 0.05, 0.1, 0.1)
    num_candidates: int = 16
    pool_size: int = 3
    hidden: int = 128
    refine_steps: int = 5
    refine_step_size: float = 0.0005
    refine_candidates: int = 5

    def validate(self) -> None:
        if any(s <= 0 for s in self.sigma_y):
            raise ConfigError("reg.sigma_y must be positive")
        if self.num_candidates < 2:
            raise ConfigError("reg.num_candidates must be >= 2")


@dataclass
class InstConfig:
    variant: str = "object"
    K: int = 1000
    tau: float = 0.07
    F: int = 3
    embed_dim: int = 128
    hidden: int = 256
    momentum: float = 0.999
    global_pool: str = "avg"

    VARIANTS = ("video", "object", "fused_shared", "fused_separated")

    def validate(self) -> None:
        if self.variant not in self.VARIANTS:
            raise ConfigError(f"inst.variant must be one of {self.VARIANTS}, got {self.variant!r}")
        if self.K < 0:
            raise ConfigError("inst.K must be >= 0")
        if self.tau <= 0:
            raise ConfigError("inst.tau must be > 0")
        if self.F < 1:
            raise ConfigError("inst.F must be >= 1")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError("inst.momentum must lie in [0, 1]")
        if self.global_pool not in ("avg", "max"):
            raise ConfigError("inst.global_pool must be 'avg' or 'max'")


@dataclass
class LossWeights:
    cls: float = 100.0
    reg: float = 0.01
    ins: float = 0.01

    def validate(self) -> None:
        if min(self.cls, self.reg, self.ins) < 0:
            raise ConfigError("loss weights must be >= 0")


@dataclass
class TrainConfig:
    epochs: int = 50
    steps_per_epoch: int = 40
    batch_size: int = 16
    lr: float = 1e-3
    lr_decay: float = 0.2
    decay_epochs: tuple[int, ...] = (15, 30, 45)
    seed: int = 0
    checkpoint_every: int = 500
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> None:
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("train.epochs, steps_per_epoch and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("train.lr must be > 0")
        de = list(self.decay_epochs)
        if any(b <= a for a, b in zip(de, de[1:])):
            raise ConfigError("train.decay_epochs must be strictly increasing")
        if de and de[-1] >= self.epochs:
            raise ConfigError("train.decay_epochs must be < epochs")
        self.weights.validate()


@dataclass
class TrackConfig:
    low_confidence: float = 0.1
    size_lr: float = 0.5
    subpixel: bool = True


INFERENCE_ONLY = {
    "cls": ("inner_steps", "augmentation_count", "peak_ratio", "peak_exclusion_radius", "max_set_size"),
    "reg": ("refine_steps", "refine_step_size", "refine_candidates"),
}


@dataclass
class IATConfig:
    data: DatasetSpec = field(default_factory=DatasetSpec)
    crop: CropConfig = field(default_factory=CropConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    cls: ClsConfig = field(default_factory=ClsConfig)
    reg: RegConfig = field(default_factory=RegConfig)
    inst: InstConfig = field(default_factory=InstConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    track: TrackConfig = field(default_factory=TrackConfig)

    def validate(self) -> "IATConfig":
        self.data.validate()
        self.cls.validate()
        self.reg.validate()
        self.inst.validate()
        self.train.validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        return _jsonable(dataclasses.asdict(self))

    def hash(self, exclude: tuple[str, ...] = ("track",)) -> str:
        """Stable digest of everything that shapes training.

        Inference-only settings (the ``track`` section and the fields in
        ``INFERENCE_ONLY``) are left out, so a checkpoint can be tracked
        with different online-update or refinement settings.
        """
        d = self.to_dict()
        for key in exclude:
            d.pop(key, None)
        for section, names in INFERENCE_ONLY.items():
            for name in names:
                d.get(section, {}).pop(name, None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **dotted: Any) -> "IATConfig":
        """Copy with overrides given as ``section__field=value``."""
        d = self.to_dict()
        for key, value in dotted.items():
            section, name = key.split("__", 1)
            if name.startswith("weights__"):
                d[section]["weights"][name.split("__", 1)[1]] = value
            else:
                d[section][name] = value
        return from_dict(d)


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _build(cls: type, data: dict[str, Any]) -> Any:
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value)
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict[str, Any]) -> IATConfig:
    return _build(IATConfig, data).validate()


def load_config(path: str | Path | None) -> IATConfig:
    if path is None:
        return IATConfig().validate()
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(data)


def save_config(cfg: IATConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
