"""Run configuration and its JSON form.

JSON keys mirror the dataclass fields, except that ``lambda`` is the loss
weight and two nested objects are accepted::

    {"seed": 0, "epochs": 30, "lambda": 0.1, "fusion_mode": "early",
     "unet": {"depth": 3, "base_width": 16},
     "fusion_augment": {"enable": ["rotate", "hflip"], "max_angle": 15.0},
     "synth": {"n_train": 512, "n_val": 64, "n_test": 128, "distractor": true,
               "jitter": 0.5}}
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .augment import TRANSFORMS, AugRanges
from .errors import ConfigError, IoError
from .data import DEFAULT_JITTER
from .text import DEFAULT_VOCAB_SEED

FUSION_MODES = ("early", "misaligned", "interpolation")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-4
    lam: float = 0.1
    weight_decay: float = 1e-4
    image_size: int = 64
    channels: int = 1
    aug: bool = True
    text: bool = True
    fusion_mode: str = "early"
    vocab_seed: int = DEFAULT_VOCAB_SEED
    unet_depth: int = 3
    unet_width: int = 16
    dtype: str = "float32"
    aug_enable: tuple[str, ...] = tuple(sorted(TRANSFORMS))
    aug_ranges: AugRanges = field(default_factory=AugRanges)
    # synthetic corpus used by `synth` and by `experiment` when data_dir is empty
    synth_seed: int = 0
    n_train: int = 512
    n_val: int = 64
    n_test: int = 128
    distractor: bool = True
    jitter: float = DEFAULT_JITTER
    data_dir: str = "data"
    out_dir: str = "runs"

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.image_size % 8 or self.image_size % (2**self.unet_depth):
            raise ConfigError(f"image_size {self.image_size} must be divisible by 8 and 2**unet_depth")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not 0.0 <= self.jitter <= 1.0:
            raise ConfigError(f"jitter must lie in [0, 1], got {self.jitter}")
        if set(self.aug_enable) - TRANSFORMS:
            raise ConfigError(f"unknown transforms {sorted(set(self.aug_enable) - TRANSFORMS)}")

    @property
    def unet_in_channels(self) -> int:
        return 2 * self.channels if self.text else self.channels

    @property
    def effective_fusion(self) -> str | None:
        """Fusion mode actually in force; ``None`` when text is off."""
        return self.fusion_mode if self.text else None

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        d["aug_enable"] = list(self.aug_enable)
        d["aug_ranges"] = dataclasses.asdict(self.aug_ranges)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        unet = d.pop("unet", None) or {}
        if "depth" in unet:
            d["unet_depth"] = unet["depth"]
        if "base_width" in unet:
            d["unet_width"] = unet["base_width"]
        fa = dict(d.pop("fusion_augment", None) or {})
        if "enable" in fa:
            d["aug_enable"] = fa.pop("enable")
        ranges = dict(d.pop("aug_ranges", None) or {})
        ranges.update(fa)
        synth = d.pop("synth", None) or {}
        for key in ("n_train", "n_val", "n_test", "distractor", "jitter"):
            if key in synth:
                d[key] = synth[key]
        if "seed" in synth:
            d["synth_seed"] = synth["seed"]
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            d["aug_ranges"] = AugRanges(**ranges)
        except TypeError as exc:
            raise ConfigError(f"bad fusion_augment section: {exc}") from exc
        if "aug_enable" in d:
            d["aug_enable"] = tuple(sorted(d["aug_enable"]))
        return cls(**d)


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return RunConfig.from_dict(raw)
