"""Text-to-pseudo-image generator.

Chain for an ``S x S x C`` image with ``base = S / 8``::

    embedding [768] --FC--> [base**2] --reshape--> [1, base, base]
      --TC(k4,s2,p1)+relu--> [16, 2b, 2b] --TC+relu--> [8, 4b, 4b]
      --TC+sigmoid--> [C, S, S]

At ``S = 224`` this is 768 -> 784 -> 28x28x1 -> 224x224xC.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import Params, kaiming_uniform, zeros
from .tensor import Tensor
from .text import EMBED_DIM

TC_KERNEL, TC_STRIDE, TC_PAD = 4, 2, 1


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 64
    channels: int = 1
    hidden: tuple[int, int] = (16, 8)

    def __post_init__(self):
        if self.image_size <= 0 or self.image_size % 8:
            raise ConfigError(f"image size must be a positive multiple of 8, got {self.image_size}")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        if len(self.hidden) != 2 or min(self.hidden) < 1:
            raise ConfigError(f"hidden must be two positive widths, got {self.hidden}")

    @property
    def base(self) -> int:
        return self.image_size // 8

    @property
    def fc_out(self) -> int:
        return self.base**2

    @property
    def tc_channels(self) -> tuple[int, ...]:
        return (1, *self.hidden, self.channels)


def init_generator(cfg: GeneratorConfig, seed: int) -> Params:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6E4]))
    params: Params = {
        "fc_w": kaiming_uniform(rng, (EMBED_DIM, cfg.fc_out), EMBED_DIM),
        "fc_b": zeros((cfg.fc_out,)),
    }
    chans = cfg.tc_channels
    for i in range(3):
        cin, cout = chans[i], chans[i + 1]
        # each output pixel of a k4/s2 transpose conv sees cin * (k/s)^2 inputs
        fan_in = cin * (TC_KERNEL // TC_STRIDE) ** 2
        params[f"tc{i}_w"] = kaiming_uniform(rng, (cin, cout, TC_KERNEL, TC_KERNEL), fan_in)
        params[f"tc{i}_b"] = zeros((cout,))
    return params


def _as_batch(embedding, dtype) -> Tensor:
    b = embedding if isinstance(embedding, Tensor) else Tensor(np.asarray(embedding, dtype=dtype))
    if b.shape[-1] != EMBED_DIM or len(b.shape) > 2:
        raise ShapeError(f"embedding must have trailing dimension {EMBED_DIM}, got {list(b.shape)}")
    if len(b.shape) == 1:
        b = T.reshape(b, (1, EMBED_DIM))
    return b


def project(params: Params, cfg: GeneratorConfig, embedding) -> Tensor:
    """FC projection and reshape to the coarse grid ``[N, 1, base, base]``."""
    b = _as_batch(embedding, params["fc_w"].dtype)
    projected = T.linear(b, params["fc_w"], params["fc_b"])
    return T.reshape(projected, (b.shape[0], 1, cfg.base, cfg.base))


def generate_pseudo(params: Params, cfg: GeneratorConfig, embedding) -> Tensor:
    """Pseudo image ``[N, C, S, S]`` in ``[0, 1]`` for a batch of embeddings."""
    h = project(params, cfg, embedding)
    for i in range(3):
        h = T.transpose_conv2d(h, params[f"tc{i}_w"], params[f"tc{i}_b"], TC_STRIDE, TC_PAD)
        h = T.relu(h) if i < 2 else T.sigmoid(h)
    return h


def interpolate_pseudo(params: Params, cfg: GeneratorConfig, embedding) -> Tensor:
    """Ablation variant: FC projection resized bilinearly to full resolution.

    No transpose convolutions and no output activation; the single resized
    map is repeated across ``cfg.channels``.
    """
    grid = project(params, cfg, embedding)
    full = T.resize_bilinear(grid, cfg.image_size, cfg.image_size)
    out = full
    for _ in range(cfg.channels - 1):
        out = T.concat_channels(out, full)
    return out
