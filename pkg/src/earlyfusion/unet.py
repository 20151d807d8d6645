"""Small UNet producing a one-channel logit map.

Level ``l`` has ``base_width * 2**l`` channels. Encoder levels run two 3x3
conv+ReLU blocks and halve resolution with a stride-2 3x3 conv; the decoder
upsamples with a 2x2 stride-2 transpose conv, concatenates the skip and runs
two more 3x3 conv+ReLU blocks. A 1x1 conv produces the logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import Params, kaiming_uniform, zeros
from .tensor import Tensor


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 2
    depth: int = 3
    base_width: int = 16
    image_size: int = 64

    def __post_init__(self):
        if self.in_channels < 1 or self.depth < 1 or self.base_width < 1:
            raise ConfigError(f"invalid UNet config {self}")
        if self.image_size % (2**self.depth):
            raise ConfigError(f"image size {self.image_size} not divisible by 2**{self.depth}")

    def width(self, level: int) -> int:
        return self.base_width * 2**level


def _conv(rng, params: Params, name: str, cin: int, cout: int, k: int) -> None:
    params[f"{name}_w"] = kaiming_uniform(rng, (cout, cin, k, k), cin * k * k)
    params[f"{name}_b"] = zeros((cout,))


def init_unet(cfg: UNetConfig, seed: int) -> Params:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0E7]))
    p: Params = {}
    cin = cfg.in_channels
    for lvl in range(cfg.depth):
        w = cfg.width(lvl)
        _conv(rng, p, f"enc{lvl}_a", cin, w, 3)
        _conv(rng, p, f"enc{lvl}_b", w, w, 3)
        _conv(rng, p, f"down{lvl}", w, cfg.width(lvl + 1), 3)
        cin = cfg.width(lvl + 1)
    wb = cfg.width(cfg.depth)
    _conv(rng, p, "mid_a", wb, wb, 3)
    _conv(rng, p, "mid_b", wb, wb, 3)
    for lvl in reversed(range(cfg.depth)):
        w, wup = cfg.width(lvl), cfg.width(lvl + 1)
        p[f"up{lvl}_w"] = kaiming_uniform(rng, (wup, w, 2, 2), wup)
        p[f"up{lvl}_b"] = zeros((w,))
        _conv(rng, p, f"dec{lvl}_a", 2 * w, w, 3)
        _conv(rng, p, f"dec{lvl}_b", w, w, 3)
    _conv(rng, p, "head", cfg.base_width, 1, 1)
    return p


def _block(p: Params, name: str, x: Tensor, stride: int = 1) -> Tensor:
    return T.relu(T.conv2d(x, p[f"{name}_w"], p[f"{name}_b"], stride, 1))


def unet_forward(params: Params, cfg: UNetConfig, x: Tensor, zero_skips=()) -> Tensor:
    """Logits ``[N, 1, H, W]``. ``zero_skips`` lists levels whose skip is replaced by zeros."""
    if len(x.shape) != 4 or x.shape[1] != cfg.in_channels or x.shape[2] != x.shape[3]:
        raise ShapeError(f"UNet expects [N,{cfg.in_channels},S,S], got {list(x.shape)}")
    if x.shape[2] % (2**cfg.depth):
        raise ShapeError(f"input size {x.shape[2]} not divisible by 2**{cfg.depth}")
    skips = []
    h = x
    for lvl in range(cfg.depth):
        h = _block(params, f"enc{lvl}_b", _block(params, f"enc{lvl}_a", h))
        skips.append(h)
        h = T.relu(T.conv2d(h, params[f"down{lvl}_w"], params[f"down{lvl}_b"], 2, 1))
    h = _block(params, "mid_b", _block(params, "mid_a", h))
    for lvl in reversed(range(cfg.depth)):
        h = T.relu(T.transpose_conv2d(h, params[f"up{lvl}_w"], params[f"up{lvl}_b"], 2, 0))
        skip = skips[lvl]
        if lvl in zero_skips:
            skip = Tensor(np.zeros_like(skip.data))
        h = T.concat_channels(h, skip)
        h = _block(params, f"dec{lvl}_b", _block(params, f"dec{lvl}_a", h))
    return T.conv2d(h, params["head_w"], params["head_b"], 1, 0)
