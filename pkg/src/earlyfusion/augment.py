"""Early fusion and joint spatial augmentation.

Coordinates are normalised to ``[-1, 1]`` with x to the right and y down;
pixel ``j`` of a width-``W`` row has its centre at ``(2j + 1) / W - 1``.

An :class:`AugParams` becomes a 2x3 matrix ``[A | c]`` that maps an *output*
location ``p`` to the *input* location it samples::

    input = F @ R(angle) @ (p - t) / scale
    A = F @ R(angle) / scale,   c = -A @ t,   t = (2 * tx, 2 * ty)

with ``R(a) = [[cos a, -sin a], [sin a, cos a]]`` and ``F = diag(+-1, +-1)``
for the flips. Visible effect on content: shifted by ``(tx * W, ty * H)``
pixels, magnified by ``scale``, mirrored by the flips. Under ``R``, the
output point ``(1, 0)`` samples input ``(0, 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor, make_node

TRANSFORMS = frozenset({"rotate", "translate", "scale", "hflip", "vflip"})


@dataclass(frozen=True)
class AugRanges:
    max_angle: float = 15.0
    max_shift: float = 0.10
    min_scale: float = 0.9
    max_scale: float = 1.1
    flip_prob: float = 0.5


@dataclass(frozen=True)
class AugParams:
    angle: float = 0.0  # degrees
    tx: float = 0.0  # fraction of width
    ty: float = 0.0  # fraction of height
    scale: float = 1.0
    hflip: bool = False
    vflip: bool = False

    @classmethod
    def identity(cls) -> "AugParams":
        return cls()

    def is_identity(self) -> bool:
        return self == AugParams()


def sample_aug(rng: np.random.Generator, enable=TRANSFORMS, ranges: AugRanges = AugRanges()) -> AugParams:
    """Draw one augmentation.

    Exactly six draws are consumed per call whatever ``enable`` holds, so the
    stream stays aligned across configurations that share a seed.
    """
    unknown = set(enable) - TRANSFORMS
    if unknown:
        raise ValueError(f"unknown transforms {sorted(unknown)}")
    u = rng.random(6)
    angle = (2 * u[0] - 1) * ranges.max_angle
    tx = (2 * u[1] - 1) * ranges.max_shift
    ty = (2 * u[2] - 1) * ranges.max_shift
    scale = ranges.min_scale + u[3] * (ranges.max_scale - ranges.min_scale)
    return AugParams(
        angle=float(angle) if "rotate" in enable else 0.0,
        tx=float(tx) if "translate" in enable else 0.0,
        ty=float(ty) if "translate" in enable else 0.0,
        scale=float(scale) if "scale" in enable else 1.0,
        hflip=bool(u[4] < ranges.flip_prob) and "hflip" in enable,
        vflip=bool(u[5] < ranges.flip_prob) and "vflip" in enable,
    )


# ---------------------------------------------------------------------------
# affine matrices


def identity_matrix() -> np.ndarray:
    return np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def affine_matrix(p: AugParams) -> np.ndarray:
    a = np.deg2rad(p.angle)
    if p.angle == 0.0:
        cos, sin = 1.0, 0.0
    else:
        cos, sin = np.cos(a), np.sin(a)
    rot = np.array([[cos, -sin], [sin, cos]])
    flip = np.diag([-1.0 if p.hflip else 1.0, -1.0 if p.vflip else 1.0])
    lin = flip @ rot
    if p.scale != 1.0:
        lin = lin / p.scale
    t = np.array([2.0 * p.tx, 2.0 * p.ty])
    offset = -(lin @ t) if (p.tx or p.ty) else np.zeros(2)
    return np.hstack([lin, offset[:, None]]) + 0.0  # +0.0 turns -0.0 into 0.0


def _homogeneous(m: np.ndarray) -> np.ndarray:
    return np.vstack([m, [0.0, 0.0, 1.0]])


def compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix of ``p -> a(b(p))``."""
    return (_homogeneous(a) @ _homogeneous(b))[:2]


def invert(m: np.ndarray) -> np.ndarray:
    return np.linalg.inv(_homogeneous(m))[:2]


# ---------------------------------------------------------------------------
# grid sampling


@dataclass
class _Sampler:
    """Sparse gather for one sample: ``out[:, r] = sum_k w[k, r] * x[:, idx[k, r]]``."""

    idx: np.ndarray  # [taps, H*W] flat input indices (clipped)
    weight: np.ndarray  # [taps, H*W], zero where the tap falls outside
    size: int
    _t: sp.csr_matrix | None = field(default=None, repr=False)

    def apply(self, x: np.ndarray) -> np.ndarray:
        # x: [K, H*W]; fixed tap order keeps every channel bitwise independent
        out = self.weight[0] * x[:, self.idx[0]]
        for k in range(1, len(self.idx)):
            out = out + self.weight[k] * x[:, self.idx[k]]
        return out

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        if self._t is None:
            taps, n = self.idx.shape
            rows = np.tile(np.arange(n), taps)
            self._t = sp.csr_matrix(
                (self.weight.reshape(-1), (self.idx.reshape(-1), rows)), shape=(self.size, n)
            )
        return np.asarray(self._t @ g.T).T


def _source_coords(m: np.ndarray, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Input pixel coordinates sampled by every output pixel (row-major)."""
    # centred pixel units keep identity, flips and whole-pixel shifts exact
    u = np.arange(w) - (w - 1) / 2.0
    v = np.arange(h) - (h - 1) / 2.0
    uu, vv = np.meshgrid(u, v)
    ix = m[0, 0] * uu + (m[0, 1] * (w / h)) * vv + (m[0, 2] * (w / 2.0) + (w - 1) / 2.0)
    iy = (m[1, 0] * (h / w)) * uu + m[1, 1] * vv + (m[1, 2] * (h / 2.0) + (h - 1) / 2.0)
    return ix.reshape(-1), iy.reshape(-1)


def _make_sampler(m: np.ndarray, h: int, w: int, mode: str, dtype) -> _Sampler:
    ix, iy = _source_coords(m, h, w)
    if mode == "nearest":
        xs, ys = np.floor(ix + 0.5), np.floor(iy + 0.5)
        inside = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
        flat = np.where(inside, ys * w + xs, 0).astype(np.intp)
        return _Sampler(flat[None], inside.astype(dtype)[None], h * w)
    if mode != "bilinear":
        raise ValueError(f"unknown warp mode {mode!r}")
    x0, y0 = np.floor(ix), np.floor(iy)
    fx, fy = ix - x0, iy - y0
    idx, wts = [], []
    for dy, dx, wt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)), (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        xs, ys = x0 + dx, y0 + dy
        inside = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
        idx.append(np.where(inside, ys * w + xs, 0).astype(np.intp))
        wts.append(np.where(inside, wt, 0.0))
    return _Sampler(np.stack(idx), np.stack(wts).astype(dtype), h * w)


def warp(x: Tensor, m: np.ndarray, mode: str = "bilinear") -> Tensor:
    """Resample ``x`` [N, K, H, W] through affine matrix ``m``.

    ``m`` is one 2x3 matrix shared by the batch or an ``[N, 2, 3]`` stack.
    Reads outside the input return 0. All channels of a sample share one
    sampling grid. Differentiable with respect to ``x``.
    """
    if len(x.shape) != 4:
        raise ShapeError(f"warp expects [N,K,H,W], got {list(x.shape)}")
    n, k, h, w = x.shape
    m = np.asarray(m, dtype=np.float64)
    mats = np.broadcast_to(m, (n, 2, 3)) if m.shape == (2, 3) else m
    if mats.shape != (n, 2, 3):
        raise ShapeError(f"warp: expected matrices of shape [2,3] or [{n},2,3], got {list(m.shape)}")
    samplers = [_make_sampler(mats[i], h, w, mode, x.dtype) for i in range(n)]
    flat = x.data.reshape(n, k, h * w)
    out = np.stack([s.apply(flat[i]) for i, s in enumerate(samplers)]).reshape(x.shape)

    def bw(g):
        g = g.reshape(n, k, h * w)
        return (np.stack([s.adjoint(g[i]) for i, s in enumerate(samplers)]).reshape(x.shape).astype(g.dtype),)

    return make_node(out, (x,), bw, f"warp_{mode}")


# ---------------------------------------------------------------------------
# fusion


def fuse_concat(image: Tensor, pseudo: Tensor) -> Tensor:
    """Channel concatenation: image channels first, pseudo channels after."""
    if image.shape != pseudo.shape:
        raise ShapeError(f"fuse_concat: image {list(image.shape)} vs pseudo {list(pseudo.shape)}")
    return T.concat_channels(image, pseudo)


def _matrices(params, n: int) -> np.ndarray:
    if isinstance(params, AugParams):
        params = [params] * n
    if len(params) != n:
        raise ShapeError(f"got {len(params)} augmentations for a batch of {n}")
    return np.stack([affine_matrix(p) for p in params])


def augment_pair(fused: Tensor, mask: Tensor, params) -> tuple[Tensor, Tensor]:
    """Warp the fused tensor (bilinear) and mask (nearest) with the same matrix.

    ``params`` is one :class:`AugParams` or a list with one per sample.
    """
    if len(mask.shape) != 4 or mask.shape[1] != 1 or (mask.shape[0], *mask.shape[2:]) != (fused.shape[0], *fused.shape[2:]):
        raise ShapeError(f"augment_pair: fused {list(fused.shape)} vs mask {list(mask.shape)}")
    mats = _matrices(params, fused.shape[0])
    return warp(fused, mats, "bilinear"), warp(mask, mats, "nearest")


def augment_misaligned(fused: Tensor, mask: Tensor, params, image_channels: int) -> tuple[Tensor, Tensor]:
    """Failure mode of late text injection: image and mask move, pseudo channels stay."""
    if len(mask.shape) != 4 or mask.shape[1] != 1:
        raise ShapeError(f"augment_misaligned: bad mask shape {list(mask.shape)}")
    mats = _matrices(params, fused.shape[0])
    image = T.slice_channels(fused, 0, image_channels)
    pseudo = T.slice_channels(fused, image_channels, fused.shape[1])
    return T.concat_channels(warp(image, mats, "bilinear"), pseudo), warp(mask, mats, "nearest")
