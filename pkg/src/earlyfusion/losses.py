"""Training objectives and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

DICE_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.1

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")


def _as_const(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def dice_loss(logits: Tensor, target) -> Tensor:
    """Soft Dice on ``sigmoid(logits)``, one value per image, averaged over the batch.

    ``1 - (2 * sum(p * g) + eps) / (sum(p) + sum(g) + eps)``
    """
    target = _as_const(target, logits.dtype)
    if logits.shape != target.shape or len(logits.shape) != 4:
        raise ShapeError(f"dice_loss: logits {list(logits.shape)} vs target {list(target.shape)}")
    p = T.sigmoid(logits)
    axes = (1, 2, 3)
    inter = T.sum_(T.mul(p, target), axis=axes)
    denom = T.add(T.sum_(p, axis=axes), T.sum_(target, axis=axes))
    ratio = T.div(T.add(T.mul(inter, 2.0), DICE_EPS), T.add(denom, DICE_EPS))
    return T.mean(1.0 - ratio)


def roi_target(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``image * mask`` with the single-channel mask broadcast over channels."""
    return image * mask


def l1_roi_loss(pseudo: Tensor, image, mask) -> Tensor:
    """Mean absolute difference between the pseudo image and the masked real image."""
    image = image.data if isinstance(image, Tensor) else np.asarray(image)
    mask = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if image.shape != pseudo.shape:
        raise ShapeError(f"l1_roi_loss: pseudo {list(pseudo.shape)} vs image {list(image.shape)}")
    if mask.ndim != 4 or mask.shape[1] != 1 or (mask.shape[0], *mask.shape[2:]) != (image.shape[0], *image.shape[2:]):
        raise ShapeError(f"l1_roi_loss: mask {list(mask.shape)} does not match image {list(image.shape)}")
    real = Tensor(roi_target(image, mask).astype(pseudo.dtype))
    return T.mean(T.abs_(T.sub(pseudo, real)))


def total_loss(dice: Tensor, l1: Tensor, w: LossWeights = LossWeights()) -> Tensor:
    return T.add(dice, T.mul(l1, w.lam))


# ---------------------------------------------------------------------------
# metrics on binary masks


def _binary_pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred.data if isinstance(pred, Tensor) else pred).astype(bool)
    g = np.asarray(target.data if isinstance(target, Tensor) else target).astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"metric: prediction {list(p.shape)} vs target {list(g.shape)}")
    return p, g


def dice_metric(pred, target) -> float:
    p, g = _binary_pair(pred, target)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def iou_metric(pred, target) -> float:
    """Foreground IoU of one mask pair (1.0 when both are empty)."""
    p, g = _binary_pair(pred, target)
    union = int(np.logical_or(p, g).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(p, g).sum()) / union


def miou_metric(preds, targets) -> float:
    """Mean per-image foreground IoU over paired sequences of masks."""
    preds, targets = list(preds), list(targets)
    if len(preds) != len(targets):
        raise ShapeError("miou_metric: prediction and target counts differ")
    if not preds:
        raise ValueError("miou_metric needs at least one mask pair")
    return float(np.mean([iou_metric(p, g) for p, g in zip(preds, targets)]))


def threshold(probs: np.ndarray, level: float = 0.5) -> np.ndarray:
    return (np.asarray(probs) > level).astype(np.uint8)
