"""Parameter containers and initialisation shared by the generator and UNet."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

Params = dict[str, Tensor]


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: float) -> Tensor:
    # ReLU gain: bound = sqrt(2) * sqrt(3 / fan_in)
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def param_count(params: Params) -> int:
    return sum(p.size for p in params.values())


def cast_params(params: Params, dtype) -> Params:
    """Return the same parameters in ``dtype`` (new leaves, grads cleared)."""
    return {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in params.items()}


def grad_norm(params: Params) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))
