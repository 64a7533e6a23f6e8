"""Adam with decoupled weight decay and global-norm gradient clipping."""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from . import kernels
from .errors import ContractError
from .tensor import Parameter

# Training-schedule defaults shared by the optimizer and the train loop.
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-6
WEIGHT_DECAY = 0.01
CLIP_NORM = 1.0


def global_grad_norm(params: Iterable[Parameter]) -> float:
    total = 0.0
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name!r} has no gradient")
        total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_gradients_(params: list[Parameter], clip_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most clip_norm.

    Returns the pre-clip norm.
    """
    norm = global_grad_norm(params)
    if clip_norm and norm > clip_norm:
        scale = clip_norm / norm
        for p in params:
            p.grad = p.grad * scale  # grads may alias shared buffers; no in-place
    return norm


def adam_step(
    params: list[Parameter],
    learning_rate: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    epsilon: float = ADAM_EPS,
    weight_decay: float = WEIGHT_DECAY,
    clip_norm: float = CLIP_NORM,
    t: int = 1,
) -> float:
    """Clip gradients globally, then apply one bias-corrected Adam update.

    Weight decay is decoupled: applied directly to the weights, scaled by the
    learning rate, outside the adaptive update. `t` is the 1-based step used
    for bias correction. Returns the pre-clip gradient norm.
    """
    if learning_rate < 0 or beta1 <= 0 or beta2 <= 0 or epsilon <= 0 or t < 1:
        raise ContractError("adam_step hyperparameters out of range")
    norm = clip_gradients_(params, clip_norm)
    for p in params:
        kernels.adam_update(
            p.data, p.grad, p.m1, p.m2, learning_rate, beta1, beta2, epsilon, weight_decay, t
        )
    return norm
