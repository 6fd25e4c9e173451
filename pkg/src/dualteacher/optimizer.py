"""AdamW with decoupled weight decay and a per-stage cosine schedule."""
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidParameterError, NumericError, ShapeError
from .model import EncoderParams

# learning rate for fine-tuning a large pre-trained encoder; the small
# synthetic encoder needs a much larger one (see configs/standard.ini)
LARGE_MODEL_BASE_LR = 1e-5
DEFAULT_WEIGHT_DECAY = 5e-4


@dataclass(frozen=True)
class ScheduleSpec:
    base_lr: float
    total_steps: int

    def __post_init__(self):
        if not self.base_lr > 0:
            raise InvalidParameterError(f"base_lr must be positive, got {self.base_lr}")
        if self.total_steps < 1:
            raise InvalidParameterError(f"total_steps must be >= 1, got {self.total_steps}")


def cosine_lr(step, spec: ScheduleSpec) -> float:
    if not 0 <= step <= spec.total_steps:
        raise IndexError(f"step {step} outside [0, {spec.total_steps}]")
    # rounding in pi * step / total_steps can leave cos() a few ulps off 0 at the midpoint
    if 2 * step == spec.total_steps:
        return spec.base_lr / 2
    if step == spec.total_steps:
        return 0.0
    return spec.base_lr * (1.0 + math.cos(math.pi * step / spec.total_steps)) / 2.0


@dataclass(frozen=True, eq=False)
class OptimizerState:
    m: EncoderParams
    v: EncoderParams
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = DEFAULT_WEIGHT_DECAY

    @classmethod
    def zeros(cls, params: EncoderParams, **hyper):
        z = params.zeros_like()
        return cls(z, z, 0, **hyper)


def adamw_step(state: OptimizerState, params: EncoderParams, grad: EncoderParams, lr):
    """One decoupled-decay Adam update; returns (new_params, new_state)."""
    try:
        params.check_same_shape(grad)
        params.check_same_shape(state.m)
    except ShapeError:
        raise ShapeError("params, grad and optimizer moments must share shapes") from None
    if not grad.is_finite():
        raise NumericError("non-finite gradient entry")
    if lr < 0:
        raise InvalidParameterError(f"learning rate must be nonnegative, got {lr}")
    b1, b2, eps, wd = state.beta1, state.beta2, state.eps, state.weight_decay
    t = state.step_count + 1
    m = state.m.map(lambda m_, g: b1 * m_ + (1.0 - b1) * g, grad)
    v = state.v.map(lambda v_, g: b2 * v_ + (1.0 - b2) * (g * g), grad)
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t

    def update(theta, m_, v_):
        return theta - lr * ((m_ / c1) / (np.sqrt(v_ / c2) + eps) + wd * theta)

    new_params = params.map(update, m, v)
    return new_params, replace(state, m=m, v=v, step_count=t)
