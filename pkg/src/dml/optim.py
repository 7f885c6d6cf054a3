"""SGD with Nesterov momentum, Adam, and the step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import NetworkParams
from .tensor import ShapeError

__all__ = ["Schedule", "OptimizerState", "lr_at", "sgd_nesterov_step", "adam_step", "optimizer_step"]


@dataclass(frozen=True)
class Schedule:
    drop_every: int = 60
    factor: float = 0.1


def lr_at(schedule: Schedule, base_lr: float, epoch: int) -> float:
    """``base_lr * factor ** floor(epoch / drop_every)``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if schedule.drop_every <= 0:
        return base_lr
    return base_lr * schedule.factor ** (epoch // schedule.drop_every)


@dataclass
class OptimizerState:
    kind: str = "sgd_nesterov"
    lr: float = 0.1
    momentum: float = 0.9
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    buffers: dict[str, list[np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd_nesterov", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def _check(params: NetworkParams, grads) -> list[np.ndarray]:
    arrays = params.arrays()
    grads = [np.asarray(g).reshape(a.shape) if np.size(g) == a.size else g for a, g in zip(arrays, grads)]
    if len(grads) != len(arrays) or any(np.shape(g) != a.shape for a, g in zip(arrays, grads)):
        raise ShapeError(
            f"gradient shapes {[np.shape(g) for g in grads]} do not match parameter shapes {[a.shape for a in arrays]}"
        )
    return grads


def _buffers(state: OptimizerState, name: str, arrays) -> list[np.ndarray]:
    buf = state.buffers.get(name)
    if buf is None:
        buf = state.buffers[name] = [np.zeros_like(a) for a in arrays]
    elif [b.shape for b in buf] != [a.shape for a in arrays]:
        raise ShapeError(f"optimizer buffer '{name}' does not match parameter shapes")
    return buf


def sgd_nesterov_step(state: OptimizerState, params: NetworkParams, grads) -> NetworkParams:
    """``v <- mu*v + g``; ``theta <- theta - lr*(g + mu*v)``."""
    grads = _check(params, grads)
    arrays = params.arrays()
    if state.weight_decay:
        grads = [g + state.weight_decay * a for g, a in zip(grads, arrays)]
    vel = _buffers(state, "velocity", arrays)
    mu, lr = state.momentum, state.lr
    out = []
    for i, (a, g) in enumerate(zip(arrays, grads)):
        vel[i] = mu * vel[i] + g
        out.append(a - lr * (g + mu * vel[i]))
    state.t += 1
    return NetworkParams.from_arrays(out)


def adam_step(state: OptimizerState, params: NetworkParams, grads) -> NetworkParams:
    """Bias-corrected Adam."""
    grads = _check(params, grads)
    arrays = params.arrays()
    if state.weight_decay:
        grads = [g + state.weight_decay * a for g, a in zip(grads, arrays)]
    m = _buffers(state, "m", arrays)
    v = _buffers(state, "v", arrays)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    out = []
    for i, (a, g) in enumerate(zip(arrays, grads)):
        m[i] = b1 * m[i] + (1.0 - b1) * g
        v[i] = b2 * v[i] + (1.0 - b2) * g * g
        m_hat = m[i] / c1
        v_hat = v[i] / c2
        out.append(a - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return NetworkParams.from_arrays(out)


def optimizer_step(state: OptimizerState, params: NetworkParams, grads) -> NetworkParams:
    if state.kind == "adam":
        return adam_step(state, params, grads)
    return sgd_nesterov_step(state, params, grads)

