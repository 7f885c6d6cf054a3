"""Objectives for supervised, mutual, ensemble-teacher and distillation training.

Every function takes the *trained* network's quantities as :class:`Tensor`
objects (so the result is differentiable) and peer/teacher quantities as
constants.  Peer probabilities are always detached: a member's loss never
sends gradient into another member.

Batch reduction defaults to the mean over samples; ``reduction="sum"``
gives the per-batch sum instead.  Logarithms are natural.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

__all__ = [
    "LOG_FLOOR",
    "validate_probs",
    "one_hot",
    "log_softmax",
    "softmax_probs",
    "softmax_np",
    "cross_entropy",
    "kl_div",
    "dml_objective",
    "dml_e_objective",
    "ensemble_teacher",
    "distill_objective",
]

LOG_FLOOR = 1e-12
_REDUCTIONS = ("mean", "sum")


def validate_probs(probs, atol: float = 1e-9) -> np.ndarray:
    """Check the posterior-matrix invariants and return the array."""
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise ShapeError(f"posterior matrix must be 2-D, got shape {p.shape}")
    if np.any(p < -atol) or np.any(p > 1 + atol):
        raise ValueError("posterior entries must lie in [0, 1]")
    dev = np.abs(p.sum(axis=1) - 1.0)
    if dev.size and dev.max() > atol:
        raise ValueError(f"posterior row sums deviate from 1 by {dev.max():.3g}")
    return p


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    out = np.zeros((labels.size, num_classes), dtype=T.get_default_dtype())
    out[np.arange(labels.size), labels] = 1.0
    return out


def _reduce(total: Tensor, n: int, reduction: str) -> Tensor:
    if reduction not in _REDUCTIONS:
        raise ValueError(f"reduction must be one of {_REDUCTIONS}, got {reduction!r}")
    return total if reduction == "sum" else T.scalar_mul(total, 1.0 / n)


def log_softmax(logits, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = logits if isinstance(logits, Tensor) else Tensor(logits)
    if z.data.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got shape {z.shape}")
    n, m = z.shape
    # the row max is a constant shift; the result is invariant to it
    shift = Tensor(np.repeat(z.data.max(axis=1, keepdims=True) / temperature, m, axis=1))
    scaled = T.sub(T.scalar_mul(z, 1.0 / temperature), shift)
    row_sums = T.matmul(T.exp(scaled), Tensor(np.ones((m, 1))))
    lse = T.matmul(T.log(row_sums), Tensor(np.ones((1, m))))
    return T.sub(scaled, lse)


def softmax_probs(logits, temperature: float = 1.0) -> Tensor:
    """Row-wise softmax of ``logits / temperature``."""
    return T.exp(log_softmax(logits, temperature))


def softmax_np(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    return softmax_probs(Tensor(logits), temperature).data


def _const(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=T.get_default_dtype())


def cross_entropy(probs, labels, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of the true class, floored at ``LOG_FLOOR``."""
    p = probs if isinstance(probs, Tensor) else Tensor(probs)
    if p.data.ndim != 2:
        raise ShapeError(f"cross_entropy: probs must be 2-D, got {p.shape}")
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != p.shape[0]:
        raise ShapeError(f"cross_entropy: {p.shape[0]} rows but {labels.shape[0]} labels")
    target = Tensor(one_hot(labels, p.shape[1]))
    picked = T.sum(T.mul(target, T.log(T.clamp(p, LOG_FLOOR))))
    return T.scalar_mul(_reduce(picked, p.shape[0], reduction), -1.0)


def kl_div(teacher, student, reduction: str = "mean") -> Tensor:
    """``sum_m teacher * ln(teacher / student)`` per row, teacher held constant."""
    t = _const(teacher)
    s = student if isinstance(student, Tensor) else Tensor(student)
    if t.shape != s.shape:
        raise ShapeError(f"kl_div: teacher shape {t.shape} differs from student shape {s.shape}")
    neg_entropy = float(np.sum(t * np.log(np.clip(t, LOG_FLOOR, None))))
    cross = T.sum(T.mul(Tensor(t), T.log(T.clamp(s, LOG_FLOOR))))
    total = T.sub(Tensor(neg_entropy), cross)
    return _reduce(total, t.shape[0], reduction)


def dml_objective(k: int, all_probs: Sequence, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of member ``k`` plus the mean KL from each peer to it."""
    n_members = len(all_probs)
    if n_members < 2:
        raise ValueError(f"mutual learning needs at least 2 members, got {n_members}")
    if not 0 <= k < n_members:
        raise IndexError(f"member index {k} out of range for {n_members} members")
    own = all_probs[k]
    loss = cross_entropy(own, labels, reduction)
    mimic = None
    for l, peer in enumerate(all_probs):
        if l == k:
            continue
        term = kl_div(_const(peer), own, reduction)
        mimic = term if mimic is None else T.add(mimic, term)
    return T.add(loss, T.scalar_mul(mimic, 1.0 / (n_members - 1)))


def ensemble_teacher(k: int, all_probs: Sequence, aggregation: str = "prob_mean", all_logits: Sequence | None = None) -> np.ndarray:
    """Posterior of the ensemble formed by every member except ``k``."""
    peers = [i for i in range(len(all_probs)) if i != k]
    if aggregation == "prob_mean":
        return np.mean([_const(all_probs[i]) for i in peers], axis=0)
    if aggregation == "logit_mean":
        if all_logits is None:
            raise ValueError("logit_mean aggregation requires all_logits")
        return softmax_np(np.mean([_const(all_logits[i]) for i in peers], axis=0))
    raise ValueError(f"unknown aggregation {aggregation!r}")


def dml_e_objective(
    k: int,
    all_probs: Sequence,
    labels,
    aggregation: str = "logit_mean",
    all_logits: Sequence | None = None,
    reduction: str = "mean",
) -> Tensor:
    """Cross-entropy plus KL from the peer-ensemble posterior to member ``k``."""
    if len(all_probs) < 2:
        raise ValueError(f"ensemble teaching needs at least 2 members, got {len(all_probs)}")
    if not 0 <= k < len(all_probs):
        raise IndexError(f"member index {k} out of range for {len(all_probs)} members")
    teacher = ensemble_teacher(k, all_probs, aggregation, all_logits)
    own = all_probs[k]
    return T.add(cross_entropy(own, labels, reduction), kl_div(teacher, own, reduction))


def distill_objective(student_logits, teacher_probs, labels, temperature: float = 1.0, reduction: str = "mean") -> Tensor:
    """Supervised loss at T=1 plus KL from fixed teacher targets at ``temperature``.

    No T^2 rescaling of the mimicry term is applied.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    hard = cross_entropy(softmax_probs(student_logits, 1.0), labels, reduction)
    soft = kl_div(_const(teacher_probs), softmax_probs(student_logits, temperature), reduction)
    return T.add(hard, soft)
