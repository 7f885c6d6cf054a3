"""Randomised finite-difference verification of every primitive and objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as L
from . import tensor as T
from .model import MlpSpec, NetworkParams, as_leaves, forward, init_mlp
from .tensor import Tape, Tensor, finite_diff_grad

__all__ = ["CheckResult", "relative_error", "check_function", "run_gradcheck", "PRIMITIVE_CHECKS", "LOSS_CHECKS"]

REL_FLOOR = 1e-6


def relative_error(analytic, numeric, floor: float = REL_FLOOR) -> float:
    """Max over coordinates of ``|a - n| / max(|a|, |n|, floor)``."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.asarray(a, dtype=np.float64).reshape(-1)
        n = np.asarray(n, dtype=np.float64).reshape(-1)
        if a.size:
            denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


@dataclass
class CheckResult:
    name: str
    trials: int
    max_rel_err: float

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def check_function(build: Callable[[list[Tensor]], Tensor], arrays: list[np.ndarray], h: float = 1e-5) -> float:
    """Compare tape gradients of ``build`` against central differences."""
    with Tape() as tape:
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        loss = build(leaves)
        grads = tape.backward(loss, wrt=leaves)
    analytic = [grads[leaf] for leaf in leaves]
    numeric = finite_diff_grad(lambda ps: build([Tensor(p) for p in ps]).item(), arrays, h)
    return relative_error(analytic, numeric)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return T.sum(T.mul(out, Tensor(w)))


def _away_from(x: np.ndarray, points, margin: float) -> np.ndarray:
    for p in points:
        close = np.abs(x - p) < margin
        x = np.where(close, p + np.sign(x - p + 1e-300) * margin * 2, x)
    return x


# each instance generator returns (build, arrays)
def _prim_matmul(rng):
    n, k, m = rng.integers(1, 5, size=3)
    w = rng.normal(size=(n, m))
    return (lambda t: _weighted(T.matmul(t[0], t[1]), w)), [rng.normal(size=(n, k)), rng.normal(size=(k, m))]


def _binary(op):
    def gen(rng):
        shape = tuple(rng.integers(1, 5, size=2))
        w = rng.normal(size=shape)
        scalar_rhs = rng.random() < 0.3
        b = rng.normal(size=()) if scalar_rhs else rng.normal(size=shape)
        return (lambda t: _weighted(op(t[0], t[1]), w)), [rng.normal(size=shape), b]

    return gen


def _unary(op, sample):
    def gen(rng):
        shape = tuple(rng.integers(1, 5, size=2))
        w = rng.normal(size=shape)
        return (lambda t: _weighted(op(t[0]), w)), [sample(rng, shape)]

    return gen


def _prim_scalar_mul(rng):
    shape = tuple(rng.integers(1, 5, size=2))
    c, w = rng.normal(), rng.normal(size=shape)
    return (lambda t: _weighted(T.scalar_mul(t[0], c), w)), [rng.normal(size=shape)]


def _prim_reduce(op):
    def gen(rng):
        shape = tuple(rng.integers(1, 5, size=2))
        c = rng.normal()
        return (lambda t: T.scalar_mul(op(T.mul(t[0], t[0])), c)), [rng.normal(size=shape)]

    return gen


PRIMITIVE_CHECKS = {
    "matmul": _prim_matmul,
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "scalar_mul": _prim_scalar_mul,
    "relu": _unary(T.relu, lambda r, s: _away_from(r.normal(size=s), [0.0], 1e-3)),
    "exp": _unary(T.exp, lambda r, s: r.normal(size=s)),
    "log": _unary(T.log, lambda r, s: r.uniform(0.1, 3.0, size=s)),
    "sum": _prim_reduce(T.sum),
    "mean": _prim_reduce(T.mean),
    "clamp": _unary(lambda a: T.clamp(a, -0.5, 0.7), lambda r, s: _away_from(r.normal(size=s), [-0.5, 0.7], 1e-3)),
}


def _rand_probs(rng, n, m):
    return L.softmax_np(rng.normal(scale=2.0, size=(n, m)))


def _loss_instance(rng, kind):
    n, m = int(rng.integers(1, 6)), int(rng.integers(2, 6))
    y = rng.integers(0, m, size=n)
    red = "sum" if rng.random() < 0.25 else "mean"
    z = rng.normal(scale=2.0, size=(n, m))
    if kind == "cross_entropy":
        build = lambda t: L.cross_entropy(L.softmax_probs(t[0]), y, red)
    elif kind == "kl_div":
        teacher = _rand_probs(rng, n, m)
        build = lambda t: L.kl_div(teacher, L.softmax_probs(t[0]), red)
    elif kind.startswith("dml_k"):
        k_members = int(kind[-1])
        peers = [_rand_probs(rng, n, m) for _ in range(k_members)]
        k = int(rng.integers(0, k_members))

        def build(t):
            probs = list(peers)
            probs[k] = L.softmax_probs(t[0])
            return L.dml_objective(k, probs, y, red)

    elif kind.startswith("dml_e"):
        agg = kind.split(":")[1]
        k_members = int(rng.integers(2, 5))
        peer_logits = [rng.normal(scale=2.0, size=(n, m)) for _ in range(k_members)]
        peers = [L.softmax_np(zl) for zl in peer_logits]
        k = int(rng.integers(0, k_members))

        def build(t):
            probs = list(peers)
            probs[k] = L.softmax_probs(t[0])
            logits = list(peer_logits)
            logits[k] = t[0].data
            return L.dml_e_objective(k, probs, y, agg, logits, red)

    elif kind.startswith("distill"):
        temp = float(kind.split(":")[1])
        teacher = L.softmax_np(rng.normal(scale=2.0, size=(n, m)), temp)
        build = lambda t: L.distill_objective(t[0], teacher, y, temp, red)
    else:
        raise KeyError(kind)
    return build, [z]


def _min_preactivation(params: NetworkParams, x: np.ndarray) -> float:
    h = x
    worst = np.inf
    for i, (w, b) in enumerate(params.layers):
        h = h @ w + b
        if i < len(params.layers) - 1:
            worst = min(worst, float(np.min(np.abs(h))))
            h = np.maximum(h, 0)
    return worst


LOSS_CHECKS = {
    "cross_entropy": lambda r: _loss_instance(r, "cross_entropy"),
    "kl_div": lambda r: _loss_instance(r, "kl_div"),
    "dml_k2": lambda r: _loss_instance(r, "dml_k2"),
    "dml_k3": lambda r: _loss_instance(r, "dml_k3"),
    "dml_k4": lambda r: _loss_instance(r, "dml_k4"),
    "dml_e_prob_mean": lambda r: _loss_instance(r, "dml_e:prob_mean"),
    "dml_e_logit_mean": lambda r: _loss_instance(r, "dml_e:logit_mean"),
    "distill_t1": lambda r: _loss_instance(r, "distill:1"),
    "distill_t3": lambda r: _loss_instance(r, "distill:3"),
}


def run_gradcheck(seed: int = 0, trials: int = 100, h: float = 1e-5, include_mlp: bool = True) -> list[CheckResult]:
    """Run every check ``trials`` times; returns the worst error per check."""
    checks = {**{f"prim:{k}": v for k, v in PRIMITIVE_CHECKS.items()}, **{f"loss:{k}": v for k, v in LOSS_CHECKS.items()}}
    results = []
    for ci, (name, gen) in enumerate(sorted(checks.items())):
        rng = np.random.default_rng([seed, ci])
        worst = 0.0
        for _ in range(trials):
            build, arrays = gen(rng)
            worst = max(worst, check_function(build, arrays, h))
        results.append(CheckResult(name, trials, worst))
    if include_mlp:
        rng = np.random.default_rng([seed, len(checks)])
        worst = 0.0
        for _ in range(trials):
            worst = max(worst, _check_mlp(rng, h))
        results.append(CheckResult("model:mlp_dml", trials, worst))
    return results


def _check_mlp(rng, h: float) -> float:
    for _ in range(100):
        d, m, n = int(rng.integers(2, 4)), int(rng.integers(2, 4)), 4
        spec = MlpSpec(d, (int(rng.integers(2, 5)), int(rng.integers(2, 5))), m, int(rng.integers(0, 2**31)))
        params = init_mlp(spec)
        x = rng.normal(size=(n, d))
        if _min_preactivation(params, x) > 1e-3:
            break
    y = rng.integers(0, m, size=n)
    peer = _rand_probs(rng, n, m)

    def loss_of(p: NetworkParams, leaves=None) -> Tensor:
        probs = L.softmax_probs(forward(leaves if leaves is not None else p, x))
        return L.dml_objective(0, [probs, peer], y)

    with Tape() as tape:
        leaves = as_leaves(params)
        grads = tape.backward(loss_of(params, leaves), wrt=leaves)
    analytic = [grads[leaf] for leaf in leaves]
    numeric = finite_diff_grad(lambda arrs: loss_of(NetworkParams.from_arrays(arrs)).item(), params, h)
    return relative_error(analytic, numeric)
