"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable primitive goes through :func:`apply`.  When any input
requires a gradient and a :class:`Tape` is active on the current thread, the
application is appended to that tape together with its local backward rule.
``Tape.backward`` then walks the entries in reverse order.

Broadcasting is limited to scalar-vs-tensor; row/column expansions are
expressed with ``matmul`` against ones vectors instead.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "apply",
    "backward",
    "finite_diff_grad",
    "set_default_dtype",
    "get_default_dtype",
    "matmul",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "relu",
    "exp",
    "log",
    "sum",
    "mean",
    "clamp",
]

_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the working precision (``float64`` or ``float32``)."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DTYPE = dtype


def get_default_dtype():
    return _DTYPE


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested primitive."""


class Tensor:
    """A row-major value buffer with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Entry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    rule: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive applications on one thread.

    Used as a context manager; entering pushes the tape onto the calling
    thread's stack so that subsequent primitive calls record onto it.
    """

    def __init__(self):
        self.entries: list[_Entry] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, entry: _Entry) -> None:
        self.entries.append(entry)
        self._produced.add(id(entry.output))

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Propagate d(loss) back to every leaf that requires a gradient.

        Returns a map from leaf tensor to its gradient array and also stores
        that array in ``leaf.grad``.  Leaves listed in ``wrt`` that the loss
        does not depend on receive zeros.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for entry in reversed(self.entries):
            g_out = grads.pop(id(entry.output), None)
            if g_out is None:
                continue
            for inp, g in zip(entry.inputs, entry.rule(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if key not in self._produced:
                    leaves[key] = inp
        if id(loss) not in self._produced and loss.requires_grad:
            leaves[id(loss)] = loss
        out: dict[Tensor, np.ndarray] = {}
        for key, leaf in leaves.items():
            leaf.grad = grads[key]
            out[leaf] = leaf.grad
        for leaf in wrt or ():
            if leaf not in out:
                leaf.grad = np.zeros_like(leaf.data)
                out[leaf] = leaf.grad
        return out


def backward(loss: Tensor, tape: Tape | None = None, wrt: Sequence[Tensor] | None = None):
    """Backpropagate through ``tape`` (default: the innermost active tape)."""
    tape = tape or _active_tape()
    if tape is None:
        raise RuntimeError("no active tape; run the forward pass inside `with Tape():`")
    return tape.backward(loss, wrt)


# ---------------------------------------------------------------------------
# primitives


def _same_or_scalar(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, like: Tensor) -> np.ndarray:
    if g.shape == like.shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(like.shape)


def _fwd_matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data
    return out, lambda g: (g @ b.data.T, a.data.T @ g)


def _fwd_add(a, b):
    _same_or_scalar("add", a, b)
    return a.data + b.data, lambda g: (_reduce_to(g, a), _reduce_to(g, b))


def _fwd_sub(a, b):
    _same_or_scalar("sub", a, b)
    return a.data - b.data, lambda g: (_reduce_to(g, a), _reduce_to(-g, b))


def _fwd_mul(a, b):
    _same_or_scalar("mul", a, b)
    return a.data * b.data, lambda g: (_reduce_to(g * b.data, a), _reduce_to(g * a.data, b))


def _fwd_scalar_mul(a, *, c):
    c = float(c)
    return a.data * c, lambda g: (g * c,)


def _fwd_relu(a):
    mask = a.data > 0
    return np.where(mask, a.data, 0.0).astype(a.data.dtype), lambda g: (g * mask,)


def _fwd_exp(a):
    out = np.exp(a.data)
    return out, lambda g: (g * out,)


def _fwd_log(a):
    return np.log(a.data), lambda g: (g / a.data,)


def _fwd_sum(a):
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)
    return out, lambda g: (np.full_like(a.data, g),)


def _fwd_mean(a):
    n = a.data.size
    out = np.asarray(a.data.sum() / n, dtype=a.data.dtype)
    return out, lambda g: (np.full_like(a.data, g / n),)


def _fwd_clamp(a, *, lo=None, hi=None):
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return out, lambda g: (g * inside,)


_PRIMITIVES = {
    "matmul": _fwd_matmul,
    "add": _fwd_add,
    "sub": _fwd_sub,
    "mul": _fwd_mul,
    "scalar_mul": _fwd_scalar_mul,
    "relu": _fwd_relu,
    "exp": _fwd_exp,
    "log": _fwd_log,
    "sum": _fwd_sum,
    "mean": _fwd_mean,
    "clamp": _fwd_clamp,
}


def apply(op: str, *inputs, **attrs) -> Tensor:
    """Evaluate primitive ``op`` and record it when a gradient is needed."""
    try:
        fwd = _PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    inputs = tuple(_as_tensor(x) for x in inputs)
    value, rule = fwd(*inputs, **attrs)
    needs_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape() if needs_grad else None
    out = Tensor(value, requires_grad=tape is not None)
    if tape is not None:
        tape.record(_Entry(op, inputs, out, rule))
    return out


def matmul(a, b):
    return apply("matmul", a, b)


def add(a, b):
    return apply("add", a, b)


def sub(a, b):
    return apply("sub", a, b)


def mul(a, b):
    return apply("mul", a, b)


def scalar_mul(a, c):
    return apply("scalar_mul", a, c=c)


def relu(a):
    return apply("relu", a)


def exp(a):
    return apply("exp", a)


def log(a):
    return apply("log", a)


def sum(a):  # noqa: A001 - mirrors the primitive name
    return apply("sum", a)


def mean(a):
    return apply("mean", a)


def clamp(a, lo=None, hi=None):
    return apply("clamp", a, lo=lo, hi=hi)


# ---------------------------------------------------------------------------
# verification oracle


def finite_diff_grad(f: Callable[[list[np.ndarray]], float], params, h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of scalar ``f`` at ``params``.

    ``params`` is a sequence of arrays (or anything exposing ``arrays()``);
    ``f`` receives a list of perturbed copies and must be deterministic.
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    if hasattr(params, "arrays"):
        params = params.arrays()
    base = [np.array(p, dtype=np.float64, copy=True) for p in params]
    grads = []
    for i, p in enumerate(base):
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            f_plus = float(f(base))
            flat[j] = orig - h
            f_minus = float(f(base))
            flat[j] = orig
            gflat[j] = (f_plus - f_minus) / (2 * h)
        grads.append(g)
    return grads
