"""MLP classifiers used as cohort members."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

__all__ = [
    "MlpSpec",
    "NetworkParams",
    "init_mlp",
    "forward",
    "predict_logits",
    "perturb",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "CheckpointMagicError",
    "CheckpointVersionError",
    "CheckpointTruncatedError",
    "CheckpointChecksumError",
    "CheckpointShapeError",
]


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"hidden widths must be positive, got {list(self.hidden_dims)}")
        if self.init_seed < 0:
            raise ValueError("init_seed must be unsigned")

    @property
    def widths(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.num_classes]


@dataclass(frozen=True)
class NetworkParams:
    """Per-layer ``(weight, bias)`` pairs, ordered input to output.

    Weights have shape ``(fan_in, fan_out)`` and biases ``(fan_out,)``.
    Treat instances as immutable snapshots; updates build new objects.
    """

    layers: tuple[tuple[np.ndarray, np.ndarray], ...] = field(default=())

    def __post_init__(self):
        layers = tuple((np.asarray(w), np.asarray(b)) for w, b in self.layers)
        for i, (w, b) in enumerate(layers):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and layers[i - 1][0].shape[1] != w.shape[0]:
                raise ShapeError(
                    f"layer {i} expects input width {w.shape[0]}, "
                    f"previous layer emits {layers[i - 1][0].shape[1]}"
                )
        object.__setattr__(self, "layers", layers)

    @classmethod
    def from_arrays(cls, arrays) -> "NetworkParams":
        arrays = list(arrays)
        return cls(tuple((arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)))

    def arrays(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer]

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def num_classes(self) -> int:
        return self.layers[-1][0].shape[1]

    @property
    def widths(self) -> list[int]:
        return [self.input_dim] + [w.shape[1] for w, _ in self.layers]

    @property
    def num_parameters(self) -> int:
        return int(np.sum([a.size for a in self.arrays()]))

    def equals(self, other: "NetworkParams") -> bool:
        """Bitwise equality of every weight and bias."""
        a, b = self.arrays(), other.arrays()
        return len(a) == len(b) and all(
            x.shape == y.shape and x.tobytes() == y.tobytes() for x, y in zip(a, b)
        )

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams.from_arrays(a.astype(dtype) for a in self.arrays())


def init_mlp(spec: MlpSpec) -> NetworkParams:
    """He-normal weights (std ``sqrt(2 / fan_in)``) and zero biases."""
    rng = np.random.default_rng(spec.init_seed)
    widths = spec.widths
    dtype = T.get_default_dtype()
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)).astype(dtype)
        layers.append((w, np.zeros(fan_out, dtype=dtype)))
    return NetworkParams(tuple(layers))


def as_leaves(params: NetworkParams) -> list[Tensor]:
    """Gradient-tracking leaf tensors; biases are stored as ``(1, fan_out)`` rows."""
    leaves = []
    for w, b in params.layers:
        leaves.append(Tensor(w, requires_grad=True))
        leaves.append(Tensor(b.reshape(1, -1), requires_grad=True))
    return leaves


def forward(params, batch) -> Tensor:
    """Logits of an affine/ReLU stack applied to each row of ``batch``.

    ``params`` is either :class:`NetworkParams` (constant weights) or the
    list returned by :func:`as_leaves` (weights recorded on the active tape).
    """
    if isinstance(params, NetworkParams):
        tensors = [Tensor(w) if i % 2 == 0 else Tensor(w.reshape(1, -1)) for i, w in enumerate(params.arrays())]
    else:
        tensors = list(params)
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.data.ndim != 2 or x.shape[1] != tensors[0].shape[0]:
        raise ShapeError(f"forward: batch shape {x.shape} does not match input_dim {tensors[0].shape[0]}")
    ones = Tensor(np.ones((x.shape[0], 1)))
    n_layers = len(tensors) // 2
    for i in range(n_layers):
        w, b = tensors[2 * i], tensors[2 * i + 1]
        x = T.add(T.matmul(x, w), T.matmul(ones, b))
        if i < n_layers - 1:
            x = T.relu(x)
    return x


def predict_logits(params: NetworkParams, features: np.ndarray) -> np.ndarray:
    """Logits as a plain array (no tape)."""
    return forward(params, features).data


def perturb(params: NetworkParams, sigma: float, noise_seed: int, relative: bool = False) -> NetworkParams:
    """Add i.i.d. ``N(0, sigma^2)`` noise to every weight and bias.

    With ``relative=True`` the noise std of each layer's weights and biases
    is ``sigma`` times that layer's weight standard deviation.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return NetworkParams.from_arrays(a.copy() for a in params.arrays())
    rng = np.random.default_rng(noise_seed)
    out = []
    for w, b in params.layers:
        scale = sigma * (float(np.std(w)) if relative else 1.0)
        out.append((w + rng.normal(0.0, scale, size=w.shape), b + rng.normal(0.0, scale, size=b.shape)))
    return NetworkParams(tuple(out))


# ---------------------------------------------------------------------------
# checkpoints: "DMLC" | u8 version | u32 layers | per layer (u32 rows, u32 cols,
# f64 weights, f64 biases) | u32 crc32 -- all little-endian

CKPT_MAGIC = b"DMLC"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError, ShapeError):
    pass


def save_checkpoint(params: NetworkParams) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<BI", CKPT_VERSION, len(params.layers))]
    for w, b in params.layers:
        rows, cols = w.shape
        parts.append(struct.pack("<II", rows, cols))
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def load_checkpoint(blob: bytes, spec: MlpSpec | None = None) -> NetworkParams:
    """Parse a checkpoint; with ``spec``, also check the layer widths."""
    blob = bytes(blob)
    if len(blob) < 4:
        raise CheckpointTruncatedError(f"checkpoint is {len(blob)} bytes, too short for a header")
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointMagicError(f"bad checkpoint magic {blob[:4]!r}")
    if len(blob) < 9:
        raise CheckpointTruncatedError("checkpoint header truncated")
    version, n_layers = struct.unpack_from("<BI", blob, 4)
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {CKPT_VERSION}")
    off = 9
    layers = []
    for i in range(n_layers):
        if off + 8 > len(blob):
            raise CheckpointTruncatedError(f"layer {i} header truncated")
        rows, cols = struct.unpack_from("<II", blob, off)
        off += 8
        need = 8 * (rows * cols + cols)
        if off + need > len(blob):
            raise CheckpointTruncatedError(f"layer {i} payload truncated")
        w = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols)
        off += 8 * rows * cols
        b = np.frombuffer(blob, dtype="<f8", count=cols, offset=off)
        off += 8 * cols
        layers.append((w.astype(np.float64), b.astype(np.float64)))
    if off + 4 > len(blob):
        raise CheckpointTruncatedError("checksum missing")
    if off + 4 != len(blob):
        raise CheckpointTruncatedError(f"{len(blob) - off - 4} unexpected trailing bytes")
    (crc,) = struct.unpack_from("<I", blob, off)
    if crc != zlib.crc32(blob[:off]):
        raise CheckpointChecksumError("checkpoint CRC32 mismatch")
    params = NetworkParams(tuple(layers))
    if spec is not None and params.widths != spec.widths:
        raise CheckpointShapeError(f"checkpoint widths {params.widths} do not match spec widths {spec.widths}")
    return params
