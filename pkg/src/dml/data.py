"""Synthetic datasets and IDX (MNIST-format) loading."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Dataset",
    "gen_synthetic",
    "load_idx",
    "dataset_from_spec",
    "DataError",
    "IdxMagicError",
    "IdxCountMismatchError",
    "IdxTruncatedError",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    pass


class IdxMagicError(DataError):
    pass


class IdxCountMismatchError(DataError):
    pass


class IdxTruncatedError(DataError):
    pass


@dataclass(frozen=True)
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    num_classes: int
    provenance: str = ""

    def __post_init__(self):
        for name in ("train_x", "train_y", "test_x", "test_y"):
            arr = getattr(self, name)
            arr.setflags(write=False)
        if self.train_x.shape[1] != self.test_x.shape[1]:
            raise DataError("train and test feature widths differ")
        if not (np.all(np.isfinite(self.train_x)) and np.all(np.isfinite(self.test_x))):
            raise DataError("features must be finite")
        for y in (self.train_y, self.test_y):
            if y.size and (y.min() < 0 or y.max() >= self.num_classes):
                raise DataError(f"label outside [0, {self.num_classes})")

    @property
    def input_dim(self) -> int:
        return self.train_x.shape[1]


def _balanced_counts(n: int, classes: int) -> list[int]:
    base, extra = divmod(n, classes)
    return [base + (1 if c < extra else 0) for c in range(classes)]


def _spiral(rng, n, classes, noise_std):
    xs, ys = [], []
    for c, count in enumerate(_balanced_counts(n, classes)):
        r = rng.uniform(0.0, 1.0, size=count)
        theta = 4.0 * (c + r) + rng.normal(0.0, noise_std, size=count)
        xs.append(np.stack([r * np.sin(theta), r * np.cos(theta)], axis=1))
        ys.append(np.full(count, c))
    return np.concatenate(xs), np.concatenate(ys)


def _blobs(rng, centers, n, noise_std):
    classes, dim = centers.shape
    xs, ys = [], []
    for c, count in enumerate(_balanced_counts(n, classes)):
        xs.append(centers[c] + rng.normal(0.0, noise_std, size=(count, dim)) if noise_std > 0 else np.repeat(centers[c : c + 1], count, axis=0))
        ys.append(np.full(count, c))
    return np.concatenate(xs), np.concatenate(ys)


def gen_synthetic(
    kind: str,
    n_train: int,
    n_test: int,
    classes: int,
    noise_std: float,
    seed: int,
    dim: int = 2,
    standardize: bool = True,
) -> Dataset:
    """Balanced synthetic classification data.

    ``spiral`` draws interleaved 2-D arms (radius uniform in [0, 1], angle
    ``4*(class + r)`` plus Gaussian angular noise).  ``blobs`` places
    isotropic Gaussian clusters around centers drawn uniformly from
    ``[-5, 5]^dim``.  Train and test come from separate RNG streams.
    Features are standardized with train statistics unless disabled.
    """
    if classes < 2:
        raise DataError(f"need at least 2 classes, got {classes}")
    if n_train < classes or n_test < classes:
        raise DataError(f"n_train ({n_train}) and n_test ({n_test}) must each be >= classes ({classes})")
    if noise_std < 0:
        raise DataError("noise_std must be non-negative")
    root = np.random.SeedSequence(seed)
    train_ss, test_ss, center_ss = root.spawn(3)
    if kind == "spiral":
        tx, ty = _spiral(np.random.default_rng(train_ss), n_train, classes, noise_std)
        vx, vy = _spiral(np.random.default_rng(test_ss), n_test, classes, noise_std)
    elif kind == "blobs":
        centers = np.random.default_rng(center_ss).uniform(-5.0, 5.0, size=(classes, dim))
        tx, ty = _blobs(np.random.default_rng(train_ss), centers, n_train, noise_std)
        vx, vy = _blobs(np.random.default_rng(test_ss), centers, n_test, noise_std)
    else:
        raise DataError(f"unknown synthetic kind {kind!r}")
    if standardize:
        mu = tx.mean(axis=0)
        sd = tx.std(axis=0)
        sd[sd == 0] = 1.0
        tx = (tx - mu) / sd
        vx = (vx - mu) / sd
    note = f"{kind}(n_train={n_train}, n_test={n_test}, classes={classes}, noise_std={noise_std}, seed={seed})"
    return Dataset(tx, ty.astype(np.int64), vx, vy.astype(np.int64), classes, note)


def _read(path) -> bytes:
    return Path(path).read_bytes()


def _parse_idx(blob: bytes, magic: int, ndim: int, what: str):
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise IdxTruncatedError(f"{what} file truncated: {len(blob)} bytes, header needs {header}")
    (found,) = struct.unpack_from(">I", blob, 0)
    if found != magic:
        raise IdxMagicError(f"{what} file has magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    size = int(np.prod(dims))
    if len(blob) - header < size:
        raise IdxTruncatedError(f"{what} file truncated: need {size} data bytes, have {len(blob) - header}")
    return np.frombuffer(blob, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path, normalize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Read an IDX image/label file pair into ``(features, labels)``.

    Images are flattened row-major to ``rows*cols`` features and divided by
    255 when ``normalize`` is set.
    """
    images = _parse_idx(_read(images_path), IDX_IMAGES_MAGIC, 3, "images")
    labels = _parse_idx(_read(labels_path), IDX_LABELS_MAGIC, 1, "labels")
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    feats = images.reshape(images.shape[0], -1).astype(np.float64)
    if normalize:
        feats = feats / 255.0
    return feats, labels.astype(np.int64)


def dataset_from_spec(kind: str, params: dict) -> Dataset:
    """Build a :class:`Dataset` from a config ``dataset`` section."""
    if kind in ("spiral", "blobs"):
        return gen_synthetic(
            kind,
            n_train=params["n_train"],
            n_test=params["n_test"],
            classes=params["classes"],
            noise_std=params["noise_std"],
            seed=params["seed"],
            dim=params.get("dim", 2),
        )
    if kind == "idx":
        normalize = params.get("normalize", True)
        tx, ty = load_idx(params["train_images"], params["train_labels"], normalize)
        vx, vy = load_idx(params["test_images"], params["test_labels"], normalize)
        classes = params.get("classes") or int(max(ty.max(initial=0), vy.max(initial=0))) + 1
        return Dataset(tx, ty, vx, vy, max(classes, 2), f"idx({params['train_images']})")
    raise DataError(f"unknown dataset kind {kind!r}")
