"""Small dense-math helpers.

Matrices are plain numpy arrays. Storage is float32; every reduction here
accumulates in float64 and casts back on the way out.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

STORE_DTYPE = np.float32
ACC_DTYPE = np.float64


class ZeroNormWarning(RuntimeWarning):
    """cosine_sim was handed a zero vector; the result was defined as 0."""


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{what}: non-finite input")


def as_mat(x, dtype=STORE_DTYPE) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DomainError(f"expected a matrix, got shape {arr.shape}")
    return arr


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DomainError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.astype(ACC_DTYPE) @ b.astype(ACC_DTYPE)
    return out.astype(STORE_DTYPE)


def transpose(a) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise DomainError(f"transpose expects a matrix, got shape {a.shape}")
    return np.ascontiguousarray(a.T)


def add_scaled(a, b, scale: float = 1.0) -> np.ndarray:
    """Return ``a + scale * b``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DomainError(f"add_scaled shape mismatch: {a.shape} vs {b.shape}")
    out = a.astype(ACC_DTYPE) + scale * b.astype(ACC_DTYPE)
    return out.astype(STORE_DTYPE)


def softmax_stable(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=ACC_DTYPE)
    if v.size == 0:
        raise DomainError("softmax of an empty vector")
    _check_finite(v, "softmax_stable")
    z = v - v.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cosine_sim(a, b) -> float:
    """Cosine similarity clamped to [-1, 1].

    A zero-norm argument yields 0.0 and emits :class:`ZeroNormWarning`.
    """
    a = np.asarray(a, dtype=ACC_DTYPE).ravel()
    b = np.asarray(b, dtype=ACC_DTYPE).ravel()
    if a.shape != b.shape:
        raise DomainError(f"cosine_sim length mismatch: {a.shape} vs {b.shape}")
    ma, mb = np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0)
    if ma == 0.0 or mb == 0.0:
        warnings.warn("zero-norm vector in cosine_sim", ZeroNormWarning, stacklevel=2)
        return 0.0
    # rescale first so tiny or huge vectors do not under/overflow in the dot products
    a, b = a / ma, b / mb
    na = np.sqrt(np.dot(a, a))
    nb = np.sqrt(np.dot(b, b))
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def unit_rows(x: np.ndarray) -> np.ndarray:
    """Row-normalise in float64; zero rows stay zero (cosine 0 to everything)."""
    x = np.asarray(x, dtype=ACC_DTYPE)
    peak = np.max(np.abs(x), axis=-1, keepdims=True, initial=0.0)
    x = x / np.where(peak > 0.0, peak, 1.0)
    norms = np.sqrt(np.einsum("...i,...i->...", x, x))
    safe = np.where(norms > 0.0, norms, 1.0)
    return x / safe[..., None]


def cosine_matrix(x, y=None) -> np.ndarray:
    """All-pairs cosine similarity between the rows of ``x`` and ``y``."""
    xu = unit_rows(x)
    yu = xu if y is None else unit_rows(y)
    return np.clip(xu @ np.swapaxes(yu, -1, -2), -1.0, 1.0)


def mean_std_cv(xs) -> tuple[float, float, float | None]:
    """Mean, population std and coefficient of variation.

    ``cv`` is ``None`` when the mean is exactly zero.
    """
    xs = np.asarray(xs, dtype=ACC_DTYPE).ravel()
    if xs.size == 0:
        raise DomainError("mean_std_cv of an empty vector")
    _check_finite(xs, "mean_std_cv")
    mean = float(xs.mean())
    std = float(np.sqrt(np.mean((xs - mean) ** 2)))
    cv = None if mean == 0.0 else std / mean
    return mean, std, cv


@dataclass(frozen=True)
class RngStream:
    """A named, reproducible random stream.

    The same ``(seed, stream_id)`` pair always yields the same draws
    (PCG64 is platform independent); different ``stream_id`` values are
    statistically independent via ``SeedSequence``.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence([self.seed & (2**64 - 1), self.stream_id & (2**64 - 1)])
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, sub_id: int) -> "RngStream":
        # mix the sub id into the stream id so children of different parents differ
        mixed = (self.stream_id * 0x9E3779B97F4A7C15 + sub_id + 1) & (2**64 - 1)
        return RngStream(self.seed, mixed)


def rng(seed: int, stream_id: int = 0) -> np.random.Generator:
    return RngStream(seed, stream_id).generator()
