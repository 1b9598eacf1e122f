"""The shared subspace S: basis, projections, and the Grassmann update cycle."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, StaleSubspaceError, UndefinedError
from .linalg import DEFAULT_DTYPE, qr_thin


@dataclass(frozen=True)
class Subspace:
    """Immutable snapshot of an orthonormal ``d x k`` basis plus its version."""

    basis: np.ndarray
    version: int = 0

    def __post_init__(self):
        u = self.basis
        if u.ndim != 2 or u.shape[1] >= u.shape[0]:
            raise ShapeError(f"basis must be d x k with k < d, got {u.shape}")
        u.setflags(write=False)

    @property
    def d(self) -> int:
        return self.basis.shape[0]

    @property
    def k(self) -> int:
        return self.basis.shape[1]

    @property
    def dtype(self):
        return self.basis.dtype

    def orthogonality_error(self) -> float:
        u = self.basis.astype(np.float64)
        return float(np.linalg.norm(u.T @ u - np.eye(self.k)))

    def projector(self) -> np.ndarray:
        return self.basis @ self.basis.T

    def replaced(self, basis) -> "Subspace":
        return Subspace(np.array(basis, dtype=self.dtype), self.version + 1)

    def astype(self, dtype) -> "Subspace":
        return Subspace(np.array(self.basis, dtype=dtype), self.version)


def random_subspace(d, k, rng, dtype=DEFAULT_DTYPE) -> Subspace:
    """Orthonormalized isotropic Gaussian basis."""
    g = rng.standard_normal((d, k))
    q, _ = qr_thin(g)
    return Subspace(q.astype(dtype), 0)


def coordinate_subspace(d, k, dtype=DEFAULT_DTYPE) -> Subspace:
    return Subspace(np.eye(d, k, dtype=dtype), 0)


def _check_last(x, d):
    if x.shape[-1] != d:
        raise ShapeError(f"last dimension {x.shape[-1]} does not match subspace d={d}")


def project_rows(x, s: Subspace) -> np.ndarray:
    """x U U^T, applied to the last axis."""
    x = np.asarray(x)
    _check_last(x, s.d)
    u = s.basis.astype(x.dtype, copy=False)
    return (x @ u) @ u.T


def project_columns(w, s: Subspace) -> np.ndarray:
    """U U^T w for a matrix whose column space is constrained."""
    w = np.asarray(w)
    if w.shape[0] != s.d:
        raise ShapeError(f"first dimension {w.shape[0]} does not match subspace d={s.d}")
    u = s.basis.astype(w.dtype, copy=False)
    return u @ (u.T @ w)


def compress(x, s: Subspace) -> np.ndarray:
    x = np.asarray(x)
    _check_last(x, s.d)
    return x @ s.basis.astype(x.dtype, copy=False)


def decompress(c, s: Subspace, version=None) -> np.ndarray:
    c = np.asarray(c)
    if version is not None and version != s.version:
        raise StaleSubspaceError(version, s.version)
    if c.shape[-1] != s.k:
        raise ShapeError(f"coefficient dimension {c.shape[-1]} does not match k={s.k}")
    return c @ s.basis.astype(c.dtype, copy=False).T


def grassmann_loss(g, s: Subspace) -> float:
    """Squared Frobenius norm of the part of ``g`` outside S."""
    g = np.asarray(g, dtype=np.float64)
    _check_last(g, s.d)
    u = s.basis.astype(np.float64)
    resid = g - (g @ u) @ u.T
    return float(np.sum(resid * resid))


def off_subspace_ratio(m, s: Subspace) -> float:
    """||M (I - U U^T)||_F / ||M||_F for a row-constrained matrix."""
    m = np.asarray(m, dtype=np.float64)
    _check_last(m, s.d)
    total = np.linalg.norm(m)
    if total == 0.0:
        raise UndefinedError("off-subspace ratio of a zero matrix")
    u = s.basis.astype(np.float64)
    resid = m - (m @ u) @ u.T
    return float(min(np.linalg.norm(resid) / total, 1.0))


@dataclass
class GrassmannAccumulator:
    """Running mean of G^T G over the gradients seen since the last update."""

    gram: np.ndarray
    sample_count: int = 0

    @classmethod
    def zeros(cls, d) -> "GrassmannAccumulator":
        return cls(np.zeros((d, d)), 0)

    def reset(self) -> None:
        self.gram = np.zeros_like(self.gram)
        self.sample_count = 0


def accumulate(acc: GrassmannAccumulator, g_final) -> GrassmannAccumulator:
    g = np.asarray(g_final, dtype=np.float64)
    d = acc.gram.shape[0]
    _check_last(g, d)
    flat = g.reshape(-1, d)
    count = acc.sample_count + 1
    gram = acc.gram + (flat.T @ flat - acc.gram) / count
    return GrassmannAccumulator(0.5 * (gram + gram.T), count)


def grassmann_gradient(s: Subspace, gram) -> np.ndarray:
    """Euclidean gradient of the Grassmann loss w.r.t. U: -2 S U."""
    return -2.0 * np.asarray(gram, dtype=np.float64) @ s.basis.astype(np.float64)


def tangent_projection(u, grad) -> np.ndarray:
    return grad - u @ (u.T @ grad)


def grassmann_step(s: Subspace, acc: GrassmannAccumulator, eta: float) -> Subspace:
    """One retracted descent step on G(k, d); the version is bumped."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    if acc.sample_count < 1:
        raise ValueError("accumulator is empty")
    u = s.basis.astype(np.float64)
    tangent = tangent_projection(u, grassmann_gradient(s, acc.gram))
    q, _ = qr_thin(u - eta * tangent)
    return s.replaced(q)


def captured_energy(s: Subspace, gram) -> float:
    u = s.basis.astype(np.float64)
    return float(np.trace(u.T @ np.asarray(gram, dtype=np.float64) @ u))


@dataclass(frozen=True)
class DistortionCheck:
    lhs: float
    rhs: float
    holds: bool
    alt_rhs: float = field(default=0.0)
    alt_holds: bool = field(default=True)


def distortion_bound_check(a, v) -> DistortionCheck:
    """Bound on how far an elementwise positive rescaling rotates a vector.

    With ``b = v * a``, the component of ``b`` orthogonal to ``a`` is at most
    ``(max v - min v) / 2 * ||a||`` and at most ``(max v / min v - 1) / 2 * ||b||``.
    """
    a = np.asarray(a, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if a.shape != v.shape:
        raise ShapeError("a and v must have the same shape")
    norm_a = np.linalg.norm(a)
    if norm_a == 0.0:
        raise UndefinedError("zero vector has no direction")
    if np.any(v <= 0):
        raise ValueError("scales must be strictly positive")
    b = v * a
    b_perp = b - (b @ a) / (norm_a * norm_a) * a
    lhs = float(np.linalg.norm(b_perp))
    lo, hi = float(v.min()), float(v.max())
    rhs = (hi - lo) / 2.0 * float(norm_a)
    alt_rhs = (hi / lo - 1.0) / 2.0 * float(np.linalg.norm(b))
    return DistortionCheck(lhs, rhs, lhs <= rhs + 1e-9, alt_rhs, lhs <= alt_rhs + 1e-9)
