"""Dense real linear algebra on numpy arrays.

Matrices are 2-D arrays, batched activations are 3-D ``(b, n, d)`` arrays.
Compute precision is float32 unless a caller passes float64 arrays (oracle
mode); every routine preserves the input dtype.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateBasisError, ShapeError, UndefinedError

DEFAULT_DTYPE = np.float32
ORACLE_DTYPE = np.float64

# Relative pivot threshold below which a QR input is treated as rank deficient.
RANK_TOL = 1e-10


def as_float(a, dtype=None) -> np.ndarray:
    a = np.asarray(a)
    if dtype is not None:
        return a.astype(dtype, copy=False)
    if a.dtype in (np.float32, np.float64):
        return a
    return a.astype(DEFAULT_DTYPE)


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def naive_matmul(a, b) -> np.ndarray:
    """Triple-loop product in float64; reference for :func:`matmul`."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for p in range(a.shape[1]):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def qr_thin(a):
    """Householder thin QR with a non-negative diagonal on R.

    Returns ``(Q, R)`` with ``Q`` of shape ``(m, n)`` and ``R`` of shape
    ``(n, n)``. Work is done in float64 and cast back to the input dtype.
    """
    a = as_float(a)
    if a.ndim != 2:
        raise ShapeError(f"qr_thin expects a matrix, got shape {a.shape}")
    m, n = a.shape
    if m < n:
        raise ShapeError(f"qr_thin needs rows >= cols, got {a.shape}")
    out_dtype = a.dtype
    r = a.astype(np.float64)
    scale = np.linalg.norm(r)
    reflectors = []
    for j in range(n):
        x = r[j:, j]
        norm_x = np.linalg.norm(x)
        if norm_x <= RANK_TOL * scale or scale == 0.0:
            raise DegenerateBasisError(f"column {j} is linearly dependent")
        alpha = -norm_x if x[0] >= 0 else norm_x
        v = x.copy()
        v[0] -= alpha
        v /= np.linalg.norm(v)
        r[j:, j:] -= 2.0 * np.outer(v, v @ r[j:, j:])
        reflectors.append(v)
    q = np.eye(m, n)
    for j in range(n - 1, -1, -1):
        v = reflectors[j]
        q[j:, :] -= 2.0 * np.outer(v, v @ q[j:, :])
    r = np.triu(r[:n, :])
    diag = np.diag(r)
    if np.any(np.abs(diag) < RANK_TOL * scale):
        raise DegenerateBasisError("input is rank deficient")
    signs = np.where(diag < 0, -1.0, 1.0)
    q *= signs
    r *= signs[:, None]
    return q.astype(out_dtype), r.astype(out_dtype)


def jacobi_eigvalsh(sym, tol=1e-15, max_sweeps=100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations (float64).

    Independent reference for :func:`singular_values`; returned descending.
    """
    a = np.array(sym, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ShapeError(f"expected a square matrix, got {a.shape}")
    if n == 1:
        return a.diagonal().copy()
    total = np.linalg.norm(a)
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tol * max(total, 1e-300):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                cp = a[:, p].copy()
                cq = a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
    return np.sort(np.diag(a))[::-1]


def jacobi_singular_values(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    gram = a.T @ a if a.shape[0] >= a.shape[1] else a @ a.T
    ev = jacobi_eigvalsh(gram)
    return np.sqrt(np.clip(ev, 0.0, None))


def singular_values(a) -> np.ndarray:
    """Singular values, descending, as float64 (LAPACK divide and conquer)."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"singular_values expects a matrix, got shape {a.shape}")
    if a.size == 0:
        return np.zeros(0)
    return np.linalg.svd(a, compute_uv=False)


def stable_rank(a) -> float:
    """sum(sigma_i^2) / max(sigma_i^2)."""
    a = np.asarray(a, dtype=np.float64)
    sv = singular_values(a)
    if sv.size == 0 or sv[0] == 0.0:
        raise UndefinedError("stable rank of a zero matrix is undefined")
    return float(np.sum(a * a) / (sv[0] * sv[0]))


def softmax_rows(a, axis=-1) -> np.ndarray:
    a = np.asarray(a)
    shifted = a - np.max(a, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def relu(x) -> np.ndarray:
    return np.maximum(x, 0)


def spectral_norm(a) -> float:
    return float(singular_values(a)[0])
