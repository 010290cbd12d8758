"""Dense kernels for the structured products used by the update equations.

Vectorization convention (fixed project-wide): a factor ``U`` of shape
``(m, k)`` is stacked column by column, ``vec(U)[j*m + i] = U[i, j]``.  A
covariance over ``vec(U)`` is therefore a ``k x k`` grid of ``m x m`` blocks.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack
from scipy.linalg import cho_solve

__all__ = [
    "DimensionError",
    "NumericalError",
    "SpdFactor",
    "vec",
    "unvec",
    "multilinear_product",
    "hadamard",
    "sandwich",
    "sandwich_batch",
    "kron_vec",
    "block_diag_trace",
    "spd_factorize",
    "spd_solve",
    "symmetrize",
]

JITTER_STEPS = (1e-12, 1e-10, 1e-8)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericalError(ArithmeticError):
    """A factorization failed even after regularization.

    ``minor`` is the 1-based index of the leading minor that was not
    positive definite, as reported by LAPACK.
    """

    def __init__(self, message, minor=None, context=None):
        super().__init__(message)
        self.minor = minor
        self.context = context


@dataclass(frozen=True)
class SpdFactor:
    """Lower Cholesky factor ``L`` with ``L @ L.T`` equal to the input (plus jitter)."""

    lower: np.ndarray
    jitter: float = 0.0

    @property
    def dim(self):
        return self.lower.shape[0]


def symmetrize(a):
    return 0.5 * (a + a.T)


def vec(u):
    """Stack the columns of ``u`` into one vector."""
    return np.asarray(u).reshape(-1, order="F")


def unvec(v, m):
    """Inverse of :func:`vec` for a factor with ``m`` rows."""
    v = np.asarray(v)
    if v.size % m:
        raise DimensionError(f"vector of length {v.size} is not a multiple of m={m}")
    return v.reshape((m, v.size // m), order="F")


def multilinear_product(mats):
    """Sum over positions of the entrywise product of equally shaped arrays.

    For two matrices this is the Frobenius inner product ``Tr(X.T @ Y)``.
    """
    mats = [np.asarray(x, dtype=float) for x in mats]
    if not mats:
        raise DimensionError("need at least one operand")
    shape = mats[0].shape
    for x in mats[1:]:
        if x.shape != shape:
            raise DimensionError(f"shape mismatch: {x.shape} vs {shape}")
    acc = mats[0].copy()
    for x in mats[1:]:
        acc *= x
    return float(acc.sum())


def hadamard(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x * y


def _check_sandwich(a, m, k):
    if a.ndim != 2 or a.shape != (m * k, m * k):
        raise DimensionError(f"expected a {(m * k, m * k)} matrix, got {a.shape}")


def sandwich(a, g, k):
    """Compute ``(I_k kron g.T) @ a @ (I_k kron g)`` blockwise.

    Entry ``(p, q)`` of the ``k x k`` result is ``g @ a[block p, q] @ g``.
    """
    a = np.asarray(a, dtype=float)
    g = np.asarray(g, dtype=float).ravel()
    m = g.size
    _check_sandwich(a, m, k)
    blocks = a.reshape(k, m, k, m)
    out = np.einsum("i,piqj,j->pq", g, blocks, g)
    return symmetrize(out)


def sandwich_batch(a, gs, k):
    """:func:`sandwich` for every row of ``gs`` at once, shape ``(n, k, k)``.

    Costs ``n * k^2 * m^2`` multiply-adds, arranged as two matrix products.
    """
    a = np.asarray(a, dtype=float)
    gs = np.asarray(gs, dtype=float)
    n, m = gs.shape
    _check_sandwich(a, m, k)
    # contract the column index of each block: (k*m*k, n)
    half = a.reshape(k * m * k, m) @ gs.T
    half = half.reshape(k, m, k, n)
    out = np.einsum("pmqo,om->opq", half, gs, optimize=True)
    return 0.5 * (out + out.transpose(0, 2, 1))


def kron_vec(w, g):
    """Kronecker product of two vectors: ``out[j*m + i] = w[j] * g[i]``."""
    w = np.asarray(w, dtype=float).ravel()
    g = np.asarray(g, dtype=float).ravel()
    return np.outer(w, g).ravel()


def block_diag_trace(a, j, m):
    """Trace of the ``j``-th (0-based) ``m x m`` diagonal block of ``a``."""
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] % m:
        raise DimensionError(f"matrix of shape {a.shape} has no {m}x{m} block grid")
    k = a.shape[0] // m
    if not 0 <= j < k:
        raise IndexError(f"block index {j} out of range for {k} blocks")
    lo = j * m
    return float(np.trace(a[lo:lo + m, lo:lo + m]))


def spd_factorize(b):
    """Cholesky-factorize a symmetric positive definite matrix.

    If the plain factorization fails, ``delta * mean(diag(b)) * I`` is added
    for escalating ``delta`` in ``JITTER_STEPS`` before giving up.
    """
    b = np.asarray(b, dtype=float)
    if b.ndim != 2 or b.shape[0] != b.shape[1]:
        raise DimensionError(f"expected a square matrix, got {b.shape}")
    if not np.all(np.isfinite(b)):
        raise NumericalError("matrix has non-finite entries")
    scale = float(np.mean(np.diag(b))) if b.size else 1.0
    info = 0
    for delta in (0.0,) + JITTER_STEPS:
        shifted = b if delta == 0.0 else b + (delta * scale) * np.eye(b.shape[0])
        low, info = lapack.dpotrf(shifted, lower=1, clean=1, overwrite_a=0)
        if info == 0:
            return SpdFactor(low, delta * scale)
        if info < 0:
            raise NumericalError(f"dpotrf argument {-info} invalid")
    raise NumericalError(
        f"leading minor {info} not positive definite after jitter", minor=int(info)
    )


def spd_solve(f, rhs):
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape[0] != f.dim:
        raise DimensionError(f"rhs has {rhs.shape[0]} rows, factor has dim {f.dim}")
    return cho_solve((f.lower, True), rhs)
