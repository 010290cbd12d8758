"""Literal two-mode updates with every Kronecker factor materialized.

Deliberately slow and independent of :mod:`vbcomplete.engine`: it uses only
``numpy.kron``, matrix products and ``numpy.linalg.inv``.  Intended as a test
oracle for small problems (``m * k <= 64``).
"""

from dataclasses import dataclass

import numpy as np

from .distributions import GammaPosterior, GaussianVecPosterior, StudentT

__all__ = [
    "MatrixState",
    "from_posterior",
    "to_posterior",
    "matrix_sweep",
    "matrix_predict",
    "noise_rate_terms",
]

MAX_MK = 64


@dataclass
class MatrixState:
    u: GaussianVecPosterior
    v: GaussianVecPosterior
    lam: list
    tau: GammaPosterior
    components: np.ndarray = None


def from_posterior(state):
    if len(state.factors) != 2:
        raise ValueError("matrix reference needs exactly two modes")
    u, v = (GaussianVecPosterior(f.mean.copy(), f.cov.copy(), f.m, f.k) for f in state.factors)
    return MatrixState(u, v, state.lam, state.tau, state.components.copy())


def to_posterior(ms, template):
    out = template.copy()
    out.factors = [ms.u, ms.v]
    out.c = np.array([g.shape for g in ms.lam])
    out.d = np.array([g.rate for g in ms.lam])
    out.c0, out.d0 = ms.tau.shape, ms.tau.rate
    return out


def _ik_kron(k, col):
    """``I_k kron col`` for a column vector ``col``; shape ``(k * len, k)``."""
    return np.kron(np.eye(k), col.reshape(-1, 1))


def _matricize(mu, m, k):
    return mu.reshape(k, m).T


def _factor_update(problem, other, k, m_self, rows_self, rows_other, tau, lam_mean):
    second = np.outer(other.mean, other.mean) + other.cov
    gram = np.zeros((m_self * k, m_self * k))
    r = np.zeros(m_self * k)
    for y, g, h in zip(problem.values, rows_self, rows_other):
        Ih = _ik_kron(k, h)  # (I_k kron h), its transpose is (I_k kron h^T)
        gram += np.kron(Ih.T @ second @ Ih, np.outer(g, g))
        r += y * np.kron(Ih.T @ other.mean, g)
    cov = np.linalg.inv(np.kron(np.diag(lam_mean), np.eye(m_self)) + tau * gram)
    cov = 0.5 * (cov + cov.T)
    return GaussianVecPosterior(tau * cov @ r, cov, m_self, k)


def noise_rate_terms(problem, u, v, k):
    """The four bracketed terms of the noise-rate update, summed over observations."""
    side_g, side_h = problem.side_info
    Mu = _matricize(u.mean, u.m, k)
    Mv = _matricize(v.mean, v.m, k)
    total = np.zeros(4)
    for y, (i1, i2) in zip(problem.values, problem.indices):
        g, h = side_g[i1], side_h[i2]
        Ig, Ih = _ik_kron(k, g), _ik_kron(k, h)
        Ihg = np.kron(np.eye(k), np.outer(h, g))
        Igh = np.kron(np.eye(k), np.outer(g, h))
        total[0] += (y - g @ Mu @ Mv.T @ h) ** 2
        total[1] += g @ Mu @ Ih.T @ v.cov @ Ih @ Mu.T @ g
        total[2] += h @ Mv @ Ig.T @ u.cov @ Ig @ Mv.T @ h
        total[3] += np.trace(v.cov @ Ihg @ u.cov @ Igh)
    return total


def matrix_sweep(problem, s):
    """Apply U, V, column-precision and noise-precision updates once, in that order."""
    if problem.d != 2:
        raise ValueError("matrix reference needs d == 2")
    side_g, side_h = problem.side_info
    m1, m2 = problem.m
    k = s.u.k
    if max(m1, m2) * k > MAX_MK:
        raise ValueError(f"problem too large for dense reference (m*k > {MAX_MK})")
    comps = np.arange(k) if s.components is None else s.components
    lam_mean = np.array([g.shape / g.rate for g in s.lam])
    tau = s.tau.shape / s.tau.rate
    rows_g = side_g[problem.indices[:, 0]]
    rows_h = side_h[problem.indices[:, 1]]

    u = _factor_update(problem, s.v, k, m1, rows_g, rows_h, tau, lam_mean)
    v = _factor_update(problem, u, k, m2, rows_h, rows_g, tau, lam_mean)

    a_j = problem.hyper.a_j[comps]
    b_j = problem.hyper.b_j[comps]
    c = a_j + 0.5 * (m1 + m2)
    su = np.outer(u.mean, u.mean) + u.cov
    sv = np.outer(v.mean, v.mean) + v.cov
    d = np.array([
        b_j[j]
        + 0.5 * np.trace(su[j * m1:(j + 1) * m1, j * m1:(j + 1) * m1])
        + 0.5 * np.trace(sv[j * m2:(j + 1) * m2, j * m2:(j + 1) * m2])
        for j in range(k)
    ])
    c0 = problem.hyper.a0 + 0.5 * problem.n_obs
    d0 = problem.hyper.b0 + 0.5 * float(noise_rate_terms(problem, u, v, k).sum())
    lam = [GammaPosterior(float(a), float(b)) for a, b in zip(c, d)]
    return MatrixState(u, v, lam, GammaPosterior(c0, d0), s.components)


def matrix_predict(problem, s, index):
    """Student's t predictive law of entry ``index`` (transposes placed where shapes require)."""
    i1, i2 = (int(i) for i in index)
    side_g, side_h = problem.side_info
    if not (0 <= i1 < side_g.shape[0] and 0 <= i2 < side_h.shape[0]):
        raise IndexError(f"index {index} out of range")
    k = s.u.k
    g, h = side_g[i1], side_h[i2]
    Mu = _matricize(s.u.mean, s.u.m, k)
    Mv = _matricize(s.v.mean, s.v.m, k)
    Ig, Ih = _ik_kron(k, g), _ik_kron(k, h)
    c0, d0 = s.tau.shape, s.tau.rate
    inv_xi = (
        d0 / c0
        + h @ Mv @ Ig.T @ s.u.cov @ Ig @ Mv.T @ h
        + g @ Mu @ Ih.T @ s.v.cov @ Ih @ Mu.T @ g
    )
    return StudentT(float(g @ Mu @ Mv.T @ h), 1.0 / inv_xi, 2.0 * c0)
