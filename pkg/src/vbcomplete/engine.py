"""Variational message passing for CP completion with side information.

One sweep updates every factor posterior in ascending mode order (each using
the freshest neighbours), then the column precisions, then the noise
precision.  Per-observation statistics of each mode,

    w_s[o] = M_s^T g_{s,i_s}                            (k,)
    S_s[o] = (I_k kron g^T) A_s (I_k kron g) + w w^T     (k, k)

are kept between updates, so a factor update costs ``O(d |omega| m^2 k^2 + m^3 k^3)``.
"""

from dataclasses import dataclass

import numpy as np

from .core_linalg import (
    NumericalError,
    sandwich,
    sandwich_batch,
    spd_factorize,
    spd_solve,
    symmetrize,
)
from .distributions import GammaPosterior, GaussianVecPosterior, StudentT
from .model import RunOptions, ValidationError, init_posterior

__all__ = [
    "UPDATE_ORDER",
    "SweepReport",
    "PredictiveT",
    "mode_stats",
    "update_factor",
    "update_lambda",
    "update_tau",
    "sweep",
    "run",
    "prune_ranks",
    "determine_rank",
    "predict_entry",
    "predict_batch",
    "reconstruct_mean",
    "trace_header",
]

UPDATE_ORDER = "factors ascending, then lambda, then tau"
RECONSTRUCT_CAP = 2 ** 27
CHUNK = 4096

PredictiveT = StudentT


@dataclass
class SweepReport:
    iteration: int
    residual_proxy: float
    max_relative_mean_change: float
    lambda_means: np.ndarray
    tau_mean: float

    def as_record(self, width=None):
        lam = list(map(float, self.lambda_means))
        if width is not None:
            lam = lam + [None] * (width - len(lam))
        return [self.iteration, self.residual_proxy, self.max_relative_mean_change, self.tau_mean] + lam


def trace_header(k):
    return ["iteration", "residual_proxy", "max_rel_change", "tau_mean"] + [f"lambda_{j}" for j in range(k)]


@dataclass
class _Stats:
    w: np.ndarray
    second: np.ndarray


def mode_stats(problem, post, l):
    """Per-observation mean images ``w`` and second-moment matrices of mode ``l``."""
    rows = problem.rows(l)
    k = post.k
    w = rows @ post.mean_matrix
    second = np.empty((rows.shape[0], k, k))
    for lo in range(0, rows.shape[0], CHUNK):
        sl = slice(lo, lo + CHUNK)
        second[sl] = sandwich_batch(post.cov, rows[sl], k)
    second += w[:, :, None] * w[:, None, :]
    return _Stats(w, second)


def _all_stats(problem, state):
    return [mode_stats(problem, f, l) for l, f in enumerate(state.factors)]


def _leave_one_out(stats, l, n_obs, k):
    w = np.ones((n_obs, k))
    second = np.ones((n_obs, k, k))
    for s, st in enumerate(stats):
        if s != l:
            w *= st.w
            second *= st.second
    return w, second


def update_factor(problem, state, l, stats=None):
    """New Gaussian posterior of factor ``l`` given the current neighbours."""
    if not 0 <= l < problem.d:
        raise IndexError(f"mode {l} out of range for d={problem.d}")
    if stats is None:
        stats = _all_stats(problem, state)
    k = state.current_k
    m = problem.m[l]
    n_obs = problem.n_obs
    rows = problem.rows(l)
    w, rest_second = _leave_one_out(stats, l, n_obs, k)

    # sum_o rest_second[o] kron g g^T, accumulated as a (k^2, m^2) product then regridded
    acc = np.zeros((k * k, m * m))
    for lo in range(0, n_obs, CHUNK):
        g = rows[lo:lo + CHUNK]
        gg = (g[:, :, None] * g[:, None, :]).reshape(g.shape[0], m * m)
        acc += rest_second[lo:lo + CHUNK].reshape(-1, k * k).T @ gg
    gram = acc.reshape(k, k, m, m).transpose(0, 2, 1, 3).reshape(k * m, k * m)

    tau = state.c0 / state.d0
    precision = symmetrize(np.diag(np.repeat(state.c / state.d, m)) + tau * gram)
    try:
        f = spd_factorize(precision)
    except NumericalError as exc:
        raise NumericalError(
            f"factor {l} at iteration {state.iteration}: {exc}", exc.minor,
            {"iteration": state.iteration, "mode": l},
        ) from exc
    cov = symmetrize(spd_solve(f, np.eye(k * m)))
    rhs = ((w * problem.values[:, None]).T @ rows).ravel()
    mean = tau * spd_solve(f, rhs)
    return GaussianVecPosterior(mean, cov, m, k)


def _lambda_shape(problem, state):
    return problem.hyper.a_j[state.components] + 0.5 * sum(problem.m)


def update_lambda(problem, state):
    """Shape and rate of every column precision, as a list of Gamma posteriors."""
    c = _lambda_shape(problem, state)
    d = problem.hyper.b_j[state.components].astype(float).copy()
    k = state.current_k
    for f in state.factors:
        mean_mat = f.mean_matrix
        block_tr = np.trace(f.cov.reshape(k, f.m, k, f.m), axis1=1, axis2=3).diagonal()
        d += 0.5 * (np.sum(mean_mat * mean_mat, axis=0) + block_tr)
    return [GammaPosterior(float(a), float(b)) for a, b in zip(c, d)]


def _tau_rate(problem, stats, k):
    y = problem.values
    n_obs = problem.n_obs
    w = np.ones((n_obs, k))
    second = np.ones((n_obs, k, k))
    for st in stats:
        w *= st.w
        second *= st.second
    cross = w.sum(axis=1)
    second = second.sum(axis=(1, 2))
    resid = y * y - 2.0 * y * cross + second
    return problem.hyper.b0 + 0.5 * float(resid.sum())


def update_tau(problem, state, stats=None):
    if stats is None:
        stats = _all_stats(problem, state)
    c0 = problem.hyper.a0 + 0.5 * problem.n_obs
    d0 = _tau_rate(problem, stats, state.current_k)
    if d0 < problem.hyper.b0:
        # the bracketed expectation is a sum of squares; only rounding can push it below b0
        d0 = problem.hyper.b0
    return GammaPosterior(c0, d0)


def _rel_change(new, old):
    return float(np.linalg.norm(new - old) / (np.linalg.norm(old) + 1e-15))


def _sweep(problem, state, stats=None):
    state = state.copy()
    if stats is None:
        stats = _all_stats(problem, state)
    change = 0.0
    for l in range(problem.d):
        new = update_factor(problem, state, l, stats)
        change = max(change, _rel_change(new.mean, state.factors[l].mean))
        state.factors[l] = new
        stats[l] = mode_stats(problem, new, l)
    lam = update_lambda(problem, state)
    state.c = np.array([g.shape for g in lam])
    state.d = np.array([g.rate for g in lam])
    tau = update_tau(problem, state, stats)
    state.c0, state.d0 = tau.shape, tau.rate
    state.iteration += 1
    report = SweepReport(
        state.iteration, state.d0 - problem.hyper.b0, change, state.c / state.d, state.c0 / state.d0
    )
    return state, report, stats


def sweep(problem, state):
    """One full round of updates; the input state is left untouched."""
    new, report, _ = _sweep(problem, state)
    return new, report


def run(problem, options=None, state=None, on_sweep=None):
    """Iterate sweeps until ``max_iterations`` or the mean change drops below ``tolerance``.

    Returns the final state and the list of per-sweep reports.  ``on_sweep``
    is called as ``on_sweep(state, report)`` after every sweep.
    """
    options = options or RunOptions()
    if state is None:
        state = init_posterior(problem, options.seed)
    reports = []
    stats = None
    for _ in range(int(options.max_iterations)):
        state, report, stats = _sweep(problem, state, stats)
        if options.prune:
            k_before = state.current_k
            state = prune_ranks(state, options.prune_threshold)
            if state.current_k != k_before:
                stats = None
        reports.append(report)
        if on_sweep is not None:
            on_sweep(state, report)
        if report.max_relative_mean_change < options.tolerance:
            break
    return state, reports


def prune_ranks(state, threshold):
    """Drop columns whose precision mean exceeds ``threshold`` times the smallest one."""
    if threshold <= 0:
        raise ValidationError("threshold must be positive")
    lam = state.c / state.d
    keep = lam <= threshold * lam.min()
    keep[np.argmin(lam)] = True
    if keep.all():
        return state
    new = state.copy()
    k_new = int(keep.sum())
    factors = []
    for f in new.factors:
        mask = np.repeat(keep, f.m)
        factors.append(GaussianVecPosterior(f.mean[mask], f.cov[np.ix_(mask, mask)], f.m, k_new))
    new.factors = factors
    new.c = new.c[keep]
    new.d = new.d[keep]
    new.components = new.components[keep]
    return new


def determine_rank(state, epsilon=0.05):
    """Number of columns whose variance scale ``d_j/c_j`` is at least ``epsilon`` times the largest."""
    if not 0 < epsilon <= 1:
        raise ValidationError(f"epsilon must be in (0, 1], got {epsilon}")
    scale = state.d / state.c
    return int(np.sum(scale >= epsilon * scale.max()))


def _check_index(problem, index):
    index = tuple(int(i) for i in index)
    if len(index) != problem.d or any(not 0 <= i < n for i, n in zip(index, problem.shape)):
        raise IndexError(f"index {index} outside shape {problem.shape}")
    return index


def _mode_images(problem, state):
    return [g @ mean_mat for g, mean_mat in zip(problem.side_info, state.means())]


def predict_entry(problem, state, index):
    """Approximate Student's t predictive law of one entry."""
    index = _check_index(problem, index)
    images = _mode_images(problem, state)
    ws = [image[i] for image, i in zip(images, index)]
    prod = ws[0].copy()
    for w in ws[1:]:
        prod = prod * w
    location = float(np.sum(prod))
    eta = 0.0
    k = state.current_k
    for l, f in enumerate(state.factors):
        rest = np.ones(k)
        for s, w in enumerate(ws):
            if s != l:
                rest = rest * w
        g = problem.side_info[l][index[l]]
        eta += float(rest @ sandwich(f.cov, g, k) @ rest)
    return PredictiveT(location, 1.0 / (state.d0 / state.c0 + eta), 2.0 * state.c0)


def predict_batch(problem, state, indices):
    """Predictive laws for many indices: location and precision arrays plus the shared dof."""
    indices = np.asarray(indices, dtype=np.int64).reshape(-1, problem.d)
    if np.any((indices < 0) | (indices >= np.array(problem.shape))):
        raise IndexError("index outside tensor shape")
    k = state.current_k
    images = _mode_images(problem, state)
    ws = [image[indices[:, l]] for l, image in enumerate(images)]
    full = np.ones((indices.shape[0], k))
    for w in ws:
        full = full * w
    location = full.sum(axis=1)
    eta = np.zeros(indices.shape[0])
    for l, f in enumerate(state.factors):
        rest = np.ones((indices.shape[0], k))
        for s, w in enumerate(ws):
            if s != l:
                rest = rest * w
        g = problem.side_info[l][indices[:, l]]
        sw = sandwich_batch(f.cov, g, k)
        eta += np.einsum("op,opq,oq->o", rest, sw, rest)
    precision = 1.0 / (state.d0 / state.c0 + eta)
    return location, precision, 2.0 * state.c0


def reconstruct_mean(problem, state, cap=RECONSTRUCT_CAP):
    """Full tensor of posterior-mean entries; refuses tensors above ``cap`` entries."""
    size = int(np.prod(problem.shape, dtype=np.int64))
    if size > cap:
        raise MemoryError(f"tensor has {size} entries, cap is {cap}; use predict_batch")
    images = _mode_images(problem, state)
    k = state.current_k
    out = np.empty(problem.shape)
    d = problem.d
    for i0 in range(problem.shape[0]):
        acc = images[0][i0].reshape((1,) * (d - 1) + (k,))
        for l in range(1, d):
            shape = [1] * (d - 1) + [k]
            shape[l - 1] = problem.shape[l]
            acc = acc * images[l].reshape(shape)
        out[i0] = acc.sum(axis=-1)
    return out
