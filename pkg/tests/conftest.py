import numpy as np
import pytest

from vbcomplete.distributions import GaussianVecPosterior
from vbcomplete.model import Hyperpriors, PosteriorState, new_problem


def random_spd(rng, n, scale=0.3):
    w = rng.standard_normal((n, n))
    return scale * (w @ w.T) / n + 0.1 * np.eye(n)


def random_problem(rng, shape, m, k, n_obs, hyper=None, identity=False):
    d = len(shape)
    if identity:
        side = [None] * d
    else:
        side = [rng.standard_normal((n, mm)) for n, mm in zip(shape, m)]
    idx = np.column_stack([rng.integers(0, n, n_obs) for n in shape]).astype(np.int64)
    vals = rng.standard_normal(n_obs)
    if hyper is None:
        hyper = Hyperpriors(rng.uniform(0.5, 2, k), rng.uniform(0.5, 2, k), rng.uniform(0.5, 2), rng.uniform(0.5, 2))
    return new_problem(side, (idx, vals), k, hyper, shape=shape)


def random_state(rng, problem, cov_scale=0.3):
    k = problem.k
    factors = [
        GaussianVecPosterior(rng.standard_normal(m * k), random_spd(rng, m * k, cov_scale), m, k)
        for m in problem.m
    ]
    return PosteriorState(
        factors, rng.uniform(0.5, 3, k), rng.uniform(0.5, 3, k), rng.uniform(1, 5), rng.uniform(0.5, 3)
    )


def ik_kron(k, g):
    """Dense ``I_k kron g`` with ``g`` as a column."""
    return np.kron(np.eye(k), np.asarray(g).reshape(-1, 1))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
