"""Completion problems and posterior state, with initialization and file formats.

Indices are 0-based throughout the API and in files.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr

from .distributions import GammaPosterior, GaussianVecPosterior

__all__ = [
    "RNG_ALGORITHM",
    "ValidationError",
    "Hyperpriors",
    "CompletionProblem",
    "PosteriorState",
    "RunOptions",
    "make_rng",
    "derive_seed",
    "column_rank",
    "new_problem",
    "init_posterior",
    "problem_to_dict",
    "problem_from_dict",
    "save_problem",
    "load_problem",
    "state_to_dict",
    "state_from_dict",
    "save_state",
    "load_state",
]

RNG_ALGORITHM = "numpy.Philox4x64-10/SeedSequence"
DEFAULT_HYPER = 1e-6
INIT_GAMMA = 1e-6
RANK_RTOL = 1e-10


class ValidationError(ValueError):
    """Raised for inputs that fail validation."""


def make_rng(seed):
    """Counter-based Philox generator; ``seed`` may be an int or a SeedSequence."""
    return np.random.Generator(np.random.Philox(seed))


def derive_seed(base_seed, *keys):
    """Deterministic 64-bit child seed of ``base_seed`` addressed by integer ``keys``."""
    ss = np.random.SeedSequence(int(base_seed), spawn_key=tuple(int(x) for x in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Hyperpriors:
    a_j: np.ndarray
    b_j: np.ndarray
    a0: float = DEFAULT_HYPER
    b0: float = DEFAULT_HYPER

    @classmethod
    def default(cls, k, value=DEFAULT_HYPER):
        return cls(_frozen(np.full(k, value)), _frozen(np.full(k, value)), value, value)


@dataclass(frozen=True)
class CompletionProblem:
    """Observed entries of a tensor ``[[G_1 U_1, ..., G_d U_d]]`` plus priors.

    ``indices`` has shape ``(|omega|, d)``; repeated rows are legal and each
    contributes its own term to every sum over observations.
    """

    side_info: tuple
    indices: np.ndarray
    values: np.ndarray
    k: int
    hyper: Hyperpriors
    identity_modes: tuple = ()

    @property
    def d(self):
        return len(self.side_info)

    @property
    def shape(self):
        return tuple(g.shape[0] for g in self.side_info)

    @property
    def m(self):
        return tuple(g.shape[1] for g in self.side_info)

    @property
    def n_obs(self):
        return self.values.shape[0]

    def rows(self, l):
        """Side-information rows ``g_{l, i_l}`` for every observation, ``(|omega|, m_l)``."""
        return self.side_info[l][self.indices[:, l]]


@dataclass
class PosteriorState:
    """Factorized variational posterior.

    ``c``/``d`` are the Gamma shape/rate of each column precision; ``components``
    maps the surviving columns back to their original positions, so that
    pruning can look up the right hyperpriors.
    """

    factors: list
    c: np.ndarray
    d: np.ndarray
    c0: float
    d0: float
    components: np.ndarray = None
    iteration: int = 0

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        self.d = np.asarray(self.d, dtype=float)
        if self.components is None:
            self.components = np.arange(self.c.size)
        self.components = np.asarray(self.components, dtype=int)

    @property
    def current_k(self):
        return int(self.c.size)

    @property
    def lam(self):
        return [GammaPosterior(float(c), float(d)) for c, d in zip(self.c, self.d)]

    @property
    def tau(self):
        return GammaPosterior(self.c0, self.d0)

    @property
    def lambda_means(self):
        return self.c / self.d

    @property
    def tau_mean(self):
        return self.c0 / self.d0

    def means(self):
        """Matricized factor means ``M_l`` of shape ``(m_l, k)``."""
        return [f.mean_matrix for f in self.factors]

    def copy(self):
        return PosteriorState(
            [GaussianVecPosterior(f.mean.copy(), f.cov.copy(), f.m, f.k) for f in self.factors],
            self.c.copy(), self.d.copy(), self.c0, self.d0,
            self.components.copy(), self.iteration,
        )


@dataclass
class RunOptions:
    max_iterations: int = 100
    tolerance: float = 0.0
    prune: bool = False
    prune_threshold: float = 1e3
    seed: int = 0
    snapshot_every: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.max_iterations) < 1:
            raise ValidationError("max_iterations must be >= 1")
        if self.tolerance < 0:
            raise ValidationError("tolerance must be nonnegative")
        if self.prune_threshold <= 0:
            raise ValidationError("prune_threshold must be positive")


def column_rank(g):
    """Numerical column rank via column-pivoted QR."""
    g = np.asarray(g, dtype=float)
    if g.size == 0:
        return 0
    r = qr(g, mode="r", pivoting=True)[0]
    diag = np.abs(np.diag(r))
    return int(np.sum(diag > RANK_RTOL * np.linalg.norm(g, 2)))


def _parse_observations(observations, d):
    if isinstance(observations, tuple) and len(observations) == 2 and isinstance(observations[0], np.ndarray):
        idx, vals = observations
    else:
        observations = list(observations)
        idx = [o[0] for o in observations]
        vals = [o[1] for o in observations]
    idx = np.asarray(idx, dtype=np.int64).reshape(-1, d)
    vals = np.asarray(vals, dtype=float).reshape(-1)
    if idx.shape[0] != vals.shape[0]:
        raise ValidationError(f"{idx.shape[0]} indices but {vals.shape[0]} values")
    return idx, vals


def new_problem(side_info, observations, k, hyperpriors=None, shape=None, orthonormalize=False):
    """Validate inputs and build a :class:`CompletionProblem`.

    Parameters
    ----------
    side_info : sequence
        One ``(n_l, m_l)`` matrix per mode.  ``None`` for a mode means no
        side information, i.e. the identity of size ``shape[l]``.
    observations : sequence of (index, value), or a tuple ``(indices, values)`` of arrays
    k : int
        Rank prediction.
    hyperpriors : Hyperpriors, optional
        Defaults to ``1e-6`` everywhere.
    shape : sequence of int, optional
        Mode sizes, required for modes with ``None`` side information.
    orthonormalize : bool
        Replace every ``G_l`` by an orthonormal basis of its column span.
    """
    side_info = list(side_info)
    d = len(side_info)
    if d < 1:
        raise ValidationError("need at least one mode")
    if int(k) < 1:
        raise ValidationError(f"rank prediction k must be >= 1, got {k}")
    k = int(k)
    mats, identity = [], []
    for l, g in enumerate(side_info):
        if g is None:
            if shape is None:
                raise ValidationError(f"mode {l}: identity side info needs an explicit shape")
            g = np.eye(int(shape[l]))
            identity.append(l)
        g = np.array(g, dtype=float)
        if g.ndim != 2 or g.shape[1] < 1:
            raise ValidationError(f"mode {l}: side info must be a nonempty 2-D matrix")
        if not np.all(np.isfinite(g)):
            raise ValidationError(f"mode {l}: side info has non-finite entries")
        if g.shape[1] > g.shape[0]:
            raise ValidationError(f"mode {l}: m_l={g.shape[1]} exceeds n_l={g.shape[0]}")
        if column_rank(g) < g.shape[1]:
            raise ValidationError(f"mode {l}: side info is rank deficient")
        if orthonormalize and l not in identity:
            g = np.linalg.qr(g)[0]
        if shape is not None and g.shape[0] != int(shape[l]):
            raise ValidationError(f"mode {l}: side info has {g.shape[0]} rows, shape says {shape[l]}")
        mats.append(_frozen(g))
    idx, vals = _parse_observations(observations, d)
    sizes = np.array([g.shape[0] for g in mats])
    bad = np.nonzero(np.any((idx < 0) | (idx >= sizes), axis=1))[0]
    if bad.size:
        i = int(bad[0])
        where = tuple(int(v) for v in idx[i])
        raise ValidationError(f"observation {i} index {where} outside shape {tuple(sizes.tolist())}")
    if not np.all(np.isfinite(vals)):
        raise ValidationError("observed values must be finite")
    if hyperpriors is None:
        hyperpriors = Hyperpriors.default(k)
    hp = Hyperpriors(
        _frozen(np.broadcast_to(hyperpriors.a_j, (k,))),
        _frozen(np.broadcast_to(hyperpriors.b_j, (k,))),
        float(hyperpriors.a0), float(hyperpriors.b0),
    )
    if np.any(hp.a_j <= 0) or np.any(hp.b_j <= 0) or hp.a0 <= 0 or hp.b0 <= 0:
        raise ValidationError("hyperprior parameters must be positive")
    return CompletionProblem(tuple(mats), _frozen(idx, np.int64), _frozen(vals), k, hp, tuple(identity))


def init_posterior(problem, seed):
    """Standard-normal means, identity covariances, all Gamma parameters ``1e-6``."""
    rng = make_rng(seed)
    k = problem.k
    factors = []
    for m in problem.m:
        factors.append(GaussianVecPosterior(rng.standard_normal(m * k), np.eye(m * k), m, k))
    return PosteriorState(
        factors, np.full(k, INIT_GAMMA), np.full(k, INIT_GAMMA), INIT_GAMMA, INIT_GAMMA
    )


# -- file formats -------------------------------------------------------------


def problem_to_dict(problem):
    return {
        "d": problem.d,
        "n": list(problem.shape),
        "m": list(problem.m),
        "G": [g.tolist() for g in problem.side_info],
        "omega": [[list(map(int, i)), float(v)] for i, v in zip(problem.indices, problem.values)],
        "k": problem.k,
        "hyper": {
            "a_j": problem.hyper.a_j.tolist(),
            "b_j": problem.hyper.b_j.tolist(),
            "a0": problem.hyper.a0,
            "b0": problem.hyper.b0,
        },
    }


def problem_from_dict(doc):
    required = ["d", "n", "m", "G", "omega", "k"]
    missing = [key for key in required if key not in doc]
    if missing:
        raise ValidationError(f"problem file missing keys: {', '.join(missing)}")
    d = int(doc["d"])
    if len(doc["G"]) != d or len(doc["n"]) != d or len(doc["m"]) != d:
        raise ValidationError("d does not match the lengths of n, m and G")
    side = []
    for l, g in enumerate(doc["G"]):
        g = None if g is None else np.asarray(g, dtype=float).reshape(int(doc["n"][l]), int(doc["m"][l]))
        side.append(g)
    k = int(doc["k"])
    h = doc.get("hyper", {})
    hyper = Hyperpriors(
        np.asarray(h.get("a_j", DEFAULT_HYPER), dtype=float),
        np.asarray(h.get("b_j", DEFAULT_HYPER), dtype=float),
        float(h.get("a0", DEFAULT_HYPER)),
        float(h.get("b0", DEFAULT_HYPER)),
    )
    omega = doc["omega"]
    if omega:
        obs = (np.array([o[0] for o in omega]), np.array([o[1] for o in omega]))
    else:
        obs = (np.zeros((0, d), dtype=np.int64), np.zeros(0))
    return new_problem(side, obs, k, hyper, shape=doc["n"])


def save_problem(problem, path, extra=None):
    doc = problem_to_dict(problem)
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_problem(path):
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
    return problem_from_dict(doc)


def state_to_dict(state):
    return {
        "mu": [f.mean.tolist() for f in state.factors],
        "A": [f.cov.tolist() for f in state.factors],
        "m": [f.m for f in state.factors],
        "c": state.c.tolist(),
        "d": state.d.tolist(),
        "c0": state.c0,
        "d0": state.d0,
        "current_k": state.current_k,
        "components": state.components.tolist(),
        "iteration": state.iteration,
    }


def state_from_dict(doc):
    k = int(doc["current_k"])
    factors = []
    for l, (mu, a) in enumerate(zip(doc["mu"], doc["A"])):
        mu = np.asarray(mu, dtype=float)
        m = int(doc["m"][l]) if "m" in doc else mu.size // max(k, 1)
        factors.append(GaussianVecPosterior(mu, np.asarray(a, dtype=float).reshape(mu.size, mu.size), m, k))
    return PosteriorState(
        factors, doc["c"], doc["d"], float(doc["c0"]), float(doc["d0"]),
        doc.get("components"), int(doc.get("iteration", 0)),
    )


def save_state(state, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(state_to_dict(state), fh)


def load_state(path):
    with open(path, encoding="utf-8") as fh:
        return state_from_dict(json.load(fh))
