"""Random low-rank CP instances with side information, and the test-set error metric."""

from dataclasses import dataclass

import numpy as np

from .model import ValidationError, make_rng, new_problem, problem_to_dict

__all__ = [
    "SyntheticInstance",
    "gen_instance",
    "relative_test_rmse",
    "instance_to_dict",
    "DegenerateInstanceError",
]


class DegenerateInstanceError(ValueError):
    """The clean test values are all zero."""


@dataclass
class SyntheticInstance:
    problem: object
    truth_factors: list  # (m, r) each, or (n, r) without side information
    side_info: list  # None per mode when absent
    test_indices: np.ndarray
    test_values: np.ndarray
    snr_db: object
    noise_sigma: float
    seed: int

    def truth_images(self):
        """``G_l U_l`` (or ``U_l``) of shape ``(n_l, r)``."""
        return [u if g is None else g @ u for g, u in zip(self.side_info, self.truth_factors)]

    def truth_at(self, indices):
        """Exact entries at ``indices`` of shape ``(N, d)``, without forming the tensor."""
        indices = np.asarray(indices, dtype=np.int64).reshape(-1, len(self.truth_factors))
        acc = None
        for l, F in enumerate(self.truth_images()):
            rows = F[indices[:, l]]
            acc = rows if acc is None else acc * rows
        return acc.sum(axis=1)

    @property
    def overlap_fraction(self):
        """Fraction of test indices that also occur in the training set."""
        train = {tuple(i) for i in self.problem.indices.tolist()}
        hits = sum(tuple(i) in train for i in self.test_indices.tolist())
        return hits / max(len(self.test_indices), 1)


def gen_instance(d, n, r, m=None, k=None, omega_size=1, snr_db=None, seed=0, hyperpriors=None):
    """Draw a rank-``r`` instance with i.i.d. standard normal factors and side info.

    ``n`` and ``m`` may be scalars (same for all modes) or per-mode sequences;
    ``m=None`` gives the no-side-information case with ``(n, r)`` factors.
    Training and test index sets are drawn uniformly with replacement and
    independently of each other.  The noise standard deviation is set from
    the variance of the clean values at the training indices.
    """
    d = int(d)
    if d < 1 or r < 1 or omega_size < 0:
        raise ValidationError(f"invalid sizes d={d}, r={r}, omega_size={omega_size}")
    ns = [int(x) for x in np.broadcast_to(n, (d,))]
    ms = None if m is None else [int(x) for x in np.broadcast_to(m, (d,))]
    k = r if k is None else int(k)
    if ms is not None and any(mm > nn for mm, nn in zip(ms, ns)):
        raise ValidationError(f"side info size {ms} exceeds mode sizes {ns}")
    if r > (min(ms) if ms is not None else min(ns)):
        raise ValidationError(f"rank r={r} exceeds the factor row count")
    rng = make_rng(seed)
    if ms is None:
        factors = [rng.standard_normal((nn, r)) for nn in ns]
        side = [None] * d
    else:
        factors = [rng.standard_normal((mm, r)) for mm in ms]
        side = [rng.standard_normal((nn, mm)) for nn, mm in zip(ns, ms)]
    train = np.column_stack([rng.integers(0, nn, size=omega_size) for nn in ns]).astype(np.int64)
    test = np.column_stack([rng.integers(0, nn, size=omega_size) for nn in ns]).astype(np.int64)
    inst = SyntheticInstance(None, factors, side, test, None, snr_db, 0.0, seed)
    clean = inst.truth_at(train) if omega_size else np.zeros(0)
    sigma = 0.0
    values = clean
    if snr_db is not None and omega_size:
        sigma = float(np.sqrt(np.var(clean) / 10.0 ** (snr_db / 10.0)))
        values = clean + sigma * rng.standard_normal(omega_size)
    inst.noise_sigma = sigma
    inst.test_values = inst.truth_at(test) if omega_size else np.zeros(0)
    inst.problem = new_problem(side, (train, values), k, hyperpriors, shape=ns)
    return inst


def relative_test_rmse(instance, reconstruction_at):
    """``||P_test(X - Xhat)|| / ||P_test X||`` with test multiplicities.

    ``reconstruction_at`` maps an ``(N, d)`` index array to predicted values.
    """
    x = instance.test_values
    if x.size == 0:
        raise DegenerateInstanceError("empty test set")
    denom = np.linalg.norm(x)
    if denom == 0:
        raise DegenerateInstanceError("test values are all zero")
    xhat = np.asarray(reconstruction_at(instance.test_indices), dtype=float)
    return float(np.linalg.norm(x - xhat) / denom)


def instance_to_dict(instance):
    """Problem file document plus a ``truth`` section."""
    doc = problem_to_dict(instance.problem)
    doc["truth"] = {
        "factors": [u.tolist() for u in instance.truth_factors],
        "seed": int(instance.seed),
        "snr_db": instance.snr_db,
        "sigma": instance.noise_sigma,
        "test_omega": instance.test_indices.tolist(),
        "test_values": instance.test_values.tolist(),
        "overlap_fraction": instance.overlap_fraction,
    }
    return doc
