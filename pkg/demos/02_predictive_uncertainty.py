"""
Predictive uncertainty for missing entries
==========================================

Every entry, observed or not, gets an approximate Student's t law. With
noisy observations the 90% intervals should cover roughly 90% of the
noisy test values.
"""

import numpy as np
from scipy import stats

from vbcomplete.engine import predict_batch, predict_entry, run
from vbcomplete.model import RunOptions
from vbcomplete.synth import gen_instance

inst = gen_instance(d=3, n=25, r=2, m=5, omega_size=2000, snr_db=10, seed=3)
problem = inst.problem
state, _ = run(problem, RunOptions(max_iterations=100))

t = predict_entry(problem, state, (0, 1, 2))
print(f"entry (0, 1, 2): location {t.location:.4f}, sd {np.sqrt(t.variance):.4f}, dof {t.dof:.0f}")
print(f"true clean value: {inst.truth_at([(0, 1, 2)])[0]:.4f}")

# coverage of noisy test values from the same noise level
loc, prec, dof = predict_batch(problem, state, inst.test_indices)
rng = np.random.default_rng(0)
noisy = inst.test_values + inst.noise_sigma * rng.standard_normal(inst.test_values.size)
half = stats.t.ppf(0.95, dof) / np.sqrt(prec)
inside = np.abs(noisy - loc) <= half
print(f"90% interval coverage on {noisy.size} test entries: {inside.mean():.3f}")
