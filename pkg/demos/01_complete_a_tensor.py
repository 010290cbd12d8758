"""
Completing a tensor with side information
=========================================

A rank-2 tensor of size 30 x 30 x 30 is built from 5-dimensional subspaces
per mode. We observe 1500 of its 27000 entries and recover the rest.
"""

import numpy as np

from vbcomplete.engine import predict_batch, reconstruct_mean, run
from vbcomplete.model import RunOptions
from vbcomplete.synth import gen_instance, relative_test_rmse

# a noiseless instance; the side info G_l and the small factors U_l are standard normal
inst = gen_instance(d=3, n=30, r=2, m=5, omega_size=1500, seed=7)
problem = inst.problem
print("observed entries:", problem.n_obs, "of", np.prod(problem.shape))

# run the variational updates; the trace reports one record per sweep
state, reports = run(problem, RunOptions(max_iterations=150, seed=0))
for rep in reports[::30]:
    print(f"sweep {rep.iteration:3d}  max change {rep.max_relative_mean_change:.2e}  tau {rep.tau_mean:.3e}")

# error on an independent set of test entries
err = relative_test_rmse(inst, lambda idx: predict_batch(problem, state, idx)[0])
print(f"relative test RMSE: {err:.2e}")

# the full posterior-mean tensor is cheap at this size
X = reconstruct_mean(problem, state)
print("reconstruction shape:", X.shape)
