"""
Automatic rank determination
============================

The working rank k only needs to be an upper bound. Columns that are not
supported by the data get large precision means, so they can be counted
out with a threshold or pruned away during the run.
"""

import numpy as np

from vbcomplete.engine import determine_rank, predict_batch, run
from vbcomplete.model import RunOptions
from vbcomplete.synth import gen_instance, relative_test_rmse

inst = gen_instance(d=3, n=30, r=2, m=5, k=6, omega_size=3000, snr_db=20, seed=0)
problem = inst.problem

state, _ = run(problem, RunOptions(max_iterations=400))
print("lambda means:", np.round(state.lambda_means, 3))
for eps in (0.05, 0.01):
    print(f"determined rank at eps={eps}: {determine_rank(state, eps)}")

# the same run with pruning drops the surplus columns as it goes
pruned, _ = run(problem, RunOptions(max_iterations=400, prune=True, prune_threshold=1e3))
print("working rank after pruning:", pruned.current_k, "kept columns", pruned.components.tolist())
for label, s in (("full", state), ("pruned", pruned)):
    err = relative_test_rmse(inst, lambda idx, s=s: predict_batch(problem, s, idx)[0])
    print(f"{label:>6} test RMSE {err:.4e}")
