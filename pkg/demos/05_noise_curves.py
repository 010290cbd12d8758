"""
Attainable error under noise
============================

The final error grows with the noise standard deviation: lowering the SNR
by 6 dB roughly doubles it. Smaller side-information subspaces give lower
errors at the same sample count.
"""

from vbcomplete.experiments import emit_outputs, run_noise_study

config = {
    "model": {"d": 3, "n": 20, "r": 2},
    "sweep": {"snr_db": [20, 10, 0, -6], "omega": [1000], "m": [4, 10]},
    "algo": {"max_iterations": 80},
    "exec": {"trials": 3, "init_conditions": 1},
}

series = run_noise_study(config)
for label in series.curves:
    mean, p5, p95 = series.aggregate(label)
    cells = "  ".join(f"{x:>4g} dB: {v:.3f}" for x, v in zip(series.x, mean))
    print(f"{label:>16}  {cells}")

emit_outputs(series, "demo_out", "noise")
