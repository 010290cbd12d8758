"""
A small phase plot
==================

Success frequency over a grid of mode sizes and sample counts. With side
information the number of samples needed barely depends on n, so the
success boundary sits at the same sample count for both sizes. A run that
is still on its initial plateau when the budget ends counts as a failure.
Outputs go to ``demo_out/``.
"""

from vbcomplete.experiments import emit_outputs, run_phase_sweep

config = {
    "model": {"d": 3, "r": 2, "m": 5},
    "sweep": {
        "axis1": {"name": "n", "values": [20, 40]},
        "axis2": {"name": "omega", "values": [50, 100, 200, 400]},
    },
    "algo": {"max_iterations": 150},
    "exec": {"trials": 3, "init_conditions": 2, "base_seed": 1},
}

grid = run_phase_sweep(config)
print("success frequency (rows n, columns |omega|):")
print(grid.success_frequency)
print("first omega position reaching 0.8 per n:", grid.threshold(0.8))

for path in emit_outputs(grid, "demo_out", "phase"):
    print("wrote", path)
