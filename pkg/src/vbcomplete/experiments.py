"""Study harness: phase sweeps, convergence, noise and rank-determination curves.

Every run is addressed by (base seed, study, cell coordinates, trial, init)
and seeded from those alone, so results do not depend on scheduling.
Percentiles use the nearest-rank method.
"""

import copy
import csv
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .core_linalg import NumericalError
from .engine import UPDATE_ORDER, determine_rank, predict_batch, run
from .model import RNG_ALGORITHM, Hyperpriors, RunOptions, ValidationError, derive_seed, init_posterior
from .synth import DegenerateInstanceError, gen_instance, relative_test_rmse

__all__ = [
    "SUCCESS_THRESHOLD",
    "ConfigError",
    "PhaseGrid",
    "CurveSeries",
    "default_config",
    "validate_config",
    "config_digest",
    "nearest_rank_percentile",
    "run_phase_sweep",
    "run_convergence_study",
    "run_noise_study",
    "run_rank_study",
    "run_study",
    "emit_outputs",
]

log = logging.getLogger(__name__)

SUCCESS_THRESHOLD = 1e-6
STUDY_CODES = {"phase": 1, "converge": 2, "noise": 3, "rank": 4}

_BASE = {
    "model": {
        "d": 3, "n": 30, "r": 2, "k": None, "m": 5, "snr_db": None,
        "hyper": {"a_j": 1e-6, "b_j": 1e-6, "a0": 1e-6, "b0": 1e-6},
    },
    "algo": {
        "max_iterations": 150, "tolerance": 0.0, "prune": False,
        "prune_threshold": 1e3, "epsilon": 0.05,
    },
    "exec": {"trials": 5, "init_conditions": 2, "base_seed": 0, "parallelism": 1},
    "out": {"dir": "out"},
}

_SWEEPS = {
    "phase": {
        "axis1": {"name": "n", "values": [30, 60]},
        "axis2": {"name": "omega", "values": [250, 500, 1000, 2000, 4000]},
    },
    "converge": {"omega": [500, 1000]},
    "noise": {"snr_db": [20, 10, 0, -6, -10], "omega": [2000], "m": [5, 15]},
    "rank": {"snr_db": [20, 10, 0, -10], "omega": [3000], "epsilon": [0.05, 0.01]},
}

_AXIS_NAMES = ("n", "r", "m", "k", "omega", "snr_db")


class ConfigError(ValidationError):
    """Configuration problems; ``problems`` lists every offending key."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration: " + "; ".join(self.problems))


def default_config(kind):
    if kind not in STUDY_CODES:
        raise ConfigError([f"unknown study kind {kind!r}"])
    cfg = copy.deepcopy(_BASE)
    cfg["sweep"] = copy.deepcopy(_SWEEPS[kind])
    return cfg


def _merge(defaults, given, path, problems):
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        dotted = f"{path}.{key}" if path else key
        if key not in defaults:
            problems.append(f"unknown key {dotted}")
        elif isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                problems.append(f"{dotted} must be a section")
            else:
                out[key] = _merge(defaults[key], value, dotted, problems)
        else:
            out[key] = value
    return out


def validate_config(kind, given=None):
    """Merge ``given`` over the defaults for ``kind``; report all problems at once."""
    cfg = default_config(kind)
    problems = []
    cfg = _merge(cfg, given or {}, "", problems)
    m, a, e = cfg["model"], cfg["algo"], cfg["exec"]
    for key in ("d", "n", "r"):
        if not isinstance(m[key], int) or m[key] < 1:
            problems.append(f"model.{key} must be a positive integer")
    if m["m"] is not None and (not isinstance(m["m"], int) or m["m"] < 1):
        problems.append("model.m must be a positive integer or null")
    if not isinstance(a["max_iterations"], int) or a["max_iterations"] < 1:
        problems.append("algo.max_iterations must be an integer >= 1")
    if not 0 < float(a["epsilon"]) <= 1:
        problems.append("algo.epsilon must be in (0, 1]")
    for key in ("trials", "init_conditions", "parallelism"):
        if not isinstance(e[key], int) or e[key] < 1:
            problems.append(f"exec.{key} must be a positive integer")
    if not isinstance(e["base_seed"], int) or e["base_seed"] < 0:
        problems.append("exec.base_seed must be a nonnegative integer")
    if kind == "phase":
        for ax in ("axis1", "axis2"):
            axis = cfg["sweep"][ax]
            if axis.get("name") not in _AXIS_NAMES:
                problems.append(f"sweep.{ax}.name must be one of {', '.join(_AXIS_NAMES)}")
            if not axis.get("values"):
                problems.append(f"sweep.{ax}.values must be a nonempty list")
            extra = set(axis) - {"name", "values"}
            problems.extend(f"unknown key sweep.{ax}.{x}" for x in sorted(extra))
    else:
        for key, values in cfg["sweep"].items():
            if not isinstance(values, list) or not values:
                problems.append(f"sweep.{key} must be a nonempty list")
    if problems:
        raise ConfigError(problems)
    return cfg


def config_digest(cfg):
    """SHA-256 over everything that influences results (output dir and parallelism excluded)."""
    core = copy.deepcopy(cfg)
    core.pop("out", None)
    core.get("exec", {}).pop("parallelism", None)
    blob = json.dumps(core, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def nearest_rank_percentile(values, p):
    """Smallest value with at least ``p`` percent of the sample at or below it."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        return math.nan
    rank = max(1, math.ceil(p / 100.0 * v.size))
    return float(v[rank - 1])


@dataclass
class PhaseGrid:
    axis1_name: str
    axis1_values: list
    axis2_name: str
    axis2_values: list
    n_success: np.ndarray
    n_runs: np.ndarray
    records: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def success_frequency(self):
        with np.errstate(invalid="ignore"):
            return np.where(self.n_runs > 0, self.n_success / np.maximum(self.n_runs, 1), np.nan)

    def threshold(self, level=0.8):
        """Per axis1 value, the first axis2 position whose frequency reaches ``level`` (or None)."""
        freq = self.success_frequency
        out = []
        for row in freq:
            hits = np.nonzero(row >= level)[0]
            out.append(int(hits[0]) if hits.size else None)
        return out


@dataclass
class CurveSeries:
    """Per-run curves grouped by label; ``curves[label]`` has shape ``(runs, len(x))``."""

    x_name: str
    x: list
    y_name: str
    curves: dict
    meta: dict = field(default_factory=dict)

    def aggregate(self, label):
        y = np.asarray(self.curves[label], dtype=float)
        mean = y.mean(axis=0)
        p5 = np.array([nearest_rank_percentile(y[:, i], 5) for i in range(y.shape[1])])
        p95 = np.array([nearest_rank_percentile(y[:, i], 95) for i in range(y.shape[1])])
        return mean, p5, p95


# -- run execution --------------------------------------------------------------


def _hyper(cfg, k):
    h = cfg["model"]["hyper"]
    return Hyperpriors(np.full(k, float(h["a_j"])), np.full(k, float(h["b_j"])), float(h["a0"]), float(h["b0"]))


def _options(cfg, seed):
    a = cfg["algo"]
    return RunOptions(
        max_iterations=int(a["max_iterations"]), tolerance=float(a["tolerance"]),
        prune=bool(a["prune"]), prune_threshold=float(a["prune_threshold"]), seed=seed,
    )


def _snr(value):
    if value is None:
        return None
    value = float(value)
    return None if math.isinf(value) else value


def _instance(cfg, overrides, seed):
    p = dict(cfg["model"])
    p.update(overrides)
    k = p["r"] if p.get("k") is None else p["k"]
    return gen_instance(
        p["d"], p["n"], p["r"], p["m"], k, int(p["omega"]), _snr(p.get("snr_db")), seed,
        hyperpriors=_hyper(cfg, k),
    )


def _rmse(inst, state):
    return relative_test_rmse(inst, lambda idx: predict_batch(inst.problem, state, idx)[0])


def _task(args):
    """One (instance, init) completion; numerical failures are returned as flags."""
    kind, cfg, overrides, inst_seed, init_seeds = args
    out = []
    try:
        inst = _instance(cfg, overrides, inst_seed)
    except (DegenerateInstanceError, ValidationError) as exc:
        return [{"failed": True, "error": str(exc)} for _ in init_seeds]
    for seed in init_seeds:
        rec = {"failed": False, "error": ""}
        trace = []
        try:
            if kind == "converge":
                trace.append(_rmse(inst, init_posterior(inst.problem, seed)))
                cb = lambda st, rep: trace.append(_rmse(inst, st))  # noqa: E731
            else:
                cb = None
            state, reports = run(inst.problem, _options(cfg, seed), on_sweep=cb)
            rec["rmse"] = _rmse(inst, state)
            rec["iterations"] = len(reports)
            rec["final_k"] = state.current_k
            rec["ranks"] = {str(e): determine_rank(state, float(e)) for e in overrides.get("_epsilons", [])}
        except (NumericalError, DegenerateInstanceError, np.linalg.LinAlgError, FloatingPointError) as exc:
            rec.update(failed=True, error=str(exc), rmse=math.nan)
        rec["trace"] = trace
        rec["overlap"] = inst.overlap_fraction if inst.test_indices.size else 0.0
        out.append(rec)
    return out


def _execute(tasks, parallelism):
    if parallelism > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            return list(pool.map(_task, tasks))
    return [_task(t) for t in tasks]


def _seeds(cfg, kind, coords, trial):
    base = cfg["exec"]["base_seed"]
    code = STUDY_CODES[kind]
    inst = derive_seed(base, code, *coords, trial, 0)
    inits = [derive_seed(base, code, *coords, trial, 1 + ic) for ic in range(cfg["exec"]["init_conditions"])]
    return inst, inits


def _meta(cfg, kind, extra=None):
    meta = {
        "study": kind,
        "config_digest": config_digest(cfg),
        "base_seed": cfg["exec"]["base_seed"],
        "rng": RNG_ALGORITHM,
        "update_order": UPDATE_ORDER,
        "success_threshold": SUCCESS_THRESHOLD,
        "snr_definition": "10*log10(var of clean sampled values / sigma^2)",
        "percentile_method": "nearest-rank",
        "tool_version": __version__,
        "config": cfg,
    }
    meta.update(extra or {})
    return meta


def run_phase_sweep(config):
    """Success frequency over an (axis1, axis2) grid of noiseless completions."""
    cfg = validate_config("phase", config)
    ax1, ax2 = cfg["sweep"]["axis1"], cfg["sweep"]["axis2"]
    trials = cfg["exec"]["trials"]
    tasks, keys = [], []
    for i, v1 in enumerate(ax1["values"]):
        for j, v2 in enumerate(ax2["values"]):
            overrides = {ax1["name"]: v1, ax2["name"]: v2}
            for t in range(trials):
                inst_seed, inits = _seeds(cfg, "phase", (i, j), t)
                tasks.append(("phase", cfg, overrides, inst_seed, inits))
                keys.append((i, j, t))
    results = _execute(tasks, cfg["exec"]["parallelism"])
    n_success = np.zeros((len(ax1["values"]), len(ax2["values"])), dtype=int)
    n_runs = np.zeros_like(n_success)
    records = []
    for (i, j, t), recs in zip(keys, results):
        for ic, rec in enumerate(recs):
            ok = (not rec["failed"]) and rec["rmse"] < SUCCESS_THRESHOLD
            n_success[i, j] += int(ok)
            n_runs[i, j] += 1
            records.append({
                "axis1": ax1["values"][i], "axis2": ax2["values"][j], "trial": t, "init": ic,
                "rmse": rec.get("rmse", math.nan), "success": int(ok), "failed": int(rec["failed"]),
            })
        log.info("phase cell %s=%s %s=%s trial %d done", ax1["name"], ax1["values"][i], ax2["name"], ax2["values"][j], t)
    return PhaseGrid(ax1["name"], list(ax1["values"]), ax2["name"], list(ax2["values"]),
                     n_success, n_runs, records, _meta(cfg, "phase"))


def run_convergence_study(config):
    """Relative test RMSE after every iteration, one curve per (trial, init)."""
    cfg = validate_config("converge", config)
    omegas = cfg["sweep"]["omega"]
    trials = cfg["exec"]["trials"]
    tasks, keys = [], []
    for i, om in enumerate(omegas):
        for t in range(trials):
            inst_seed, inits = _seeds(cfg, "converge", (i,), t)
            tasks.append(("converge", cfg, {"omega": om}, inst_seed, inits))
            keys.append((i, t))
    results = _execute(tasks, cfg["exec"]["parallelism"])
    n_x = cfg["algo"]["max_iterations"] + 1
    curves, pairing = {}, {}
    for (i, t), recs in zip(keys, results):
        label = f"omega={omegas[i]}"
        for ic, rec in enumerate(recs):
            tr = list(rec.get("trace", []))
            # early-stopped or failed runs are padded with their last value
            tr = (tr + [tr[-1] if tr else math.nan] * n_x)[:n_x]
            curves.setdefault(label, []).append(tr)
            pairing.setdefault(label, []).append({"trial": t, "init": ic, "style": "solid" if ic == 0 else "dashed",
                                                  "failed": rec["failed"]})
    curves = {k: np.array(v) for k, v in curves.items()}
    return CurveSeries("iteration", list(range(n_x)), "relative_test_rmse", curves,
                       _meta(cfg, "converge", {"pairing": pairing}))


def run_noise_study(config):
    """Final relative test RMSE against SNR for every (m, omega) pair.

    Instances at different SNR share every random draw (common random
    numbers); only the noise scale changes.
    """
    cfg = validate_config("noise", config)
    sw = cfg["sweep"]
    trials = cfg["exec"]["trials"]
    tasks, keys = [], []
    for a, m in enumerate(sw["m"]):
        for b, om in enumerate(sw["omega"]):
            for s, snr in enumerate(sw["snr_db"]):
                for t in range(trials):
                    inst_seed, inits = _seeds(cfg, "noise", (a, b), t)
                    tasks.append(("noise", cfg, {"m": m, "omega": om, "snr_db": snr}, inst_seed, inits))
                    keys.append((a, b, s, t))
    results = _execute(tasks, cfg["exec"]["parallelism"])
    n_ic = cfg["exec"]["init_conditions"]
    curves = {}
    for a, m in enumerate(sw["m"]):
        for b, om in enumerate(sw["omega"]):
            curves[f"m={m},omega={om}"] = np.full((trials * n_ic, len(sw["snr_db"])), math.nan)
    for (a, b, s, t), recs in zip(keys, results):
        label = f"m={sw['m'][a]},omega={sw['omega'][b]}"
        for ic, rec in enumerate(recs):
            curves[label][t * n_ic + ic, s] = rec.get("rmse", math.nan)
    x = [math.inf if _snr(v) is None else float(v) for v in sw["snr_db"]]
    return CurveSeries("snr_db", x, "relative_test_rmse", curves, _meta(cfg, "noise"))


def run_rank_study(config):
    """Determined rank against SNR for every (epsilon, omega) pair."""
    cfg = validate_config("rank", config)
    sw = cfg["sweep"]
    trials = cfg["exec"]["trials"]
    tasks, keys = [], []
    for b, om in enumerate(sw["omega"]):
        for s, snr in enumerate(sw["snr_db"]):
            for t in range(trials):
                inst_seed, inits = _seeds(cfg, "rank", (b,), t)
                ov = {"omega": om, "snr_db": snr, "_epsilons": list(sw["epsilon"])}
                tasks.append(("rank", cfg, ov, inst_seed, inits))
                keys.append((b, s, t))
    results = _execute(tasks, cfg["exec"]["parallelism"])
    n_ic = cfg["exec"]["init_conditions"]
    curves = {}
    for e in sw["epsilon"]:
        for om in sw["omega"]:
            curves[f"eps={e},omega={om}"] = np.full((trials * n_ic, len(sw["snr_db"])), math.nan)
    for (b, s, t), recs in zip(keys, results):
        for ic, rec in enumerate(recs):
            for e in sw["epsilon"]:
                value = rec.get("ranks", {}).get(str(e), math.nan)
                curves[f"eps={e},omega={sw['omega'][b]}"][t * n_ic + ic, s] = value
    x = [math.inf if _snr(v) is None else float(v) for v in sw["snr_db"]]
    return CurveSeries("snr_db", x, "determined_rank", curves, _meta(cfg, "rank"))


_RUNNERS = {
    "phase": run_phase_sweep,
    "converge": run_convergence_study,
    "noise": run_noise_study,
    "rank": run_rank_study,
}


def run_study(kind, config):
    if kind not in _RUNNERS:
        raise ConfigError([f"unknown study kind {kind!r}"])
    return _RUNNERS[kind](config)


# -- output -------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _svg_params():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "vbcomplete"
    return plt


def _plot_phase(grid, path):
    plt = _svg_params()
    fig, ax = plt.subplots(figsize=(5, 4))
    freq = grid.success_frequency
    im = ax.imshow(freq.T, origin="lower", aspect="auto", vmin=0, vmax=1, cmap="gray")
    ax.set_xticks(range(len(grid.axis1_values)), [str(v) for v in grid.axis1_values])
    ax.set_yticks(range(len(grid.axis2_values)), [str(v) for v in grid.axis2_values])
    ax.set_xlabel(grid.axis1_name)
    ax.set_ylabel(grid.axis2_name)
    fig.colorbar(im, ax=ax, label="success frequency")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _plot_curves(series, path):
    plt = _svg_params()
    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.array(series.x, dtype=float)
    if np.isinf(x).any():
        finite = x[np.isfinite(x)]
        x = np.where(np.isinf(x), (finite.max() + 10 if finite.size else 0), x)
    for label in series.curves:
        mean, p5, p95 = series.aggregate(label)
        line, = ax.plot(x, mean, label=label)
        ax.fill_between(x, p5, p95, color=line.get_color(), alpha=0.2)
    if series.y_name.endswith("rmse"):
        ax.set_yscale("log")
    ax.set_xlabel(series.x_name)
    ax.set_ylabel(series.y_name)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit_outputs(result, out_dir, name=None):
    """Write the data files with a metadata sidecar and a plot; return the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    name = name or result.meta.get("study", "study")
    paths = []

    def target(suffix):
        p = os.path.join(out_dir, name + suffix)
        paths.append(p)
        return p

    try:
        if isinstance(result, PhaseGrid):
            freq = result.success_frequency
            rows = []
            for i, v1 in enumerate(result.axis1_values):
                for j, v2 in enumerate(result.axis2_values):
                    rows.append([v1, v2, float(freq[i, j]), int(result.n_success[i, j]), int(result.n_runs[i, j])])
            _write_csv(target(".csv"), ["axis1", "axis2", "success_freq", "n_success", "n_runs"], rows)
            keys = ["axis1", "axis2", "trial", "init", "rmse", "success", "failed"]
            _write_csv(target("_runs.csv"), keys, [[r[k] for k in keys] for r in result.records])
            _plot_phase(result, target(".svg"))
        elif isinstance(result, CurveSeries):
            runs, band = [], []
            for label, y in result.curves.items():
                for r, row in enumerate(np.asarray(y)):
                    for x, v in zip(result.x, row):
                        runs.append([label, r, x, float(v)])
                mean, p5, p95 = result.aggregate(label)
                for x, a, b, c in zip(result.x, mean, p5, p95):
                    band.append([label, x, a, b, c])
            _write_csv(target("_runs.csv"), ["label", "run", result.x_name, result.y_name], runs)
            _write_csv(target("_band.csv"), ["label", result.x_name, "mean", "p5", "p95"], band)
            _plot_curves(result, target(".svg"))
        else:
            raise TypeError(f"cannot emit {type(result).__name__}")
        with open(target(".meta.json"), "w", encoding="utf-8") as fh:
            json.dump(result.meta, fh, indent=2, sort_keys=True, default=_json_default)
    except OSError as exc:
        raise OSError(f"writing outputs under {out_dir}: {exc}") from exc
    return paths


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)
