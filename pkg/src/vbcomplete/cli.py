"""Command-line entry point.

Exit codes: 0 success, 2 validation, 3 numerical, 4 io.  Progress goes to
stderr; stdout carries a JSON manifest of the files written.
"""

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np
import yaml

from .core_linalg import NumericalError
from .engine import determine_rank, predict_batch, reconstruct_mean, run, trace_header
from .experiments import ConfigError, _merge, emit_outputs, run_study
from .model import RNG_ALGORITHM, RunOptions, ValidationError, load_problem, load_state, save_state

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
STUDIES = ("phase", "converge", "noise", "rank")

COMPLETE_DEFAULTS = {
    "algo": {
        "max_iterations": 100, "tolerance": 1e-10, "prune": False,
        "prune_threshold": 1e3, "epsilon": 0.05, "snapshot_every": 0,
    },
    "exec": {"base_seed": 0},
    "out": {"dir": "out"},
}

log = logging.getLogger("vbcomplete")


def _load_config(path):
    if path is None:
        return {}
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ValidationError(f"{path}: cannot parse config ({exc})") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: top level must be a mapping")
    return doc


def apply_overrides(cfg, overrides):
    """Apply ``section.key=value`` strings in place; values are parsed as YAML scalars/lists."""
    for item in overrides or []:
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not of the form key=value")
        path, raw = item.split("=", 1)
        keys = path.strip().split(".")
        node = cfg
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ValidationError(f"override {path}: {key} is not a section")
        node[keys[-1]] = yaml.safe_load(raw)
    return cfg


def _settings(args):
    cfg = apply_overrides(_load_config(args.config), args.override)
    if args.seed is not None:
        cfg.setdefault("exec", {})["base_seed"] = args.seed
    if args.out is not None:
        cfg.setdefault("out", {})["dir"] = args.out
    return cfg


def cmd_complete(args):
    cfg = _settings(args)
    problems = []
    cfg = _merge(COMPLETE_DEFAULTS, cfg, "", problems)
    if problems:
        raise ConfigError(problems)
    a = cfg["algo"]
    try:
        options = RunOptions(
            max_iterations=int(a["max_iterations"]), tolerance=float(a["tolerance"]),
            prune=bool(a["prune"]), prune_threshold=float(a["prune_threshold"]),
            seed=int(cfg["exec"]["base_seed"]), snapshot_every=int(a["snapshot_every"]),
        )
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from exc
    problem = load_problem(args.problem)
    out = cfg["out"]["dir"]
    os.makedirs(out, exist_ok=True)
    written = []

    def on_sweep(state, report):
        log.info("iteration %d  max_rel_change %.3e  tau %.3e  k %d",
                 report.iteration, report.max_relative_mean_change, report.tau_mean, state.current_k)
        if options.snapshot_every and report.iteration % options.snapshot_every == 0:
            os.makedirs(os.path.join(out, "snapshots"), exist_ok=True)
            p = os.path.join(out, "snapshots", f"iter_{report.iteration:05d}.json")
            save_state(state, p)
            written.append(p)

    state, reports = run(problem, options, on_sweep=on_sweep)
    snap = os.path.join(out, "snapshot.json")
    save_state(state, snap)
    trace = os.path.join(out, "trace.csv")
    with open(trace, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trace_header(problem.k))
        for rep in reports:
            w.writerow(["" if v is None else repr(v) if isinstance(v, float) else v
                        for v in rep.as_record(problem.k)])
    written += [snap, trace]
    if args.reconstruct:
        p = os.path.join(out, "reconstruction.npy")
        np.save(p, reconstruct_mean(problem, state))
        written.append(p)
    if args.index:
        p = os.path.join(out, "predictions.csv")
        _write_predictions(problem, state, _parse_indices(args.index, problem.d), p)
        written.append(p)
    manifest = {
        "outputs": written,
        "iterations": len(reports),
        "current_k": state.current_k,
        "determined_rank": determine_rank(state, float(a["epsilon"])),
        "rng": RNG_ALGORITHM,
    }
    print(json.dumps(manifest))
    return EXIT_OK


def _parse_indices(items, d):
    out = []
    for item in items:
        try:
            idx = [int(x) for x in item.split(",")]
        except ValueError as exc:
            raise ValidationError(f"bad index {item!r}") from exc
        if len(idx) != d:
            raise ValidationError(f"index {item!r} has {len(idx)} entries, expected {d}")
        out.append(idx)
    return np.array(out, dtype=np.int64)


def _write_predictions(problem, state, indices, path):
    try:
        loc, prec, dof = predict_batch(problem, state, indices)
    except IndexError as exc:
        raise ValidationError(str(exc)) from exc
    c0 = dof / 2.0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "location", "precision", "dof", "variance"])
        for idx, l, p in zip(indices, loc, prec):
            var = c0 / (p * (c0 - 1.0)) if c0 > 1 else float("nan")
            w.writerow([" ".join(map(str, idx)), repr(float(l)), repr(float(p)), repr(float(dof)), repr(float(var))])


def cmd_predict(args):
    problem = load_problem(args.problem)
    state = load_state(args.snapshot)
    indices = _parse_indices(args.index or [], problem.d)
    if len(indices) and (np.any(indices < 0) or np.any(indices >= np.asarray(problem.shape))):
        raise ValidationError("index outside tensor shape")
    out = args.out or "out"
    os.makedirs(out, exist_ok=True)
    p = os.path.join(out, "predictions.csv")
    _write_predictions(problem, state, indices, p)
    print(json.dumps({"outputs": [p]}))
    return EXIT_OK


def cmd_study(args):
    cfg = _settings(args)
    result = run_study(args.command, cfg)
    out = result.meta["config"]["out"]["dir"]
    paths = emit_outputs(result, out, args.command)
    print(json.dumps({"outputs": paths, "config_digest": result.meta["config_digest"]}))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="vbcomplete", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML or JSON configuration file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="base seed (exec.base_seed)")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override, repeatable")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")

    p = sub.add_parser("complete", help="run the completion on a problem file")
    p.add_argument("problem")
    common(p)
    p.add_argument("--reconstruct", action="store_true", help="write the full mean tensor")
    p.add_argument("--index", action="append", help="comma-separated index to predict, repeatable")
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("predict", help="predictive distributions from a snapshot")
    p.add_argument("problem")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--index", action="append", required=True)
    common(p)
    p.set_defaults(func=cmd_predict)

    for kind in STUDIES:
        p = sub.add_parser(kind, help=f"run the {kind} study")
        common(p)
        p.set_defaults(func=cmd_study)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ValidationError, MemoryError) as exc:
        print(f"error[validation]: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"error[numerical]: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
