"""Command line front end: ``flame-iv {match,estimate,simulate,bench,oracle-check}``.

Settings resolve as command line flag, then ``FLAME_IV_<NAME>`` environment
variable, then the JSON ``--config`` file, then the built-in default. Every
command writes ``manifest.json`` into ``--out-dir`` recording the resolved
settings and SHA-256 digests of its inputs and outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .data import CoarseningSpec, coarsen_frame, dataset_from_frame, save_dataset, split_holdout
from .errors import ConfigurationError, FlameIVError
from .estimators import estimate_late, per_group_table, write_group_csv
from .matcher import MatchConfig, flame_iv_run
from .simgen import (
    METHODS,
    MODELS,
    DgpConfig,
    gen_dataset,
    gen_holdout,
    group_effect_pairs,
    run_benchmark,
    strength_sweep,
    write_group_pairs_csv,
    write_metrics_json,
    write_replications_csv,
    write_strength_csv,
)

log = logging.getLogger("flame_iv")

ENV_PREFIX = "FLAME_IV_"
EXIT_OK = 0
EXIT_USAGE = 2

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "out_dir": "out",
    "format": "json",
    # match
    "input": None,
    "holdout": 0.15,
    "early_stop": 0.05,
    "tradeoff_c": 0.1,
    "ridge": 1e-6,
    "coarsen": [],
    "role": [],
    # estimate
    "result": None,
    "level": 0.05,
    "strict": False,
    # simulate / bench
    "model": "linear",
    "n": 1000,
    "p": 10,
    "important": 8,
    "pi": 1.0,
    "pis": None,
    "intercept": 0.0,
    "rho": 0.3,
    "noise_sd": 0.8,
    "outcome_sd": 0.0,
    "instrument_mode": "randomized",
    "holdout_n": None,
    "methods": "flame-iv,2sls",
    "reps": 100,
    # oracle-check
    "instances": 200,
}

FLOATS = {"holdout", "tradeoff_c", "ridge", "level", "pi", "intercept", "rho", "noise_sd", "outcome_sd"}
INTS = {"seed", "threads", "n", "p", "important", "reps", "instances", "holdout_n"}


class UsageError(FlameIVError):
    exit_code = EXIT_USAGE


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p):
    p.add_argument("--config", help="JSON file with default settings")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("-v", "--verbose", action="store_true")


def _add_match_flags(p):
    p.add_argument("--early-stop", type=_early_stop, help="PE inflation tolerance, or 'off'")
    p.add_argument("--tradeoff-c", type=float)
    p.add_argument("--ridge", type=float)


def _early_stop(value):
    if value.lower() in ("off", "none"):
        return "off"
    return float(value)


def _add_dgp_flags(p):
    p.add_argument("--model", help=f"one of {', '.join(MODELS)}")
    p.add_argument("--n", type=int, help="units per instrument arm")
    p.add_argument("--p", type=int)
    p.add_argument("--important", type=int)
    p.add_argument("--pi", type=float, help="instrument strength")
    p.add_argument("--intercept", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--noise-sd", type=float)
    p.add_argument("--outcome-sd", type=float)
    p.add_argument("--instrument-mode", choices=("randomized", "confounded"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flame-iv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("match", help="split off a holdout set and run FLAME-IV")
    _add_common(p)
    p.add_argument("--input")
    p.add_argument("--holdout", type=float)
    _add_match_flags(p)
    p.add_argument("--coarsen", action="append", help="COLUMN=BINS, repeatable")
    p.add_argument("--role", action="append", help="COLUMN=ROLE, repeatable")

    p = sub.add_parser("estimate", help="pooled and per-group LATE from a match result")
    _add_common(p)
    p.add_argument("--input")
    p.add_argument("--result")
    p.add_argument("--level", type=float, help="alpha; the interval has coverage 1 - alpha")
    p.add_argument("--strict", action="store_true", default=None)
    p.add_argument("--role", action="append", help="COLUMN=ROLE, repeatable")

    p = sub.add_parser("simulate", help="write a simulated dataset and its counterfactuals")
    _add_common(p)
    _add_dgp_flags(p)
    p.add_argument("--holdout-n", type=int, help="also write a holdout sample with this many units per arm")

    p = sub.add_parser("bench", help="Monte Carlo comparison of FLAME-IV and 2SLS")
    _add_common(p)
    _add_dgp_flags(p)
    _add_match_flags(p)
    p.add_argument("--methods", help=f"comma list from {', '.join(METHODS)}")
    p.add_argument("--reps", type=int)
    p.add_argument("--pis", help="comma list of instrument strengths to sweep")

    p = sub.add_parser("oracle-check", help="cross-check the matching kernel against brute force")
    _add_common(p)
    p.add_argument("--instances", type=int)
    return parser


def _coerce(key, value):
    if key in FLOATS:
        return float(value)
    if key in INTS:
        return int(value)
    if key == "strict":
        return value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes")
    if key == "early_stop" and isinstance(value, str):
        return _early_stop(value)
    if key in ("coarsen", "role") and isinstance(value, str):
        return [v for v in value.split(",") if v]
    return value


def resolve_settings(args: argparse.Namespace, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    file_cfg = {}
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
    given = vars(args)
    settings = {}
    for key, default in DEFAULTS.items():
        if key not in given:
            continue
        value = given[key]
        if value is None:
            env = environ.get(ENV_PREFIX + key.upper())
            if env is not None:
                value = _coerce(key, env)
            elif key in file_cfg:
                value = _coerce(key, file_cfg[key])
            else:
                value = default
        settings[key] = value
    return settings


def _pairs(items, what):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"{what} expects COLUMN=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k] = v
    return out


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, command, settings, inputs, outputs):
    manifest = {
        "command": command,
        "version": __version__,
        "seed": settings.get("seed"),
        "config": settings,
        "inputs": {str(p): _digest(p) for p in inputs},
        "outputs": {Path(p).name: _digest(p) for p in outputs},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _match_config(s) -> MatchConfig:
    early = None if s["early_stop"] == "off" else s["early_stop"]
    return MatchConfig(
        tradeoff_c=s["tradeoff_c"], early_stop=early, ridge=s["ridge"],
        holdout_fraction=s.get("holdout", 0.15), threads=s["threads"],
    )


def _emit(s, payload: dict, rows: list[dict] | None = None):
    if s["format"] == "csv" and rows:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
        sys.stdout.write(buf.getvalue())
    else:
        sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# --- commands -----------------------------------------------------------------


def cmd_match(s) -> int:
    if not s["input"]:
        raise UsageError("match needs --input")
    if not 0.0 <= s["holdout"] < 1.0:
        raise UsageError(f"--holdout must lie in [0, 1), got {s['holdout']}")
    out = Path(s["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    frame = _read_csv(s["input"])
    outputs = []
    specs = [CoarseningSpec(col, int(bins)) for col, bins in _pairs(s["coarsen"], "--coarsen").items()]
    if specs:
        frame, edges = coarsen_frame(frame, specs)
        frame.to_csv(out / "coarsened.csv", index=False)
        (out / "coarsening.json").write_text(json.dumps(edges, indent=2, sort_keys=True))
        outputs += [out / "coarsened.csv", out / "coarsening.json"]
    d = dataset_from_frame(frame, _pairs(s["role"], "--role"))
    cfg = _match_config(s)
    train, holdout = split_holdout(d, s["holdout"], s["seed"])
    result = flame_iv_run(train, holdout, cfg)
    result.to_json(out / "match_result.json", indent=1)
    result.write_groups_csv(out / "groups.csv")
    outputs += [out / "match_result.json", out / "groups.csv"]
    _write_manifest(out, "match", s, [s["input"]], outputs)
    summary = {
        "units": d.n,
        "training": train.n,
        "holdout": 0 if holdout is None else holdout.n,
        "groups": len(result.groups),
        "matched": int(result.matched_ids.size),
        "unmatched": int(result.unmatched.size),
        "drop_sequence": [result.names[j] for j in result.drop_sequence],
        "stop_reason": result.stop_reason,
    }
    _emit(s, summary, [{"group_id": g.gid, "iteration": g.iteration, "n": g.n, "n1": g.n1, "n0": g.n0,
                        "theta": "".join("1" if b else "0" for b in g.mask)} for g in result.groups])
    return EXIT_OK


def _read_csv(path):
    if not Path(path).exists():
        raise ConfigurationError(f"input file {path} does not exist")
    try:
        return pd.read_csv(path, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        from .errors import EmptyInputError

        raise EmptyInputError(f"{path} is empty") from None


def cmd_estimate(s) -> int:
    from .matcher import MatchResult

    if not s["input"] or not s["result"]:
        raise UsageError("estimate needs --input and --result")
    if not 0 < s["level"] < 1:
        raise UsageError("--level must lie in (0, 1)")
    out = Path(s["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    frame = _read_csv(s["input"])
    roles = _pairs(s["role"], "--role")
    # covariates are not needed for estimation and may be uncoarsened reals
    for col in frame.columns:
        if col not in roles and col not in ("z", "t", "y", "id"):
            roles[col] = "ignore"
    d = dataset_from_frame(frame, roles)
    result = MatchResult.from_json(s["result"])
    est = estimate_late(result.groups, d, alpha=s["level"], strict=s["strict"])
    rows = per_group_table(result.groups, d)
    est.to_json(out / "estimate.json")
    write_group_csv(rows, out / "group_effects.csv")
    _write_manifest(out, "estimate", s, [s["input"], s["result"]], [out / "estimate.json", out / "group_effects.csv"])
    if s["format"] == "csv":
        sys.stdout.write((out / "group_effects.csv").read_text())
    else:
        sys.stdout.write(est.table() + "\n")
    return EXIT_OK


def _dgp_config(s) -> DgpConfig:
    return DgpConfig(
        n=s["n"], p=s["p"], n_important=min(s["important"], s["p"]), pi=s["pi"], intercept=s["intercept"],
        rho=s["rho"], noise_sd=s["noise_sd"], outcome_sd=s["outcome_sd"], model=s["model"],
        instrument=s["instrument_mode"], seed=s["seed"],
    )


def _check_model(s):
    if s["model"] not in MODELS:
        raise UsageError(f"unknown model {s['model']!r}; valid models: {', '.join(MODELS)}")


def _truth_frame(truth) -> pd.DataFrame:
    frame = pd.DataFrame({"id": np.arange(truth.t0.size), "t0": truth.t0, "t1": truth.t1})
    for level in range(truth.y_levels.shape[1]):
        frame[f"y_t{level}"] = truth.y_levels[:, level]
    frame["effect"] = truth.effect
    frame["complier"] = truth.complier.astype(int)
    return frame


def _params_dict(params) -> dict:
    return {k: (None if v is None else np.asarray(v).tolist()) for k, v in asdict(params).items()}


def cmd_simulate(s) -> int:
    _check_model(s)
    cfg = _dgp_config(s)
    out = Path(s["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    d, truth = gen_dataset(cfg)
    save_dataset(d, out / "data.csv")
    _truth_frame(truth).to_csv(out / "truth.csv", index=False)
    (out / "params.json").write_text(json.dumps(_params_dict(truth.params), indent=2, sort_keys=True))
    outputs = [out / "data.csv", out / "truth.csv", out / "params.json"]
    if s["holdout_n"]:
        h, htruth = gen_holdout(cfg, s["holdout_n"])
        save_dataset(h, out / "holdout.csv")
        _truth_frame(htruth).to_csv(out / "holdout_truth.csv", index=False)
        outputs += [out / "holdout.csv", out / "holdout_truth.csv"]
    _write_manifest(out, "simulate", s, [], outputs)
    _emit(s, {"units": d.n, "model": cfg.model, "sample_late": truth.sample_late(),
              "compliers": int(truth.complier.sum()), "outputs": [str(p) for p in outputs]})
    return EXIT_OK


def cmd_bench(s) -> int:
    _check_model(s)
    methods = [m.strip() for m in s["methods"].split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise UsageError(f"unknown methods {bad}; valid methods: {', '.join(METHODS)}")
    if s["reps"] < 1:
        raise UsageError("--reps must be >= 1")
    cfg = _dgp_config(s)
    match_cfg = _match_config(s)
    out = Path(s["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    metrics = run_benchmark(cfg, methods, s["reps"], match_cfg, workers=s["threads"])
    write_replications_csv(metrics, out / "replications.csv")
    write_metrics_json(metrics, out / "metrics.json", include_runtime=False)
    outputs = [out / "replications.csv", out / "metrics.json"]
    if s["pis"]:
        pis = [float(v) for v in str(s["pis"]).split(",") if v]
        sweep = strength_sweep(cfg, pis, methods, s["reps"], match_cfg, workers=s["threads"])
        write_strength_csv(sweep, out / "strength.csv")
        outputs.append(out / "strength.csv")
    if cfg.heterogeneous:
        pairs = group_effect_pairs(cfg, match_cfg, min(s["reps"], 10))
        write_group_pairs_csv(pairs, out / "group_pairs.csv")
        outputs.append(out / "group_pairs.csv")
    timings = {m: mm.mean_runtime for m, mm in metrics.methods.items()}
    timings["total_seconds"] = time.perf_counter() - start
    (out / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True))
    _write_manifest(out, "bench", s, [], outputs)
    summary = metrics.to_dict(include_runtime=False)
    for m in summary["methods"].values():
        m.pop("estimates")
    _emit(s, summary, [{"method": m, "bias_of_median": v["bias_of_median"], "mad": v["mad"],
                        "median_ci_width": v["median_ci_width"], "failures": v["failures"]}
                       for m, v in summary["methods"].items()])
    return EXIT_OK


def cmd_oracle_check(s) -> int:
    from .checks import kernel_agreement, min_distance_suite

    out = Path(s["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(s["seed"])
    kernel = kernel_agreement(rng, s["instances"])
    mindist = min_distance_suite(rng, s["instances"])
    report = {"kernel": kernel, "min_distance": mindist, "passed": kernel["failures"] == 0 and mindist["failures"] == 0}
    (out / "oracle_check.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    _write_manifest(out, "oracle-check", s, [], [out / "oracle_check.json"])
    _emit(s, report, [{"check": name, "instances": r["instances"], "failures": r["failures"]}
                      for name, r in (("kernel", kernel), ("min_distance", mindist))])
    return EXIT_OK if report["passed"] else 1


COMMANDS = {
    "match": cmd_match,
    "estimate": cmd_estimate,
    "simulate": cmd_simulate,
    "bench": cmd_bench,
    "oracle-check": cmd_oracle_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        settings = resolve_settings(args)
        return COMMANDS[args.command](settings)
    except FlameIVError as exc:
        print(f"flame-iv: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
