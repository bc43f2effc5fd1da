"""Command-line entry point: ``abc simulate|infer|bench|audit``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .adaptive import anch_run
from .bench import ExperimentConfig, _observed, audit_report, run_dir_for, run_experiment
from .engine import (
    build_reference_table,
    infer,
    posterior_quantiles,
    read_table_csv,
    write_posterior_csv,
    write_table_csv,
)
from .errors import AbcError
from .regression import TrainConfig
from .stats import Rng


def _load_raw(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def cmd_simulate(args) -> int:
    raw = _load_raw(args.config)
    # a table needs no observed data or method list; fill placeholders for validation
    filled = dict(raw)
    filled.setdefault("methods", ["rejection"])
    filled.setdefault("p_delta", [1.0])
    if filled.get("observed") is None and filled.get("truth") is None:
        filled["observed"] = [0.0]
    cfg = ExperimentConfig.from_dict(filled)
    cfg.raw = raw
    model = cfg.build_model()
    out = run_dir_for(cfg, args.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(raw, indent=2, sort_keys=True) + "\n")
    table = build_reference_table(model, cfg.M, Rng(cfg.seed).derive("table", 0))
    write_table_csv(table, out / "table.csv")
    print(out / "table.csv")
    return 0


def cmd_infer(args) -> int:
    raw = _load_raw(args.config)
    table_path = raw.pop("table", None)
    filled = dict(raw)
    filled.setdefault("replicates", 1)
    if table_path is not None:
        filled.setdefault("M", 1)
    cfg = ExperimentConfig.from_dict(filled)
    model = cfg.build_model()
    root = Rng(cfg.seed)
    s_obs = _observed(cfg, model, root, 0)
    train = TrainConfig.from_dict(cfg.train)
    transforms = model.default_transforms()
    if table_path is not None:
        table = read_table_csv(table_path)
    else:
        table = build_reference_table(model, cfg.M, root.derive("table", 0))

    out = run_dir_for(cfg, args.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(dict(raw, table=table_path), indent=2, sort_keys=True) + "\n")
    summary = {"observed": [float(v) for v in s_obs], "results": []}
    for method in cfg.methods:
        for pi, p in enumerate(cfg.p_delta):
            stem = f"{method}_p{pi}"
            if method == "anch":
                post, rep = anch_run(model, s_obs, cfg.anch_config(p), train, root.derive("anch", pi, 0))
                write_posterior_csv(rep.stage1_posterior, out / f"{stem}_stage1.csv")
                (out / f"{stem}_stages.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
            else:
                post = infer(method, table, s_obs, p, transforms, train, root.derive("fit", method, pi, 0))
            write_posterior_csv(post, out / f"{stem}.csv")
            qs = posterior_quantiles(post, cfg.probs)
            summary["results"].append({
                "method": method,
                "p_delta": p,
                "method_used": post.method_used,
                "delta": post.delta,
                "notes": post.notes,
                "quantiles": {name: q.as_dict() for name, q in zip(model.param_names, qs)},
            })
    (out / "quantiles.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(out)
    return 0


def cmd_bench(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    res = run_experiment(cfg, workers=args.workers, output_dir=args.output)
    print(res.run_dir)
    if res.failures:
        print(f"{res.failures} cell(s) failed; see cells.csv", file=sys.stderr)
        return 1
    return 0


def cmd_audit(args) -> int:
    problems = audit_report(args.report)
    for p in problems:
        print(p)
    if problems:
        return 1
    print("ok: aggregates match records")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="abc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="build a reference table CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--output", help="output directory (default: config or $ABC_OUTPUT_DIR)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("infer", help="run the configured estimators once")
    p.add_argument("--config", required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="run a replicate experiment grid")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--output")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("audit", help="recompute report aggregates from records.csv")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_audit)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (AbcError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
