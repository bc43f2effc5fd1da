"""Experiment harness: replicate grids, reference oracles, RMAE and variance ratios.

A run executes every (method, acceptance rate, replicate) cell of a JSON
experiment config and writes, under ``<output_dir>/run-<config hash>/``:

``config.json``          the config, verbatim
``records.csv``          one row per cell, parameter and quantile probability
``cells.csv``            cell status, fallback method, accepted count, delta
``quantiles.csv``        median over replicates of each posterior quantile
``rmae.csv``             relative median absolute error vs the reference
``variance_ratios.csv``  replicate-variance ratios with F-test tail probabilities
``report.json``          all of the above plus provenance
``posteriors/``          per-cell posterior draws (optional)

Every aggregate is a pure function of ``records.csv`` and the reference, which
is what :func:`audit_report` checks.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .adaptive import AnchConfig, anch_run
from .engine import (
    WeightedPosterior,
    build_reference_table,
    fmt,
    infer,
    posterior_quantiles,
    write_posterior_csv,
)
from .errors import AbcError, ConfigError, UndefinedRmaeError, ZeroAcceptanceError
from .regression import TrainConfig
from .simulators import InfiniteSitesModel, make_model
from .stats import QuantileSet, Rng, f_tail_p, weighted_quantile

log = logging.getLogger(__name__)

METHODS = ("rejection", "nw", "locl", "nch", "anch")
DEFAULT_PROBS = (0.025, 0.25, 0.5, 0.75, 0.975)
OUTPUT_ENV = "ABC_OUTPUT_DIR"

RMAE_NOTE = (
    "rmae = median over replicates of |Q - Q0| / |Q0| per quantile; "
    "sum adds the per-quantile values over the requested probabilities"
)


# ---------------------------------------------------------------------------
# config


@dataclass
class ExperimentConfig:
    model: dict
    methods: list
    M: int
    p_delta: list
    replicates: int = 20
    probs: list = field(default_factory=lambda: list(DEFAULT_PROBS))
    seed: int = 0
    observed: list | None = None
    truth: list | None = None
    observed_per_replicate: bool = False
    output_dir: str | None = None
    train: dict = field(default_factory=dict)
    anch: dict = field(default_factory=dict)
    reference: dict | None = None
    variance_ratios: list = field(default_factory=list)
    write_posteriors: bool = True
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__ if f != "raw"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "model" not in d:
            raise ConfigError("config needs a model")
        methods = list(d.get("methods") or [])
        if not methods:
            raise ConfigError("method list is empty")
        bad = [m for m in methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {list(METHODS)}")
        p_delta = d.get("p_delta", [])
        p_delta = [p_delta] if isinstance(p_delta, (int, float)) else list(p_delta)
        if not p_delta or not all(0 < p <= 1 for p in p_delta):
            raise ConfigError("p_delta must be a nonempty list of rates in (0, 1]")
        M = int(d.get("M", 0))
        if M < 1:
            raise ConfigError("M must be a positive integer")
        reps = int(d.get("replicates", 20))
        if reps < 1:
            raise ConfigError("replicates must be positive")
        probs = list(d.get("probs", DEFAULT_PROBS))
        if not probs or not all(0 < p < 1 for p in probs):
            raise ConfigError("probs must lie in (0, 1)")
        if (d.get("observed") is None) == (d.get("truth") is None):
            raise ConfigError("give exactly one of 'observed' or 'truth'")
        for pair in d.get("variance_ratios", []):
            if len(pair) != 2:
                raise ConfigError("variance_ratios entries are [method_a, method_b] pairs")
        cfg = cls(
            model=dict(d["model"]),
            methods=methods,
            M=M,
            p_delta=[float(p) for p in p_delta],
            replicates=reps,
            probs=[float(p) for p in probs],
            seed=int(d.get("seed", 0)),
            observed=None if d.get("observed") is None else [float(v) for v in d["observed"]],
            truth=None if d.get("truth") is None else [float(v) for v in d["truth"]],
            observed_per_replicate=bool(d.get("observed_per_replicate", False)),
            output_dir=d.get("output_dir"),
            train=dict(d.get("train", {})),
            anch=dict(d.get("anch", {})),
            reference=d.get("reference"),
            variance_ratios=[list(p) for p in d.get("variance_ratios", [])],
            write_posteriors=bool(d.get("write_posteriors", True)),
            raw=json.loads(json.dumps(d)),
        )
        # fail on model / training options now rather than inside a worker
        cfg.build_model()
        TrainConfig.from_dict(cfg.train)
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def build_model(self):
        return make_model(self.model)

    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def anch_config(self, p_delta: float) -> AnchConfig:
        a = self.anch
        m1 = a.get("stage_sizes", [self.M // 2, self.M - self.M // 2])
        return AnchConfig(
            stage_sizes=tuple(m1),
            p_delta=(float(a.get("stage1_p_delta", p_delta)), p_delta),
            margin=float(a.get("margin", 0.05)),
            pooling=bool(a.get("pooling", False)),
            floor_at_prior=bool(a.get("floor_at_prior", False)),
            region_transform=bool(a.get("region_transform", True)),
        )


# ---------------------------------------------------------------------------
# metrics


@dataclass
class OracleResult:
    sample: np.ndarray
    acceptance: float
    proposed: int


def exact_oracle_ex1(prior_mean: float, n: int, s_target: int, M: int, rng: Rng) -> OracleResult:
    """Rejection on exact equality of the segregating-site count."""
    if s_target < 0 or int(s_target) != s_target:
        raise ValueError("target must be a nonnegative integer")
    model = InfiniteSitesModel(n, prior_mean)
    table = build_reference_table(model, M, rng)
    hit = table.stats[:, 0] == s_target
    if not hit.any():
        raise ZeroAcceptanceError(f"no exact matches in {M} simulations; increase M")
    return OracleResult(table.params[hit, 0], float(hit.mean()), M)


def rmae(estimated, reference) -> tuple[np.ndarray, float]:
    """Per-quantile median over replicates of ``|Q - Q0| / |Q0|``, and their sum.

    ``estimated`` is a (replicates x quantiles) array or a list of
    :class:`QuantileSet`; ``reference`` a vector or a QuantileSet.
    """
    est = np.array([q.values if isinstance(q, QuantileSet) else q for q in estimated], dtype=float)
    ref = np.asarray(reference.values if isinstance(reference, QuantileSet) else reference, dtype=float)
    if est.ndim != 2 or est.shape[1] != ref.size:
        raise ValueError("estimated quantiles do not line up with the reference")
    zero = np.flatnonzero(ref == 0)
    if zero.size:
        raise UndefinedRmaeError(f"reference quantile {int(zero[0])} is zero")
    per = np.median(np.abs(est - ref) / np.abs(ref), axis=0)
    return per, float(per.sum())


@dataclass
class VarianceRatio:
    var_a: np.ndarray
    var_b: np.ndarray
    ratio: np.ndarray
    p_value: np.ndarray
    df: tuple
    flags: list


def variance_ratios(qa, qb) -> VarianceRatio:
    """``Var_a / Var_b`` per column of two (replicates x quantiles) arrays.

    The p-value is the upper F tail with ``(n_a - 1, n_b - 1)`` degrees of
    freedom. A zero denominator gives an infinite ratio, p = 0 and a flag.
    """
    qa = np.asarray(qa, dtype=float)
    qb = np.asarray(qb, dtype=float)
    if qa.shape[0] < 2 or qb.shape[0] < 2:
        raise ValueError("need at least two replicates per method")
    va = qa.var(axis=0, ddof=1)
    vb = qb.var(axis=0, ddof=1)
    df = (qa.shape[0] - 1, qb.shape[0] - 1)
    ratio = np.empty_like(va)
    p = np.empty_like(va)
    flags = []
    for k in range(va.size):
        if vb[k] == 0:
            if va[k] == 0:
                ratio[k], p[k] = np.nan, np.nan
                flags.append("both_zero")
            else:
                ratio[k], p[k] = np.inf, 0.0
                flags.append("zero_denominator")
        else:
            ratio[k] = va[k] / vb[k]
            p[k] = f_tail_p(ratio[k], *df) if ratio[k] > 0 else 1.0
            flags.append("")
    return VarianceRatio(va, vb, ratio, p, df, flags)


# ---------------------------------------------------------------------------
# cells


def _observed(cfg: ExperimentConfig, model, root: Rng, replicate: int) -> np.ndarray:
    if cfg.observed is not None:
        return np.asarray(cfg.observed, dtype=float)
    key = replicate if cfg.observed_per_replicate else 0
    return model.simulate(np.asarray(cfg.truth, dtype=float), root.derive("observed", key).generator)


def _cell_record(method, pi, p_delta, r, post: WeightedPosterior | None, probs, error=None, extra=None):
    rec = {
        "method": method,
        "p_index": pi,
        "p_delta": p_delta,
        "replicate": r,
        "status": "ok" if error is None else "failed",
        "method_used": "" if post is None else post.method_used,
        "n_draws": 0 if post is None else int(post.size),
        "delta": float("nan") if post is None else float(post.delta),
        "message": "" if error is None else f"{type(error).__name__}: {error}",
        "quantiles": None,
        "posterior": None,
        "extra": extra,
    }
    if post is not None:
        rec["quantiles"] = [list(q.values) for q in posterior_quantiles(post, probs)]
        rec["posterior"] = (post.draws, post.weights)
    return rec


def _run_replicate(cfg: ExperimentConfig, r: int) -> list[dict]:
    model = cfg.build_model()
    root = Rng(cfg.seed)
    transforms = model.default_transforms()
    train = TrainConfig.from_dict(cfg.train)
    s_obs = _observed(cfg, model, root, r)
    singles = [m for m in cfg.methods if m != "anch"]
    out = []
    table = None
    if singles:
        try:
            table = build_reference_table(model, cfg.M, root.derive("table", r))
        except AbcError as exc:
            for m in singles:
                for pi, p in enumerate(cfg.p_delta):
                    out.append(_cell_record(m, pi, p, r, None, cfg.probs, exc))
            singles = []
    for m in singles:
        for pi, p in enumerate(cfg.p_delta):
            try:
                post = infer(m, table, s_obs, p, transforms, train, root.derive("fit", m, pi, r))
                out.append(_cell_record(m, pi, p, r, post, cfg.probs))
            except (AbcError, np.linalg.LinAlgError) as exc:
                out.append(_cell_record(m, pi, p, r, None, cfg.probs, exc))
    return out


def _run_anch(cfg: ExperimentConfig, pi: int, r: int) -> list[dict]:
    model = cfg.build_model()
    root = Rng(cfg.seed)
    p = cfg.p_delta[pi]
    s_obs = _observed(cfg, model, root, r)
    try:
        post, rep = anch_run(
            model, s_obs, cfg.anch_config(p), TrainConfig.from_dict(cfg.train), root.derive("anch", pi, r)
        )
    except (AbcError, np.linalg.LinAlgError) as exc:
        return [
            _cell_record("anch", pi, p, r, None, cfg.probs, exc),
            _cell_record("anch_stage1", pi, p, r, None, cfg.probs, exc),
        ]
    info = rep.to_dict()
    return [
        _cell_record("anch", pi, p, r, post, cfg.probs, extra=info),
        _cell_record("anch_stage1", pi, p, r, rep.stage1_posterior, cfg.probs),
    ]


def _run_unit(args):
    cfg, unit = args
    if unit[0] == "single":
        return _run_replicate(cfg, unit[1])
    return _run_anch(cfg, unit[1], unit[2])


def _units(cfg: ExperimentConfig) -> list[tuple]:
    units = []
    if any(m != "anch" for m in cfg.methods):
        units += [("single", r) for r in range(cfg.replicates)]
    if "anch" in cfg.methods:
        units += [("anch", pi, r) for pi in range(len(cfg.p_delta)) for r in range(cfg.replicates)]
    return units


def run_cells(cfg: ExperimentConfig, workers: int = 1) -> list[dict]:
    """Execute the grid; output order is independent of ``workers``."""
    jobs = [(cfg, u) for u in _units(cfg)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_unit, jobs))
    else:
        chunks = [_run_unit(j) for j in jobs]
    cells = [c for chunk in chunks for c in chunk]
    order = {m: i for i, m in enumerate(METHODS + ("anch_stage1",))}
    cells.sort(key=lambda c: (order[c["method"]], c["p_index"], c["replicate"]))
    return cells


# ---------------------------------------------------------------------------
# aggregation (shared with the audit)


def records_from_cells(cells: list[dict], param_names: Sequence[str], probs) -> list[dict]:
    rows = []
    for c in cells:
        if c["status"] != "ok":
            continue
        for j, name in enumerate(param_names):
            for k, prob in enumerate(probs):
                rows.append(
                    {
                        "method": c["method"],
                        "p_delta": c["p_delta"],
                        "replicate": c["replicate"],
                        "param": name,
                        "prob": prob,
                        "value": c["quantiles"][j][k],
                    }
                )
    return rows


def _grouped(records):
    """{(method, p_delta, param): {replicate: {prob: value}}}"""
    groups: dict = {}
    for rec in records:
        key = (rec["method"], rec["p_delta"], rec["param"])
        groups.setdefault(key, {}).setdefault(rec["replicate"], {})[rec["prob"]] = rec["value"]
    return groups


def _matrix(reps: dict, probs) -> tuple[list, np.ndarray]:
    ids = sorted(reps)
    return ids, np.array([[reps[i][p] for p in probs] for i in ids], dtype=float)


def aggregate(records: list[dict], probs, reference: dict | None, ratio_pairs) -> dict:
    groups = _grouped(records)
    med_rows, rmae_rows, ratio_rows = [], [], []
    for (method, p_delta, param), reps in groups.items():
        _, mat = _matrix(reps, probs)
        for k, prob in enumerate(probs):
            med_rows.append(
                {"method": method, "p_delta": p_delta, "param": param, "prob": prob,
                 "median": float(np.median(mat[:, k]))}
            )
        if reference and param in reference:
            try:
                per, total = rmae(mat, reference[param])
            except UndefinedRmaeError:
                continue
            for k, prob in enumerate(probs):
                rmae_rows.append({"method": method, "p_delta": p_delta, "param": param,
                                  "prob": prob, "rmae": float(per[k])})
            rmae_rows.append({"method": method, "p_delta": p_delta, "param": param,
                              "prob": "sum", "rmae": total})
    for a, b in ratio_pairs:
        for (method, p_delta, param), reps_a in groups.items():
            if method != a or (b, p_delta, param) not in groups:
                continue
            reps_b = groups[(b, p_delta, param)]
            common = sorted(set(reps_a) & set(reps_b))
            if len(common) < 2:
                continue
            qa = np.array([[reps_a[i][p] for p in probs] for i in common])
            qb = np.array([[reps_b[i][p] for p in probs] for i in common])
            vr = variance_ratios(qa, qb)
            for k, prob in enumerate(probs):
                ratio_rows.append({
                    "method_a": a, "method_b": b, "p_delta": p_delta, "param": param, "prob": prob,
                    "var_a": float(vr.var_a[k]), "var_b": float(vr.var_b[k]),
                    "ratio": float(vr.ratio[k]), "df1": vr.df[0], "df2": vr.df[1],
                    "p_value": float(vr.p_value[k]), "flag": vr.flags[k],
                })
    return {"median_quantiles": med_rows, "rmae": rmae_rows, "variance_ratios": ratio_rows}


# ---------------------------------------------------------------------------
# reference


def compute_reference(cfg: ExperimentConfig, model) -> dict | None:
    ref = cfg.reference
    if not ref:
        return None
    kind = ref.get("kind")
    if kind == "exact_ex1":
        if not isinstance(model, InfiniteSitesModel):
            raise ConfigError("exact_ex1 reference needs the infinite_sites model")
        if cfg.observed is None:
            raise ConfigError("exact_ex1 reference needs an observed segregating-site count")
        res = exact_oracle_ex1(
            model.prior_mean, model.n, int(cfg.observed[0]), int(ref.get("M", 10**6)),
            Rng(cfg.seed).derive("reference"),
        )
        vals = weighted_quantile(res.sample, np.ones(res.sample.size), cfg.probs)
        return {
            "kind": kind,
            "acceptance": res.acceptance,
            "accepted": int(res.sample.size),
            "proposed": res.proposed,
            "quantiles": {model.param_names[0]: [float(v) for v in vals]},
        }
    if kind == "quantiles":
        vals = ref.get("values", {})
        return {"kind": kind, "quantiles": {k: [float(x) for x in v] for k, v in vals.items()}}
    raise ConfigError(f"unknown reference kind {kind!r}")


# ---------------------------------------------------------------------------
# writing


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _write(path: Path, text: str):
    path.write_text(text)


def run_dir_for(cfg: ExperimentConfig, output_dir=None) -> Path:
    base = output_dir or cfg.output_dir or os.environ.get(OUTPUT_ENV, "abc-runs")
    return Path(base) / f"run-{cfg.config_hash()[:12]}"


@dataclass
class ExperimentReport:
    run_dir: Path
    report: dict
    failures: int


def run_experiment(cfg: ExperimentConfig, workers: int = 1, output_dir=None) -> ExperimentReport:
    model = cfg.build_model()
    names = list(model.param_names)
    reference = compute_reference(cfg, model)
    cells = run_cells(cfg, workers)
    records = records_from_cells(cells, names, cfg.probs)
    ref_q = None if reference is None else reference["quantiles"]
    agg = aggregate(records, cfg.probs, ref_q, cfg.variance_ratios)

    out = run_dir_for(cfg, output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.json", json.dumps(cfg.raw, indent=2, sort_keys=True) + "\n")
    _write(out / "records.csv", _csv_text(
        ["method", "p_delta", "replicate", "param", "prob", "value"],
        [[r["method"], r["p_delta"], r["replicate"], r["param"], r["prob"], r["value"]] for r in records],
    ))
    cell_rows = [
        [c["method"], c["p_delta"], c["replicate"], c["status"], c["method_used"], c["n_draws"],
         c["delta"], c["message"]]
        for c in cells
    ]
    _write(out / "cells.csv", _csv_text(
        ["method", "p_delta", "replicate", "status", "method_used", "n_draws", "delta", "message"], cell_rows
    ))
    _write(out / "quantiles.csv", _csv_text(
        ["method", "p_delta", "param", "prob", "median"],
        [[r["method"], r["p_delta"], r["param"], r["prob"], r["median"]] for r in agg["median_quantiles"]],
    ))
    _write(out / "rmae.csv", _csv_text(
        ["method", "p_delta", "param", "prob", "rmae"],
        [[r["method"], r["p_delta"], r["param"], r["prob"], r["rmae"]] for r in agg["rmae"]],
    ))
    vr_keys = ["method_a", "method_b", "p_delta", "param", "prob", "var_a", "var_b", "ratio", "df1", "df2",
               "p_value", "flag"]
    _write(out / "variance_ratios.csv", _csv_text(vr_keys, [[r[k] for k in vr_keys] for r in agg["variance_ratios"]]))
    if reference is not None:
        _write(out / "reference.csv", _csv_text(
            ["param", "prob", "value"],
            [[name, p, v] for name, vals in reference["quantiles"].items() for p, v in zip(cfg.probs, vals)],
        ))
    if cfg.write_posteriors:
        pdir = out / "posteriors"
        pdir.mkdir(exist_ok=True)
        for c in cells:
            if c["posterior"] is None:
                continue
            stem = f"{c['method']}_p{c['p_index']}_r{c['replicate']}"
            draws, weights = c["posterior"]
            write_posterior_csv(WeightedPosterior(draws, weights, c["method"]), pdir / f"{stem}.csv")
            if c["extra"] is not None:
                _write(pdir / f"{stem}_stages.json", json.dumps(c["extra"], indent=2, sort_keys=True) + "\n")

    failures = sum(c["status"] != "ok" for c in cells)
    report = {
        "provenance": {
            "package": "nchabc",
            "version": __version__,
            "seed": cfg.seed,
            "config_hash": cfg.config_hash(),
        },
        "config": cfg.raw,
        "param_names": names,
        "probs": cfg.probs,
        "reference": reference,
        "cells": [
            {k: c[k] for k in ("method", "p_delta", "replicate", "status", "method_used", "n_draws", "delta",
                               "message")}
            for c in cells
        ],
        "failures": failures,
        "aggregates": agg,
        "notes": {"rmae": RMAE_NOTE},
    }
    _write(out / "report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    return ExperimentReport(out, report, failures)


def variance_ratio_study(method_a: str, method_b: str, cfg: ExperimentConfig, replicates: int | None = None,
                         workers: int = 1) -> list[dict]:
    """Variance ratios of replicate quantile estimates between two methods.

    Methods are names from the config grid, including ``anch_stage1``. Both
    methods see the same tables and the same observed data in each replicate.
    """
    base = {m if m != "anch_stage1" else "anch" for m in (method_a, method_b)}
    raw = dict(cfg.raw, methods=sorted(base), replicates=replicates or cfg.replicates)
    sub = ExperimentConfig.from_dict(raw)
    cells = run_cells(sub, workers)
    names = list(sub.build_model().param_names)
    records = records_from_cells(cells, names, sub.probs)
    return aggregate(records, sub.probs, None, [(method_a, method_b)])["variance_ratios"]


# ---------------------------------------------------------------------------
# audit


def _read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def audit_report(report_path) -> list[str]:
    """Recompute every aggregate from ``records.csv``; return mismatch messages."""
    report_path = Path(report_path)
    with open(report_path) as fh:
        report = json.load(fh)
    records = []
    for row in _read_csv(report_path.parent / "records.csv"):
        records.append({
            "method": row["method"],
            "p_delta": float(row["p_delta"]),
            "replicate": int(row["replicate"]),
            "param": row["param"],
            "prob": float(row["prob"]),
            "value": float(row["value"]),
        })
    probs = report["probs"]
    ref = report.get("reference")
    pairs = report["config"].get("variance_ratios", [])
    fresh = aggregate(records, probs, None if ref is None else ref["quantiles"], pairs)
    problems = []
    for key, rows in fresh.items():
        stored = report["aggregates"].get(key, [])
        if len(stored) != len(rows):
            problems.append(f"{key}: {len(stored)} stored rows, {len(rows)} recomputed")
            continue
        for a, b in zip(stored, rows):
            for field_name, val in b.items():
                sv = a.get(field_name)
                if isinstance(val, float):
                    if not (sv == val or (np.isnan(val) and sv is not None and np.isnan(sv))):
                        problems.append(f"{key}: {field_name} stored {sv!r}, recomputed {val!r}")
                elif sv != val:
                    problems.append(f"{key}: {field_name} stored {sv!r}, recomputed {val!r}")
    return problems
