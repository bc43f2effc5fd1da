import csv
import json

import numpy as np
import pytest

from nchabc import bench
from nchabc.bench import (
    ExperimentConfig,
    audit_report,
    exact_oracle_ex1,
    rmae,
    run_experiment,
    variance_ratio_study,
    variance_ratios,
)
from nchabc.cli import main
from nchabc.errors import ConfigError, UndefinedRmaeError, ZeroAcceptanceError
from nchabc.stats import QuantileSet, Rng, f_tail_p

PROBS = [0.025, 0.25, 0.5, 0.75, 0.975]


def ex1_config(**kw):
    d = {
        "model": {"id": "infinite_sites", "n": 100, "prior_mean": 50},
        "methods": ["rejection", "nw", "locl", "nch"],
        "M": 300,
        "p_delta": [0.3, 0.9],
        "replicates": 3,
        "seed": 11,
        "observed": [10],
        "train": {"restarts": 1, "max_iterations": 100},
        "reference": {"kind": "exact_ex1", "M": 100_000},
    }
    d.update(kw)
    return d


# -- exact oracle ------------------------------------------------------------


def test_oracle_point_mass_prior():
    res = exact_oracle_ex1(0.0, 20, 0, 500, Rng(1))
    assert res.acceptance == 1.0 and res.sample.size == 500


def test_oracle_zero_acceptance():
    with pytest.raises(ZeroAcceptanceError):
        exact_oracle_ex1(50.0, 100, 10_000, 100, Rng(2))


def test_oracle_quantiles_stable_across_seeds():
    probs = np.array(PROBS)
    samples = [exact_oracle_ex1(50.0, 100, 10, 1_000_000, Rng(s)).sample for s in (3, 4)]
    gen = Rng(5).generator
    cis = []
    for x in samples:
        boot = np.array([np.quantile(gen.choice(x, x.size), probs) for _ in range(300)])
        cis.append(np.quantile(boot, [0.005, 0.995], axis=0))
    # 99% bootstrap intervals of the two seeds overlap at every quantile
    assert np.all(cis[0][0] <= cis[1][1]) and np.all(cis[1][0] <= cis[0][1])


# -- RMAE --------------------------------------------------------------------


def test_rmae_examples():
    ref = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    per, total = rmae(np.tile(ref, (4, 1)), ref)
    assert total == 0.0 and np.all(per == 0)
    per, total = rmae([1.1 * ref], QuantileSet(tuple(PROBS), tuple(ref)))
    np.testing.assert_allclose(per, 0.1, rtol=1e-12)
    assert total == pytest.approx(0.5, rel=1e-12)


def test_rmae_brute_force():
    gen = Rng(6).generator
    for _ in range(50):
        reps = int(gen.integers(1, 30))
        ref = gen.uniform(0.5, 5, 5) * gen.choice([-1, 1], 5)
        est = ref + gen.normal(0, 1, (reps, 5))
        per, total = rmae(est, ref)
        for k in range(5):
            ratios = sorted(abs(est[i, k] - ref[k]) / abs(ref[k]) for i in range(reps))
            mid = reps // 2
            expected = ratios[mid] if reps % 2 else (ratios[mid - 1] + ratios[mid]) / 2
            assert per[k] == pytest.approx(expected, rel=1e-12)
        assert total == pytest.approx(sum(per), rel=1e-12)


def test_rmae_zero_reference():
    with pytest.raises(UndefinedRmaeError):
        rmae([[1.0, 2.0]], [0.0, 1.0])


# -- variance ratios ---------------------------------------------------------


def test_variance_ratio_identical():
    q = Rng(7).generator.normal(size=(30, 5))
    vr = variance_ratios(q, q)
    np.testing.assert_allclose(vr.ratio, 1.0)
    np.testing.assert_allclose(vr.p_value, 0.5, atol=1e-12)
    assert vr.df == (29, 29)


def test_variance_ratio_synthetic_4_to_1():
    gen = Rng(8).generator
    qa = gen.normal(0, 2, (100, 5))
    qb = gen.normal(0, 1, (100, 5))
    vr = variance_ratios(qa, qb)
    # ratio / 4 is F(99, 99): its central 99.9% range is roughly (0.52, 1.9)
    assert np.all((vr.ratio / 4 > 0.52) & (vr.ratio / 4 < 1.9))
    assert np.all(vr.p_value < 0.01)
    np.testing.assert_allclose(vr.p_value, [f_tail_p(r, 99, 99) for r in vr.ratio])


def test_variance_ratio_zero_denominator():
    qa = np.array([[1.0, 2.0], [2.0, 2.0], [3.0, 2.0]])
    qb = np.array([[5.0, 2.0], [5.0, 2.0], [5.0, 2.0]])
    vr = variance_ratios(qa, qb)
    assert vr.ratio[0] == np.inf and vr.p_value[0] == 0.0 and vr.flags[0] == "zero_denominator"
    assert np.isnan(vr.ratio[1]) and vr.flags[1] == "both_zero"


def test_variance_ratio_study_same_method():
    cfg = ExperimentConfig.from_dict(ex1_config(methods=["rejection"], p_delta=[0.5], reference=None))
    rows = variance_ratio_study("rejection", "rejection", cfg, replicates=6)
    assert len(rows) == 5
    for r in rows:
        assert r["ratio"] == 1.0 and r["p_value"] == pytest.approx(0.5, abs=1e-12)


# -- config ------------------------------------------------------------------


@pytest.mark.parametrize(
    "change",
    [
        {"methods": []},
        {"methods": ["magic"]},
        {"p_delta": [0.0]},
        {"p_delta": [1.5]},
        {"M": 0},
        {"truth": [5.0]},
        {"probs": [1.0]},
        {"unexpected": 1},
    ],
)
def test_config_validation(change):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(ex1_config(**change))


def test_config_needs_observation():
    d = ex1_config()
    del d["observed"]
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(d)


def test_config_hash_is_stable():
    a = ExperimentConfig.from_dict(ex1_config())
    b = ExperimentConfig.from_dict(json.loads(json.dumps(ex1_config())))
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != ExperimentConfig.from_dict(ex1_config(seed=12)).config_hash()


# -- experiments -------------------------------------------------------------


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_run_experiment_outputs_and_audit(tmp_path):
    cfg = ExperimentConfig.from_dict(ex1_config(variance_ratios=[["nch", "rejection"]]))
    res = run_experiment(cfg, output_dir=tmp_path)
    assert res.failures == 0
    out = res.run_dir
    for name in ("config.json", "records.csv", "cells.csv", "quantiles.csv", "rmae.csv",
                 "variance_ratios.csv", "reference.csv", "report.json"):
        assert (out / name).exists(), name
    assert len(list((out / "posteriors").glob("*.csv"))) == 4 * 2 * 3
    records = read_rows(out / "records.csv")
    assert len(records) == 4 * 2 * 3 * 5
    sums = [r for r in read_rows(out / "rmae.csv") if r["prob"] == "sum"]
    assert len(sums) == 4 * 2
    assert audit_report(out / "report.json") == []
    report = json.loads((out / "report.json").read_text())
    assert report["provenance"]["config_hash"] == cfg.config_hash()
    assert report["config"] == ex1_config(variance_ratios=[["nch", "rejection"]])
    assert report["reference"]["accepted"] > 0


def test_audit_detects_tampering(tmp_path):
    res = run_experiment(ExperimentConfig.from_dict(ex1_config(methods=["rejection"])), output_dir=tmp_path)
    path = res.run_dir / "records.csv"
    lines = path.read_text().splitlines()
    fields = lines[1].split(",")
    fields[-1] = repr(float(fields[-1]) + 1.0)
    lines[1] = ",".join(fields)
    path.write_text("\n".join(lines) + "\n")
    assert audit_report(res.run_dir / "report.json")


def test_failed_cells_are_recorded(tmp_path, monkeypatch):
    real = bench.infer

    def flaky(method, *args, **kw):
        if method == "locl":
            raise ConfigError("forced failure")
        return real(method, *args, **kw)

    monkeypatch.setattr(bench, "infer", flaky)
    cfg = ExperimentConfig.from_dict(ex1_config(methods=["rejection", "locl"], reference=None))
    res = run_experiment(cfg, output_dir=tmp_path)
    assert res.failures == 2 * 3
    cells = read_rows(res.run_dir / "cells.csv")
    failed = [c for c in cells if c["status"] == "failed"]
    assert {c["method"] for c in failed} == {"locl"}
    assert "forced failure" in failed[0]["message"]


def test_anch_cells_and_stage_reports(tmp_path):
    cfg = ExperimentConfig.from_dict(ex1_config(
        methods=["anch"], p_delta=[0.8], replicates=2, variance_ratios=[["anch_stage1", "anch"]],
        anch={"floor_at_prior": True, "margin": 0.0},
    ))
    res = run_experiment(cfg, output_dir=tmp_path)
    assert res.failures == 0
    methods = {c["method"] for c in read_rows(res.run_dir / "cells.csv")}
    assert methods == {"anch", "anch_stage1"}
    stages = json.loads((res.run_dir / "posteriors" / "anch_p0_r0_stages.json").read_text())
    assert stages["region"]["lo"] == [0.0]
    assert len(read_rows(res.run_dir / "variance_ratios.csv")) == 5


def test_bench_byte_identical_across_workers(tmp_path):
    raw = ex1_config(methods=["rejection", "nch", "anch"], p_delta=[0.5], replicates=3)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(raw))
    assert main(["bench", "--config", str(path), "--workers", "1", "--output", str(tmp_path / "a")]) == 0
    assert main(["bench", "--config", str(path), "--workers", "2", "--output", str(tmp_path / "b")]) == 0
    run = ExperimentConfig.from_dict(raw).config_hash()[:12]
    a, b = tmp_path / "a" / f"run-{run}", tmp_path / "b" / f"run-{run}"
    files = sorted(p.relative_to(a) for p in a.rglob("*.csv"))
    assert len(files) > 5
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


# -- CLI ---------------------------------------------------------------------


def test_cli_simulate_infer_audit(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("ABC_OUTPUT_DIR", str(tmp_path / "env"))
    sim = tmp_path / "sim.json"
    sim.write_text(json.dumps({"model": {"id": "queue", "k": 5}, "M": 400, "seed": 3}))
    assert main(["simulate", "--config", str(sim)]) == 0
    table = capsys.readouterr().out.strip()
    assert table.startswith(str(tmp_path / "env"))
    header = open(table).readline().strip()
    assert header == "param_1,param_2,param_3,stat_1,stat_2,stat_3,stat_4,stat_5"

    inf = tmp_path / "infer.json"
    inf.write_text(json.dumps({
        "model": {"id": "queue", "k": 5}, "table": table, "methods": ["rejection", "locl"],
        "p_delta": [0.5], "truth": [1.0, 5.0, 0.2], "seed": 3,
    }))
    assert main(["infer", "--config", str(inf), "--output", str(tmp_path / "inf")]) == 0
    run = capsys.readouterr().out.strip()
    summary = json.loads(open(f"{run}/quantiles.json").read())
    assert [r["method"] for r in summary["results"]] == ["rejection", "locl"]

    bench_cfg = tmp_path / "bench.json"
    bench_cfg.write_text(json.dumps(ex1_config(methods=["rejection"], replicates=2)))
    assert main(["bench", "--config", str(bench_cfg), "--output", str(tmp_path / "b")]) == 0
    run = capsys.readouterr().out.strip()
    assert main(["audit", "--report", f"{run}/report.json"]) == 0


def test_cli_bad_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(ex1_config(methods=[])))
    assert main(["bench", "--config", str(bad), "--output", str(tmp_path)]) == 2
    assert "method list is empty" in capsys.readouterr().err
    assert main(["bench", "--config", str(tmp_path / "missing.json")]) == 2


def test_cli_failure_exit_code(tmp_path, monkeypatch):
    monkeypatch.setattr(bench, "infer", lambda *a, **k: (_ for _ in ()).throw(ConfigError("boom")))
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(ex1_config(methods=["rejection"], replicates=1, reference=None)))
    assert main(["bench", "--config", str(cfg), "--output", str(tmp_path)]) == 1
