import csv
import json
import math

import numpy as np
import pytest
from click.testing import CliRunner

from porogat import harness, pipeline
from porogat.cli import main
from porogat.core import RunConfig, dump_config
from porogat.dataio import write_dataset
from porogat.metrics import MetricReport
from porogat.privacy import PrivacyBudget

FAST = dict(warmup_epochs=1, epochs=2, hidden=8, heads=2, d_img=8, d_ctx=4, seeds=(0,))


@pytest.fixture(scope="module")
def fast_cfg():
    return RunConfig(**FAST)


@pytest.fixture(scope="module")
def pipe(small_records, fast_cfg):
    return pipeline.Pipeline(small_records, fast_cfg)


@pytest.fixture(scope="module")
def cli_config(tmp_path_factory, small_records):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data.tsv"
    write_dataset(small_records, data)
    cfg = RunConfig(**FAST, dataset_path=str(data))
    path = root / "fast.conf"
    path.write_text(dump_config(cfg))
    return path


def test_cell_names_and_configs():
    base = RunConfig()
    key = harness.CellKey("fi", 2.0, 3, "beta0")
    assert key.name == "beta0/fi_eps2/seed3"
    cfg = key.config(base)
    assert (cfg.beta, cfg.epsilon, cfg.seeds, cfg.privacy_mode) == (0.0, 2.0, (3,), "fi")
    assert harness.CellKey("fi", 2.0, 0, "no_oversampling").config(base).oversampling_enabled is False
    assert harness.CellKey("fi", 2.0, 0, "alpha0").config(base).alpha == 0.0
    with pytest.raises(ValueError):
        harness.CellKey("fi", 2.0, 0, "bogus").config(base)


def test_plan_rejects_duplicates(tmp_path):
    k = harness.CellKey("fi", 1.0, 0)
    with pytest.raises(ValueError, match="duplicate"):
        harness.ExperimentPlan([k, k], RunConfig(), tmp_path)


def test_sweep_and_ablation_cell_lists():
    cells = harness.sweep_cells((0.5, 8.0), ("uniform", "fi"), (0, 1))
    assert len(cells) == 2 + 2 * 2 * 2
    assert sum(c.mode == "none" for c in cells) == 2
    ab = harness.ablation_cells(2.0, (0, 1, 2))
    assert len(ab) == 12 and {c.mode for c in ab} == {"fi"}


def test_plan_isolates_failures_and_replays(tmp_path, pipe, fast_cfg, monkeypatch):
    real = pipe.run

    def flaky(cfg, seed):
        if cfg.privacy_mode == "uniform":
            raise pipeline.StageError("graph", RuntimeError("forced"))
        return real(cfg, seed)

    cells = [harness.CellKey("none", 2.0, 0), harness.CellKey("uniform", 1.0, 0),
             harness.CellKey("fi", 1.0, 0)]
    plan = harness.ExperimentPlan(cells, fast_cfg, tmp_path)
    monkeypatch.setattr(pipe, "run", flaky)
    res = harness.run_plan(plan, pipe)
    monkeypatch.undo()
    assert res.exit_code == 2
    assert set(res.reports) == {cells[0], cells[2]}
    fail = json.loads((tmp_path / "cells" / cells[1].name / "failure.json").read_text())
    assert fail["stage"] == "graph" and fail["message"] == "forced"
    man = json.loads(harness.write_manifest(tmp_path, res).read_text())
    assert man["failed"] == [cells[1].name]
    assert man["cells"][cells[2].name]["status"] == "ok"

    same, stored, fresh = harness.replay_cell(tmp_path / "cells" / cells[2].name, pipe)
    assert same, (stored, fresh)


def test_frontier_table_rows_and_recovery(tmp_path):
    def rep(f1):
        return MetricReport(0.9, 0.5, 0.5, 0.5, f1, f1, 0.5, f1)

    reports = {harness.CellKey("none", 2.0, s): rep(0.8) for s in (0, 1)}
    for m in ("uniform", "fi"):
        for e in (1.0, 4.0):
            for s in (0, 1):
                reports[harness.CellKey(m, e, s)] = rep(0.4 + 0.1 * s)
    rows = harness.frontier_table(reports, (1.0, 4.0))
    assert len(rows) == 1 + 2 * 2
    assert rows[0].mode == "none" and math.isnan(rows[0].recovery_pct)
    assert rows[1].recovery_pct == pytest.approx(100 * 0.45 / 0.8)
    assert rows[1].std["f1_star"] == pytest.approx(0.05)
    paths = harness.write_frontier(rows, tmp_path)
    with open(paths["frontier_table"]) as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == 5 and table[0]["epsilon"] == ""
    assert (tmp_path / "frontier.png").stat().st_size > 0
    no_oracle = harness.frontier_table({k: v for k, v in reports.items() if k.mode != "none"},
                                       (1.0, 4.0))
    assert all(math.isnan(r.recovery_pct) for r in no_oracle)


@pytest.mark.parametrize("beta", [0.6, 0.0])
def test_mechanism_report_files(tmp_path, beta):
    q = np.random.default_rng(1).random(12)
    rep = harness.mechanism_report(q, PrivacyBudget(2.0, 1e-5, beta, 0.01, 1.0, 1.0))
    paths = harness.write_mechanism(rep, tmp_path)
    summary = harness.read_mech_summary(paths["mech_summary"])
    if beta == 0.0:
        assert summary["spearman_q_sigma"] == "isotropic"
    else:
        assert float(summary["spearman_q_sigma"]) == -1.0
    assert summary["spearman_posthoc_q_sigma"] == "not computed"
    rows = (tmp_path / "mech_sigma_rank.tsv").read_text().splitlines()[1:]
    assert len(rows) == 12
    assert (tmp_path / "mechanism.png").stat().st_size > 0


def test_posthoc_importance_finds_the_informative_columns():
    gen = np.random.default_rng(2)
    y = (gen.random(400) < 0.2).astype(int)
    X = gen.normal(size=(400, 6))
    X[:, 1] += 3.0 * y
    X[:, 4] += 1.5 * y
    q = harness.posthoc_importance(X, y, harness.RngHandle(0, "t"))
    assert list(np.argsort(-q)[:2]) == [1, 4]
    noisy = harness.mechanism_report(np.array([0.1, 0.5, 0.2, 0.4]),
                                     PrivacyBudget(1.0, 1e-5, 0.6), q_posthoc=np.array([1, 4, 2, 3]))
    assert noisy.rho_posthoc == -1.0


def test_cli_generate(tmp_path):
    res = CliRunner().invoke(main, ["--out", str(tmp_path), "generate"])
    assert res.exit_code == 0, res.output
    lines = (tmp_path / "dataset.tsv").read_text().splitlines()
    assert len(lines) > 1500
    assert json.loads((tmp_path / "manifest.json").read_text())["dataset"].endswith("dataset.tsv")


def test_cli_run_and_mech_report(tmp_path, cli_config):
    r = CliRunner().invoke(main, ["--config", str(cli_config), "--out", str(tmp_path),
                                  "--eps", "1", "--mode", "uniform", "run"])
    assert r.exit_code == 0, r.output
    assert (tmp_path / "cells" / "full" / "uniform_eps1" / "seed0" / "report.txt").exists()
    assert len((tmp_path / "reports.csv").read_text().splitlines()) == 2
    m = CliRunner().invoke(main, ["--config", str(cli_config), "--out", str(tmp_path / "m"),
                                  "mech-report"])
    assert m.exit_code == 0, m.output
    assert "spearman(q, sigma) = -1.000000" in m.output
    post = harness.read_mech_summary(tmp_path / "m" / "mech_summary.txt")["spearman_posthoc_q_sigma"]
    assert -1.0 <= float(post) <= 1.0
    assert (tmp_path / "m" / "mechanism.png").exists()


def test_cli_sweep_partial_failure_exits_2(tmp_path, cli_config, monkeypatch):
    real = pipeline.Pipeline.run

    def flaky(self, cfg, seed):
        if cfg.privacy_mode == "fi" and cfg.epsilon == 8.0:
            raise pipeline.StageError("train", FloatingPointError("diverged"))
        return real(self, cfg, seed)

    monkeypatch.setattr(pipeline.Pipeline, "run", flaky)
    r = CliRunner().invoke(main, ["--config", str(cli_config), "--out", str(tmp_path),
                                  "--eps", "1,8", "sweep"])
    assert r.exit_code == 2, r.output
    with open(tmp_path / "frontier.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [(x["mode"], x["epsilon"]) for x in rows] == [
        ("none", ""), ("uniform", "1"), ("uniform", "8"), ("fi", "1")]
    assert (tmp_path / "frontier.png").exists()
    assert (tmp_path / "plot_auc.tsv").exists()
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["failed"] == ["full/fi_eps8/seed0"]


def test_cli_ablate(tmp_path, cli_config):
    r = CliRunner().invoke(main, ["--config", str(cli_config), "--out", str(tmp_path), "ablate"])
    assert r.exit_code == 0, r.output
    with open(tmp_path / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [x["variant"] for x in rows] == list(harness.ABLATIONS)
    assert (tmp_path / "ablation.png").exists()


def test_cli_grad_check():
    r = CliRunner().invoke(main, ["grad-check"])
    assert r.exit_code == 0, r.output
    assert r.output.count("PASS") == 3


def test_cli_rejects_bad_input(tmp_path):
    bad = tmp_path / "bad.conf"
    bad.write_text("epsilon = -1\n")
    r = CliRunner().invoke(main, ["--config", str(bad), "run"])
    assert r.exit_code != 0 and "config" in r.output
    r = CliRunner().invoke(main, ["--eps", "a,b", "sweep"])
    assert r.exit_code != 0
