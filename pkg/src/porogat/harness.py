"""Experiment driver: cells, sweeps, ablations, mechanism insight files, figures.

Every cell writes into its own directory under the output root. Tables are
comma-separated, plot data is tab-separated, and each table has a matching
PNG figure rendered with matplotlib's Agg backend.
"""

from __future__ import annotations

import json
import logging
import math
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import nnkit
from .core import RngHandle, RunConfig, load_config
from .encoder import importance_prior
from .metrics import METRIC_NAMES, MetricReport, spearman
from .pipeline import CellResult, Pipeline, StageError, write_cell_artifacts
from .privacy import PrivacyBudget, allocate_budget, uniform_schedule

log = logging.getLogger(__name__)

DEFAULT_EPS = (0.5, 1.0, 2.0, 4.0, 8.0)
PRIVATE_MODES = ("uniform", "fi")
ABLATIONS = ("full", "no_oversampling", "beta0", "alpha0")
ABLATION_LABELS = {"full": "full", "no_oversampling": "w/o oversampling",
                   "beta0": "w/o anisotropy (beta=0)", "alpha0": "thermal-only graph (alpha=0)"}
TABLE_METRICS = ("auc", "aupr", "precision", "recall", "f1", "f1_star")


@dataclass(frozen=True, order=True)
class CellKey:
    mode: str
    epsilon: float
    seed: int
    ablation: str = "full"

    @property
    def name(self) -> str:
        return f"{self.ablation}/{self.mode}_eps{self.epsilon:g}/seed{self.seed}"

    def config(self, base: RunConfig) -> RunConfig:
        """The run configuration this cell executes."""
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")
        cfg = base.replace(privacy_mode=self.mode, epsilon=self.epsilon, seeds=(self.seed,))
        if self.ablation == "no_oversampling":
            cfg = cfg.replace(oversampling_enabled=False)
        elif self.ablation == "beta0":
            cfg = cfg.replace(beta=0.0)
        elif self.ablation == "alpha0":
            cfg = cfg.replace(alpha=0.0)
        return cfg


@dataclass
class ExperimentPlan:
    cells: list[CellKey]
    config: RunConfig
    out: Path

    def __post_init__(self):
        self.out = Path(self.out)
        if len(set(self.cells)) != len(self.cells):
            raise ValueError("experiment plan has duplicate cells")


@dataclass
class FailureRecord:
    cell: str
    stage: str
    error_type: str
    message: str
    trace: str = ""

    def to_dict(self) -> dict:
        return {"cell": self.cell, "stage": self.stage, "error_type": self.error_type,
                "message": self.message, "traceback": self.trace}


@dataclass
class PlanResult:
    reports: dict[CellKey, MetricReport] = field(default_factory=dict)
    failures: dict[CellKey, FailureRecord] = field(default_factory=dict)
    artifacts: dict[str, dict] = field(default_factory=dict)
    results: dict[CellKey, CellResult] = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return 2 if self.failures else 0


def run_cell(pipe: Pipeline, base: RunConfig, key: CellKey, out: Path | None = None,
             keep_result: bool = False):
    """Run one cell. Returns ``(report | None, failure | None, artifacts, result)``."""
    cfg = key.config(base)
    try:
        res = pipe.run(cfg, key.seed)
    except StageError as exc:
        cause = exc.cause
        fail = FailureRecord(key.name, exc.stage, type(cause).__name__, str(cause),
                             "".join(traceback.format_exception(type(cause), cause,
                                                                cause.__traceback__)))
        log.error("cell %s failed in %s: %s", key.name, exc.stage, cause)
        arts = {}
        if out is not None:
            cdir = out / "cells" / key.name
            cdir.mkdir(parents=True, exist_ok=True)
            p = cdir / "failure.json"
            p.write_text(json.dumps(fail.to_dict(), indent=2))
            arts = {"failure": str(p)}
        return None, fail, arts, None
    arts = write_cell_artifacts(res, cfg, out / "cells" / key.name, key.seed) if out else {}
    return res.report, None, arts, (res if keep_result else None)


def run_plan(plan: ExperimentPlan, pipe: Pipeline | None = None, keep_results: bool = False,
             progress=None) -> PlanResult:
    """Run all cells sequentially; a failing cell never stops the others."""
    pipe = pipe or Pipeline(cfg=plan.config)
    out = PlanResult()
    for key in plan.cells:
        rep, fail, arts, res = run_cell(pipe, plan.config, key, plan.out, keep_results)
        out.artifacts[key.name] = {"status": "ok" if fail is None else "failed", **arts}
        if fail is None:
            out.reports[key] = rep
            if res is not None:
                out.results[key] = res
        else:
            out.failures[key] = fail
        if progress is not None:
            progress(key, rep, fail)
    return out


def write_manifest(out: Path, result: PlanResult, extra: dict | None = None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"cells": result.artifacts, "failed": sorted(k.name for k in result.failures)}
    doc.update(extra or {})
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


# -- aggregation --------------------------------------------------------------

def _mean_std(reports: Sequence[MetricReport], name: str):
    vals = np.array([getattr(r, name) for r in reports], dtype=float)
    return float(vals.mean()), float(vals.std())


@dataclass
class FrontierRow:
    mode: str
    epsilon: float
    n_seeds: int
    mean: dict[str, float]
    std: dict[str, float]
    recovery_pct: float = float("nan")


def frontier_table(reports: dict[CellKey, MetricReport], eps_list: Iterable[float],
                   modes: Iterable[str] = PRIVATE_MODES) -> list[FrontierRow]:
    """Oracle row first, then one row per (mode, epsilon) with seed means and stds.

    Recovery is ``100 * f1_star / oracle f1_star`` on seed means; it is left
    NaN (with a warning) when the oracle cell is missing.
    """
    def row(mode, eps, reps):
        return FrontierRow(mode, eps, len(reps),
                           {m: _mean_std(reps, m)[0] for m in TABLE_METRICS},
                           {m: _mean_std(reps, m)[1] for m in TABLE_METRICS})

    rows = []
    oracle = [r for k, r in reports.items() if k.mode == "none" and k.ablation == "full"]
    if oracle:
        rows.append(row("none", float("nan"), oracle))
    else:
        log.warning("no oracle cell; recovery column omitted")
    for mode in modes:
        for eps in eps_list:
            reps = [r for k, r in reports.items()
                    if k.mode == mode and k.epsilon == eps and k.ablation == "full"]
            if not reps:
                continue
            fr = row(mode, eps, reps)
            if oracle and rows[0].mean["f1_star"] > 0:
                fr.recovery_pct = 100.0 * fr.mean["f1_star"] / rows[0].mean["f1_star"]
            rows.append(fr)
    return rows


def write_frontier(rows: Sequence[FrontierRow], out: Path) -> dict[str, str]:
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    header = ["mode", "epsilon", "n_seeds"]
    for m in TABLE_METRICS:
        header += [f"{m}_mean", f"{m}_std"]
    header.append("recovery_pct")
    lines = [",".join(header)]
    for r in rows:
        cells = [r.mode, "" if math.isnan(r.epsilon) else f"{r.epsilon:g}", str(r.n_seeds)]
        for m in TABLE_METRICS:
            cells += [f"{r.mean[m]:.6f}", f"{r.std[m]:.6f}"]
        cells.append("" if math.isnan(r.recovery_pct) else f"{r.recovery_pct:.2f}")
        lines.append(",".join(cells))
    p = out / "frontier.csv"
    p.write_text("\n".join(lines) + "\n")
    paths["frontier_table"] = str(p)
    oracle = next((r for r in rows if r.mode == "none"), None)
    for m in TABLE_METRICS:
        p = out / f"plot_{m}.tsv"
        with p.open("w") as fh:
            fh.write("mode\tepsilon\tmean\tstd\n")
            for r in rows:
                if r.mode != "none":
                    fh.write(f"{r.mode}\t{r.epsilon:g}\t{float(r.mean[m])!r}\t{float(r.std[m])!r}\n")
            if oracle is not None:
                fh.write(f"none\tinf\t{float(oracle.mean[m])!r}\t{float(oracle.std[m])!r}\n")
        paths[f"plot_{m}"] = str(p)
    paths["frontier_figure"] = str(plot_frontier(rows, out / "frontier.png"))
    return paths


def ablation_table(reports: dict[CellKey, MetricReport]) -> list[tuple[str, int, dict, dict]]:
    rows = []
    for ab in ABLATIONS:
        reps = [r for k, r in reports.items() if k.ablation == ab]
        if reps:
            rows.append((ab, len(reps),
                         {m: _mean_std(reps, m)[0] for m in TABLE_METRICS},
                         {m: _mean_std(reps, m)[1] for m in TABLE_METRICS}))
    return rows


def write_ablation(rows, out: Path) -> dict[str, str]:
    out.mkdir(parents=True, exist_ok=True)
    cols = ("auc", "aupr", "recall")
    lines = ["variant,label,n_seeds," + ",".join(f"{m}_mean,{m}_std" for m in cols)]
    for ab, n, mean, std in rows:
        vals = ",".join(f"{mean[m]:.6f},{std[m]:.6f}" for m in cols)
        lines.append(f"{ab},{ABLATION_LABELS[ab]},{n},{vals}")
    p = out / "ablation.csv"
    p.write_text("\n".join(lines) + "\n")
    return {"ablation_table": str(p),
            "ablation_figure": str(plot_ablation(rows, out / "ablation.png"))}


# -- mechanism insight ---------------------------------------------------------

@dataclass
class MechanismReport:
    q_sorted: np.ndarray  # normalised importance, descending
    sigma_fi: np.ndarray
    sigma_uniform: np.ndarray
    q: np.ndarray
    rho: float | None  # None means the schedule is isotropic
    rho_posthoc: float | None = None
    q_posthoc: np.ndarray | None = None

    @property
    def rho_text(self) -> str:
        return "isotropic" if self.rho is None else f"{self.rho:.6f}"

    @property
    def rho_posthoc_text(self) -> str:
        if self.q_posthoc is None:
            return "not computed"
        return "isotropic" if self.rho_posthoc is None else f"{self.rho_posthoc:.6f}"


def _spearman_or_none(u, v):
    try:
        return spearman(u, v)
    except ValueError:
        return None  # constant sigma (beta = 0) or constant q


def posthoc_importance(features: np.ndarray, labels: np.ndarray, rng: RngHandle, epochs: int = 20,
                       lr: float = 1e-2, batch_size: int = 64) -> np.ndarray:
    """Importance re-estimated from released features.

    A two-row linear head is trained on standardised released training
    features with class-balanced batches; the result is its mean absolute
    weight per column, as for the warmup prior. The head starts at zero:
    softmax gradients are opposite on the two rows, so from a random start
    mean |W| would keep much of the initial draw.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    sd = X.std(axis=0)
    X = (X - X.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    gen = rng.child("posthoc").generator()
    store = nnkit.ParamStore()
    store.add("W", np.zeros((2, X.shape[1])))
    store.add("b", np.zeros(2))
    sampler = nnkit.weighted_sampler(y, 0.5, batch_size, gen)
    for _ in range(epochs * max(1, int(np.ceil(y.size / batch_size)))):
        idx = next(sampler)
        _, dlog = nnkit.smoothed_cross_entropy(nnkit.dense_forward(X[idx], store["W"], store["b"]),
                                               y[idx], 0.0)
        _, dW, db = nnkit.dense_backward(dlog, X[idx], store["W"])
        store.set_grads({"W": dW, "b": db})
        nnkit.adam_step(store, lr)
    return importance_prior(store["W"])


def mechanism_report(q: np.ndarray, budget: PrivacyBudget, D: int | None = None,
                     q_posthoc: np.ndarray | None = None) -> MechanismReport:
    """Coupling between importance and noise scale.

    The formula-level rank correlation uses the warmup prior ``q``; when
    ``q_posthoc`` (see :func:`posthoc_importance`) is given, its rank
    correlation with the same noise scales is reported as well.
    """
    q = np.asarray(q, dtype=float)
    D = D or q.size
    fi = allocate_budget(q, budget, D)
    uni = uniform_schedule(budget, D)
    rho_post = None if q_posthoc is None else _spearman_or_none(q_posthoc, fi.sigma)
    return MechanismReport(np.sort(q / q.sum())[::-1], fi.sigma, uni.sigma, q,
                           _spearman_or_none(q, fi.sigma), rho_post, q_posthoc)


def write_mechanism(rep: MechanismReport, out: Path) -> dict[str, str]:
    out.mkdir(parents=True, exist_ok=True)
    order = np.argsort(-rep.q, kind="stable")
    p1, p2, p3, p4 = (out / n for n in ("mech_importance.tsv", "mech_sigma_rank.tsv",
                                        "mech_scatter.tsv", "mech_summary.txt"))
    with p1.open("w") as fh:
        fh.write("rank\tq_normalized\n")
        for i, v in enumerate(rep.q_sorted, 1):
            fh.write(f"{i}\t{float(v)!r}\n")
    with p2.open("w") as fh:
        fh.write("rank\tdim\tsigma_fi\tsigma_uniform\n")
        for i, d in enumerate(order, 1):
            fh.write(f"{i}\t{d}\t{float(rep.sigma_fi[d])!r}\t{float(rep.sigma_uniform[d])!r}\n")
    with p3.open("w") as fh:
        post = rep.q_posthoc is not None
        fh.write("dim\tq\tsigma_fi" + ("\tq_posthoc\n" if post else "\n"))
        for d in range(rep.q.size):
            extra = f"\t{float(rep.q_posthoc[d])!r}" if post else ""
            fh.write(f"{d}\t{float(rep.q[d])!r}\t{float(rep.sigma_fi[d])!r}{extra}\n")
    p4.write_text(f"spearman_q_sigma = {rep.rho_text}\n"
                  f"spearman_posthoc_q_sigma = {rep.rho_posthoc_text}\n"
                  f"sigma_fi_min = {float(rep.sigma_fi.min())!r}\nsigma_fi_max = {float(rep.sigma_fi.max())!r}\n"
                  f"sigma_uniform = {float(rep.sigma_uniform[0])!r}\n")
    return {"mech_importance": str(p1), "mech_sigma_rank": str(p2), "mech_scatter": str(p3),
            "mech_summary": str(p4),
            "mech_figure": str(plot_mechanism(rep, out / "mechanism.png"))}


def read_mech_summary(path: Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            out[k] = v
    return out


# -- figures --------------------------------------------------------------------

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_frontier(rows: Sequence[FrontierRow], path: Path) -> Path:
    plt = _pyplot()
    metrics = ("auc", "aupr", "f1_star")
    fig, axes = plt.subplots(1, len(metrics), figsize=(12, 3.6))
    oracle = next((r for r in rows if r.mode == "none"), None)
    for ax, m in zip(axes, metrics):
        for mode, marker in (("uniform", "s"), ("fi", "o")):
            rs = sorted((r for r in rows if r.mode == mode), key=lambda r: r.epsilon)
            if rs:
                ax.errorbar([r.epsilon for r in rs], [r.mean[m] for r in rs],
                            yerr=[r.std[m] for r in rs], marker=marker, capsize=3, label=mode)
        if oracle is not None:
            ax.axhline(oracle.mean[m], color="k", ls="--", lw=1, label="oracle")
        ax.set_xscale("log", base=2)
        ax.set_xlabel("epsilon")
        ax.set_title(m)
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_ablation(rows, path: Path) -> Path:
    plt = _pyplot()
    cols = ("auc", "aupr", "recall")
    fig, ax = plt.subplots(figsize=(7, 3.6))
    width = 0.8 / max(len(rows), 1)
    x = np.arange(len(cols))
    for i, (ab, _, mean, std) in enumerate(rows):
        ax.bar(x + i * width, [mean[m] for m in cols], width, yerr=[std[m] for m in cols],
               capsize=2, label=ABLATION_LABELS[ab])
    ax.set_xticks(x + width * (len(rows) - 1) / 2, cols)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_mechanism(rep: MechanismReport, path: Path) -> Path:
    plt = _pyplot()
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    ranks = np.arange(1, rep.q.size + 1)
    order = np.argsort(-rep.q, kind="stable")
    axes[0].bar(ranks, rep.q_sorted)
    axes[0].set_title("normalised importance (sorted)")
    axes[0].set_xlabel("rank")
    axes[1].plot(ranks, rep.sigma_fi[order], label="fi")
    axes[1].plot(ranks, rep.sigma_uniform[order], ls="--", label="uniform")
    axes[1].set_title("noise scale by importance rank")
    axes[1].set_xlabel("rank")
    axes[1].legend(fontsize=8)
    axes[2].scatter(rep.q, rep.sigma_fi, s=10)
    axes[2].set_title(f"q vs sigma (spearman {rep.rho_text})")
    axes[2].set_xlabel("q")
    axes[2].set_ylabel("sigma")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


# -- plans ----------------------------------------------------------------------

def sweep_cells(eps_list, modes, seeds, include_oracle: bool = True, oracle_eps: float = 2.0):
    cells = [CellKey("none", oracle_eps, s) for s in seeds] if include_oracle else []
    cells += [CellKey(m, float(e), s) for m in modes for e in eps_list for s in seeds]
    return cells


def ablation_cells(eps: float, seeds):
    """All ablation rows run in fi mode at one epsilon."""
    return [CellKey("fi", float(eps), s, ab) for ab in ABLATIONS for s in seeds]


def replay_cell(cell_dir: Path, pipe: Pipeline | None = None) -> tuple[bool, MetricReport, MetricReport]:
    """Re-run a cell from its on-disk config and compare reports bit for bit."""
    cell_dir = Path(cell_dir)
    cfg = load_config(cell_dir / "config.txt")
    stored = MetricReport.read(cell_dir / "report.txt")
    pipe = pipe or Pipeline(cfg=cfg)
    fresh = pipe.run(cfg, cfg.seeds[0]).report
    same = all(_same_float(getattr(stored, n), getattr(fresh, n)) for n in METRIC_NAMES)
    return same, stored, fresh


def _same_float(a: float, b: float) -> bool:
    return (math.isnan(a) and math.isnan(b)) or a == b

