"""``porogat`` command line: generate, run, sweep, ablate, mech-report, grad-check."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import harness, nnkit
from .core import ConfigError, RngHandle, RunConfig, load_config
from .dataio import write_dataset
from .encoder import Encoder
from .hgat import EdgeIndex, HgatConfig, HgatModel, gradient_selfcheck
from .pipeline import Pipeline, load_records
from .privacy import PrivacyBudget, allocate_budget, privatize_dataset

log = logging.getLogger("porogat")


def _parse_eps(text: str | None):
    if not text:
        return None
    try:
        vals = tuple(float(s) for s in text.replace(" ", "").split(",") if s)
    except ValueError:
        raise click.BadParameter(f"cannot parse epsilon list {text!r}") from None
    if not vals or any(v <= 0 for v in vals):
        raise click.BadParameter("epsilon values must be positive")
    return vals


class Ctx:
    def __init__(self, cfg: RunConfig, out: Path, seeds, eps, mode):
        self.cfg, self.out, self.seeds, self.eps, self.mode = cfg, out, seeds, eps, mode

    def pipeline(self) -> Pipeline:
        return Pipeline(cfg=self.cfg)


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="Flat key = value config file.")
@click.option("--out", type=click.Path(file_okay=False), default="runs", show_default=True,
              help="Output directory.")
@click.option("--seed", type=int, default=None, help="Run a single seed instead of the config's list.")
@click.option("--eps", default=None, help="Comma-separated epsilon list, e.g. 0.5,2,8.")
@click.option("--mode", type=click.Choice(["none", "uniform", "fi"]), default=None,
              help="Privacy mode (run) or mode filter (sweep).")
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
@click.pass_context
def main(ctx, config_path, out, seed, eps, mode, verbose):
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(config_path) if config_path else RunConfig()
    except ConfigError as exc:
        raise click.ClickException(f"config: {exc}") from None
    seeds = (seed,) if seed is not None else cfg.seeds
    ctx.obj = Ctx(cfg, Path(out), seeds, _parse_eps(eps), mode)


def _progress(key, rep, fail):
    if fail is None:
        click.echo(f"{key.name}: auc={rep.auc:.4f} aupr={rep.aupr:.4f} f1*={rep.f1_star:.4f}",
                   err=True)
    else:
        click.echo(f"{key.name}: FAILED in {fail.stage}: {fail.error_type}: {fail.message}",
                   err=True)


@main.command()
@click.pass_obj
def generate(obj: Ctx):
    """Write the synthetic dataset described by the config."""
    obj.out.mkdir(parents=True, exist_ok=True)
    recs = load_records(obj.cfg)
    path = obj.out / "dataset.tsv"
    write_dataset(recs, path)
    n_pos = sum(r.label for r in recs)
    (obj.out / "manifest.json").write_text(json.dumps({"dataset": str(path)}, indent=2))
    click.echo(f"wrote {len(recs)} records ({n_pos} porous) to {path}")


@main.command()
@click.pass_obj
def run(obj: Ctx):
    """Run one cell per seed at the first --eps value (or the config's epsilon)."""
    mode = obj.mode or obj.cfg.privacy_mode
    eps = obj.eps[0] if obj.eps else obj.cfg.epsilon
    cells = [harness.CellKey(mode, float(eps), s) for s in obj.seeds]
    plan = harness.ExperimentPlan(cells, obj.cfg, obj.out)
    res = harness.run_plan(plan, obj.pipeline(), progress=_progress)
    lines = ["cell," + ",".join(harness.METRIC_NAMES)]
    lines += [rep.csv_row((k.name,)) for k, rep in res.reports.items()]
    (obj.out / "reports.csv").write_text("\n".join(lines) + "\n")
    write_manifest = harness.write_manifest(obj.out, res, {"reports": str(obj.out / "reports.csv")})
    click.echo(f"manifest: {write_manifest}")
    sys.exit(res.exit_code)


@main.command()
@click.pass_obj
def sweep(obj: Ctx):
    """Oracle plus uniform/fi cells over the epsilon list; writes the frontier table."""
    eps_list = obj.eps or harness.DEFAULT_EPS
    modes = harness.PRIVATE_MODES if obj.mode in (None, "none") else (obj.mode,)
    if obj.mode == "none":
        modes = ()
    cells = harness.sweep_cells(eps_list, modes, obj.seeds)
    plan = harness.ExperimentPlan(cells, obj.cfg, obj.out)
    res = harness.run_plan(plan, obj.pipeline(), progress=_progress)
    rows = harness.frontier_table(res.reports, eps_list, modes)
    paths = harness.write_frontier(rows, obj.out)
    click.echo(Path(paths["frontier_table"]).read_text(), nl=False)
    click.echo(f"manifest: {harness.write_manifest(obj.out, res, paths)}")
    sys.exit(res.exit_code)


@main.command()
@click.pass_obj
def ablate(obj: Ctx):
    """Full model vs w/o oversampling, beta=0 and alpha=0 at one epsilon (default 2)."""
    eps = obj.eps[0] if obj.eps else 2.0
    plan = harness.ExperimentPlan(harness.ablation_cells(eps, obj.seeds), obj.cfg, obj.out)
    res = harness.run_plan(plan, obj.pipeline(), progress=_progress)
    paths = harness.write_ablation(harness.ablation_table(res.reports), obj.out)
    click.echo(Path(paths["ablation_table"]).read_text(), nl=False)
    click.echo(f"manifest: {harness.write_manifest(obj.out, res, paths)}")
    sys.exit(res.exit_code)


@main.command("mech-report")
@click.pass_obj
def mech_report(obj: Ctx):
    """Importance, noise-scale and coupling files from the warmup of the first seed."""
    eps = obj.eps[0] if obj.eps else obj.cfg.epsilon
    pipe = obj.pipeline()
    s0 = pipe.stage0(obj.cfg, obj.seeds[0])
    budget = PrivacyBudget(eps, obj.cfg.delta, obj.cfg.beta, obj.cfg.eta, *s0.clip_bounds)
    # the fi release of the training split, with the same noise stream as a run cell
    train_recs = pipe.splits[0]
    table = privatize_dataset([train_recs], s0.encoder, allocate_budget(s0.q, budget, obj.cfg.D),
                              s0.clip_bounds, RngHandle(obj.seeds[0], "noise"), budget)
    q_post = harness.posthoc_importance(table.features, [r.label for r in train_recs],
                                        RngHandle(obj.seeds[0], "mech-report"))
    rep = harness.mechanism_report(s0.q, budget, obj.cfg.D, q_post)
    paths = harness.write_mechanism(rep, obj.out)
    (obj.out / "manifest.json").write_text(json.dumps(paths, indent=2, sort_keys=True))
    click.echo(f"spearman(q, sigma) = {rep.rho_text}")
    click.echo(f"spearman(post-hoc q, sigma) = {rep.rho_posthoc_text}")
    click.echo(f"sigma range [{rep.sigma_fi.min():.4g}, {rep.sigma_fi.max():.4g}], "
               f"uniform {rep.sigma_uniform[0]:.4g}")


def tiny_instance(n: int = 10, in_dim: int = 5, seed: int = 0, self_loops_only: bool = False):
    """A small random graph for gradient checks: ``(X, edges, labels)``."""
    gen = np.random.default_rng(seed)
    src, dst, w = [], [], []
    for i in range(n):
        if not self_loops_only:
            for j in gen.choice(n, 3, replace=False):
                if j != i:
                    src.append(i)
                    dst.append(int(j))
                    w.append(float(gen.random()))
        src.append(i)
        dst.append(i)
        w.append(1.0)
    labels = np.zeros(n, dtype=int)
    labels[gen.choice(n, max(2, n // 3), replace=False)] = 1
    return gen.normal(size=(n, in_dim)), EdgeIndex.from_lists(n, src, dst, w), labels


@main.command("grad-check")
@click.option("--tol", type=float, default=1e-4, show_default=True)
@click.pass_obj
def grad_check(obj: Ctx, tol):
    """Finite-difference checks of the HGAT and the warmup encoder."""
    seed = obj.seeds[0]
    ok = True
    for label, loops_only in (("hgat", False), ("hgat self-loops only", True)):
        X, edges, y = tiny_instance(seed=seed, self_loops_only=loops_only)
        model = HgatModel.init(HgatConfig(X.shape[1], hidden=4, heads=2, layers=2,
                                          temperature=obj.cfg.attn_temperature),
                               RngHandle(seed, "grad-check"))
        rep = gradient_selfcheck(model, X, edges, y, nnkit.FocalLossParams(2.0, (1.0, 2.0)), tol)
        ok &= rep.passed
        click.echo(f"{label}: max rel error {rep.max_rel_error:.3e} ({rep.worst_param}) "
                   f"{'PASS' if rep.passed else 'FAIL'}")
    gen = np.random.default_rng(seed)
    enc = Encoder.init(4, 3, 2, RngHandle(seed, "grad-check-enc"))
    S, C = gen.normal(size=(8, 16)), gen.normal(size=(8, 5))
    y = np.array([0, 1] * 4)
    _, grads, _ = enc.loss_and_grads(S, C, y)
    rep = nnkit.grad_check(lambda: enc.loss_and_grads(S, C, y)[0], enc.store.params, grads, tol)
    ok &= rep.passed
    click.echo(f"encoder: max rel error {rep.max_rel_error:.3e} ({rep.worst_param}) "
               f"{'PASS' if rep.passed else 'FAIL'}")
    sys.exit(0 if ok else 1)


if __name__ == "__main__":
    main()
