"""Command line front end: one seeded run per invocation.

    sctlab train --config cfg.json --set train.iters=2000 --out runs/a

Exit codes: 0 success, 2 configuration/input error, 3 numerical abort.
Every artifact directory gets a manifest.json with the config hash, seed and
code version.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import traceback
from importlib import metadata
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .metrics import (
    cfg_sweep, eta_sweep, mmd_rbf, schedule_dump, sliced_wasserstein, write_csv, write_plot_data,
)
from .net import CheckpointError, ConsistencyNet, load_checkpoint, save_checkpoint
from .oracle import OracleDenoiser, OracleError
from .sampler import SamplerError, draw, one_step, prior_sample, stochastic_multistep
from .schedule import ScheduleError
from .targets import TargetError, estimator_report, write_report_csv
from .trainer import CsvSink, TrainingError, train

OUT_ENV = "SCTLAB_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
COMMANDS = ("train", "sample", "eval", "variance-report", "bellman-check", "schedule-dump",
            "eta-sweep", "cfg-sweep")

INPUT_ERRORS = (ConfigError, CheckpointError, SamplerError, ScheduleError, OracleError)
NUMERIC_ERRORS = (TrainingError, TargetError, FloatingPointError, ArithmeticError)


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _where(exc) -> str:
    """module.operation of the deepest package frame in the traceback."""
    where = "cli.run"
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        mod = frame.f_globals.get("__name__", "")
        if mod.startswith("sctlab."):
            where = f"{mod.split('.', 1)[1]}.{frame.f_code.co_name}"
    return where


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    def __init__(self, command: str, cfg: ExperimentConfig, out: Path):
        self.command, self.cfg, self.out = command, cfg, out
        self.schedule = cfg.build_schedule()
        self.oracle = cfg.build_oracle()
        self.artifacts = []
        self.extra = {}

    def path(self, name: str) -> Path:
        self.artifacts.append(name)
        return self.out / name

    def write_manifest(self):
        manifest = {
            "command": self.command,
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "code_version": code_version(),
            "config": json.loads(self.cfg.canonical_json()),
            "artifacts": {a: _sha256(self.out / a) for a in sorted(self.artifacts)},
        }
        manifest.update(self.extra)
        with open(self.out / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def resolve_out(command: str, cfg: ExperimentConfig) -> Path:
    if cfg.out:
        return Path(cfg.out)
    root = os.environ.get(OUT_ENV, "runs")
    return Path(root) / command


def _load_model(path):
    if path is None:
        raise ConfigError("this command needs a checkpoint (--checkpoint or sample.checkpoint)")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"checkpoint {p} does not exist")
    net, shadows = load_checkpoint(p)
    return net, shadows, _sha256(p)


def _eval_view(cfg: ExperimentConfig, net: ConsistencyNet, shadows):
    if cfg.train.eval_weights == "ema" and shadows:
        return net.copy(shadows[0].params)
    return net


def _star_path(cfg, ckpt):
    if cfg.sample.star_checkpoint:
        return cfg.sample.star_checkpoint
    return str(Path(ckpt).with_name("theta_star.bin"))


# commands; each returns after writing its artifacts into run.out

def cmd_train(run: Run, ctx):
    cfg = run.cfg
    net = cfg.build_net(run.oracle, run.schedule)
    plan = cfg.build_plan(run.schedule)
    sink = CsvSink(run.path("steps.csv"), run.path("snapshots.csv"))
    res = train(net, run.oracle, run.schedule, plan, cfg.train.iters, cfg.train.batch_size,
                seed=cfg.seed, sink=sink, evaluation=cfg.build_eval())
    save_checkpoint(res.net, res.shadows, run.path("checkpoint.bin"))
    save_checkpoint(res.theta_star, [], run.path("theta_star.bin"))
    run.extra["iters_done"] = res.iters_done
    run.extra["reached_at"] = res.reached_at
    print(f"trained {res.iters_done} iterations -> {run.out / 'checkpoint.bin'}")


def cmd_sample(run: Run, ctx):
    cfg = run.cfg
    net, shadows, digest = ctx["model"]
    star = None
    if cfg.sample.omega is not None:
        star, _ = load_checkpoint(_star_path(cfg, ctx["checkpoint"]))
    plan = cfg.build_sample_plan(run.schedule)
    x = draw(_eval_view(cfg, net, shadows), run.schedule, plan, cfg.sample.n, cfg.seed,
             cfg.sample.label, star)
    label = -1 if cfg.sample.label is None else cfg.sample.label
    header = [f"x{i}" for i in range(x.shape[1])] + ["label"]
    write_csv(run.path("samples.csv"), header, ([float(v) for v in row] + [label] for row in x))
    run.extra["checkpoint_sha256"] = digest


def cmd_eval(run: Run, ctx):
    cfg = run.cfg
    net, shadows, digest = ctx["model"]
    model = _eval_view(cfg, net, shadows)
    m = cfg.metrics
    rng = np.random.default_rng(cfg.seed)
    x_T = prior_sample(run.schedule, m.n_samples, net.dim, rng)
    data = run.oracle.sample_data(m.n_samples, seed=rng)
    x1 = one_step(model, run.schedule, x_T)
    x2 = stochastic_multistep(model, run.schedule, x_T, [cfg.train.two_step_time], None, rng)
    proj_seed = int(rng.integers(2 ** 31))
    k = m.mmd_samples
    rows = []
    for name, x in (("one_step", x1), ("two_step", x2)):
        rows.append(("sliced_wasserstein", name, sliced_wasserstein(x, data, m.projections, proj_seed),
                     float("nan"), len(x)))
        rep = mmd_rbf(x[:k], data[:k], seed=proj_seed)
        rows.append(("mmd_rbf", name, rep.value, rep.stderr, rep.n_a))
    write_csv(run.path("metrics.csv"), ("metric", "sampler", "value", "stderr", "n"), rows)
    _bellman_rows(run, model, shadows[0].count if shadows else 0)
    run.extra["checkpoint_sha256"] = digest


def _bellman_rows(run: Run, model, iteration):
    from .mdp import bellman_residual

    b = run.cfg.metrics.bellman
    res = bellman_residual(model, run.schedule, run.oracle, b.t, b.r, b.n_points, run.cfg.seed,
                           b.substeps)
    write_csv(run.path("bellman.csv"), ("iter", "t", "r", "residual"), [(iteration, b.t, b.r, res)])
    return res


def cmd_variance_report(run: Run, ctx):
    v = run.cfg.metrics.variance
    rows = estimator_report(run.schedule, run.oracle, v.modes, v.n_values, v.t_grid, v.trials,
                            seed=run.cfg.seed)
    write_report_csv(rows, run.path("variance.csv"))


def cmd_bellman_check(run: Run, ctx):
    if ctx.get("model") is not None:
        net, shadows, digest = ctx["model"]
        model, it = _eval_view(run.cfg, net, shadows), (shadows[0].count if shadows else 0)
        run.extra["checkpoint_sha256"] = digest
    else:
        model, it = OracleDenoiser(run.oracle, run.schedule, run.cfg.metrics.bellman.substeps), 0
        run.extra["model"] = "oracle"
    res = _bellman_rows(run, model, it)
    print(f"bellman residual {res:.3e}")


def cmd_schedule_dump(run: Run, ctx):
    cfg = run.cfg
    rows = schedule_dump(cfg.build_plan(run.schedule), run.schedule, cfg.metrics.dump_t,
                         cfg.metrics.dump_iters)
    write_csv(run.path("schedule.csv"), ("t", "iter", "r"), rows)


def _sweep_edges(cfg: ExperimentConfig, schedule):
    edges = cfg.train_edges(schedule)
    if edges is None:
        edges = cfg.build_sample_plan(schedule).edges
    if edges is None:
        from .sampler import make_edges

        edges = make_edges(schedule, cfg.sample.n_edges, cfg.sample.edge_spacing)
    return edges


def cmd_eta_sweep(run: Run, ctx):
    cfg = run.cfg
    net, shadows, digest = ctx["model"]
    edges = _sweep_edges(cfg, run.schedule)
    rows = eta_sweep(_eval_view(cfg, net, shadows), run.schedule, run.oracle, edges,
                     cfg.metrics.etas, cfg.metrics.n_samples, cfg.seed, cfg.metrics.projections)
    write_csv(run.path("eta_sweep.csv"), ("eta", "sw"), rows)
    write_plot_data(run.path("eta_sweep_plot.csv"), [(e, s, "sw_phased") for e, s in rows])
    best = min(rows, key=lambda r: r[1])
    run.extra.update(checkpoint_sha256=digest, best_eta=best[0], edges=[float(e) for e in edges])
    print(f"best eta {best[0]} (sw {best[1]:.4f})")


def cmd_cfg_sweep(run: Run, ctx):
    cfg = run.cfg
    net, shadows, digest = ctx["model"]
    star, _ = load_checkpoint(_star_path(cfg, ctx["checkpoint"]))
    rows = cfg_sweep(_eval_view(cfg, net, shadows), star, run.schedule, run.oracle,
                     cfg.metrics.omegas, cfg.metrics.n_samples, cfg.seed, cfg.metrics.projections,
                     cfg.train.two_step_time)
    write_csv(run.path("cfg_sweep.csv"), ("omega", "sw_1step", "sw_2step"), rows)
    run.extra["checkpoint_sha256"] = digest


HANDLERS = {
    "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval,
    "variance-report": cmd_variance_report, "bellman-check": cmd_bellman_check,
    "schedule-dump": cmd_schedule_dump, "eta-sweep": cmd_eta_sweep, "cfg-sweep": cmd_cfg_sweep,
}
NEEDS_MODEL = {"sample", "eval", "eta-sweep", "cfg-sweep"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sctlab", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                   help="dotted-key override, value parsed as JSON (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
    p.add_argument("--checkpoint", help="trained checkpoint for sample/eval/sweeps")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides, args.seed, args.out)
        ctx = {}
        ckpt = args.checkpoint or cfg.sample.checkpoint
        if args.command in NEEDS_MODEL or (args.command == "bellman-check" and ckpt):
            ctx["checkpoint"] = ckpt
            ctx["model"] = _load_model(ckpt)
        out = resolve_out(args.command, cfg)
        run_ = Run(args.command, cfg, out)
    except INPUT_ERRORS + (ValueError,) as exc:
        print(f"sctlab: config error in {_where(exc)}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](run_, ctx)
        run_.write_manifest()
    except NUMERIC_ERRORS as exc:
        print(f"sctlab: numerical abort in {_where(exc)}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except INPUT_ERRORS as exc:
        print(f"sctlab: config error in {_where(exc)}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"sctlab: I/O failure in {_where(exc)}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main(argv=None):
    sys.exit(run(argv))
