"""Command line entry point: ``ifpn <command> [flags]``.

Every scalar field of the experiment configuration has a flag named
``--<section>-<field>`` (for example ``--solver-max-iters``); values given on
the command line override ``--config``, which overrides the defaults.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from ..solver import SolverConfig, solve
from .bench import run_bench
from .checkpoint import load as load_checkpoint
from .checkpoint import save as save_checkpoint
from .config import ExperimentConfig, OptimizerConfig, SyntheticTaskSpec, load_config
from .data import make_splits
from .gradcheck import GradcheckConfig, gradcheck
from .train import TrainingAborted, build_model, load_metrics, metrics_to_csv, train
from .trend import run_trend, trend_settings
from ..transform import TransformConfig

SECTIONS = {
    "transform": TransformConfig,
    "solver": SolverConfig,
    "task": SyntheticTaskSpec,
    "optimizer": OptimizerConfig,
}


def _flag_type(default):
    if isinstance(default, bool):
        return lambda s: s.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if default is None:
        return int  # optional integer fields (memory, eval_iters)
    return str


def add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("experiment configuration")
    g.add_argument("--config", type=Path, help="TOML file with [transform], [solver], [task], [optimizer]")
    g.add_argument("--seed", type=int)
    g.add_argument("--eval-iters", type=int, help="forward iterations used at inference")
    g.add_argument("--init-contraction", type=float)
    for section, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            default = f.default if f.default is not dataclasses.MISSING else None
            if isinstance(default, tuple):
                continue
            g.add_argument(f"--{section}-{f.name.replace('_', '-')}", dest=f"{section}__{f.name}",
                           type=_flag_type(default), metavar=type(default).__name__.upper())


def config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    d = cfg.to_dict()
    for section in SECTIONS:
        for key in list(vars(args)):
            if key.startswith(section + "__") and getattr(args, key) is not None:
                d[section][key.split("__", 1)[1]] = getattr(args, key)
    # levels/channels are shared by the transform and the task
    for key in ("levels", "channels"):
        t = getattr(args, f"transform__{key}", None)
        k = getattr(args, f"task__{key}", None)
        if t is not None and k is None:
            d["task"][key] = t
        if k is not None and t is None:
            d["transform"][key] = k
    if args.init_contraction is not None:
        d["init_contraction"] = args.init_contraction
    cfg = ExperimentConfig.from_dict(d)
    return cfg.with_overrides(seed=args.seed, eval_iters=args.eval_iters)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_solve(args) -> int:
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        model, cfg = ckpt.model(), ckpt.config
        solver = config_from_args(args).solver if args.override_solver else cfg.solver
        if args.eval_iters is not None:
            solver = dataclasses.replace(solver, eval_iters=args.eval_iters)
    else:
        cfg = config_from_args(args)
        model, solver = build_model(cfg), cfg.solver
    if args.input:
        image = np.load(args.input).astype(np.float64)
        while image.ndim < 4:
            image = image[None]
    else:
        _, held = make_splits(cfg.task, cfg.seed)
        image = held[0][0][None]
    B = model.encode(image)
    P, report = solve(model.transform, B, solver, training=not args.eval)
    print(report.to_lines())
    if args.output:
        np.savez(args.output, **{f"level{i + 1}": a for i, a in enumerate(P)})
    return 0 if report.converged else 1


def cmd_train(args) -> int:
    cfg = config_from_args(args)

    def progress(rec):
        if rec["step"] % args.log_every == 0:
            print(f"step {rec['step']:>5} loss {rec['loss']:.5f} fwd {rec['fwd_iters']} "
                  f"bwd {rec['bwd_iters']} lr {rec['lr']:.2e}", flush=True)

    try:
        ckpt, records = train(cfg, args.metrics, progress if args.log_every > 0 else None)
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 2
    if args.out:
        save_checkpoint(ckpt, args.out)
        print(f"checkpoint written to {args.out}")
    skipped = sum(r["skipped"] for r in records)
    print(f"done: {len(records)} steps, {skipped} skipped, last loss {records[-1]['loss']:.5f}")
    return 0


def cmd_gradcheck(args) -> int:
    gc = GradcheckConfig(levels=args.levels, channels=args.channels, variant=args.variant,
                         groups=args.groups, size=args.size, seed=args.seed or 0,
                         n_coords=args.n_coords)
    report = gradcheck(gc, tuple(args.suites) if args.suites else None)
    print(report.format())
    return 0 if report.passed else 1


def cmd_trend(args) -> int:
    base = config_from_args(args)
    seeds = tuple(range(args.seeds))
    result = run_trend(base, seeds, trend_settings(args.with_unroll4),
                       progress=lambda msg: print(msg, flush=True))
    print(result.table())
    return 0 if result.ordered else 1


def cmd_bench(args) -> int:
    result = run_bench(args.instances, args.variant, args.channels, args.rho, args.tol, args.max_iters)
    print(result.table())
    return 0


def cmd_report(args) -> int:
    text = metrics_to_csv(load_metrics(args.metrics))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ifpn", description="Implicit feature-pyramid equilibrium toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="one forward solve; prints the solver report")
    add_config_flags(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--input", type=Path, help=".npy image (H, W), (1, H, W) or (N, 1, H, W)")
    p.add_argument("--output", type=Path, help="write the equilibrium pyramid to this .npz")
    p.add_argument("--eval", action="store_true", help="inference mode (honours --eval-iters)")
    p.add_argument("--override-solver", action="store_true",
                   help="with --checkpoint, take solver settings from the flags instead")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("train", help="train the toy model")
    add_config_flags(p)
    p.add_argument("--out", type=Path, help="checkpoint path")
    p.add_argument("--metrics", type=Path, help="per-step metrics (newline-delimited JSON)")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference and transpose checks")
    p.add_argument("--levels", type=int, default=2)
    p.add_argument("--channels", type=int, default=2)
    p.add_argument("--variant", default="dense_fpn")
    p.add_argument("--groups", type=int, default=1)
    p.add_argument("--size", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-coords", type=int, default=None, help="coordinates sampled per suite (default all)")
    p.add_argument("--suites", nargs="*", choices=("primitives", "transform", "dot", "implicit", "unrolled"))
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("trend", help="unrolling-depth vs Broyden final-loss experiment")
    add_config_flags(p)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--with-unroll4", action="store_true")
    p.set_defaults(func=cmd_trend)

    p = sub.add_parser("bench", help="Broyden vs Picard iterations to tolerance")
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--variant", default="dense_fpn")
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--rho", type=float, default=0.9, help="target spectral radius at the equilibrium")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iters", type=int, default=300)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="convert a metrics file to CSV")
    p.add_argument("metrics", type=Path)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
