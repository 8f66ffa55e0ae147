"""Command-line interface: ``hcmt <command> ...``.

Exit codes: 0 success, 1 runtime error, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .dataset import Dataset, DatasetError
from .mesh import ConfigError

__all__ = ["main", "run"]

log = logging.getLogger("hcmt")

BASELINE = "constant-velocity"


class UsageError(Exception):
    pass


def _open_dataset(path: str) -> Dataset:
    root = Path(path)
    if not root.is_dir():
        raise UsageError(f"data directory not found: {root}")
    if not (root / "meta.json").is_file():
        raise UsageError(f"not a dataset directory (no meta.json): {root}")
    return Dataset.open(root)


def _predictor(ckpt: str):
    from .model import load_model
    from .rollout import ConstantVelocity, ModelPredictor

    if ckpt == BASELINE:
        return ConstantVelocity(), None
    model, _ = load_model(ckpt)
    return ModelPredictor(model), model


def cmd_gendata(args) -> int:
    from .datagen import PRESETS, generate_dataset

    if args.preset not in PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
    spec = PRESETS[args.preset]
    if args.steps is not None:
        spec = spec.with_(steps=args.steps)
    root = generate_dataset(args.out, args.train, args.val, args.test, args.seed, spec)
    print(f"wrote {args.train + args.val + args.test} trajectories to {root}")
    return 0


def cmd_train(args) -> int:
    import torch

    from .model import ModelConfig
    from .training import train

    torch.set_num_threads(args.threads)
    config = ModelConfig.from_file(args.config) if args.config else ModelConfig()
    dataset = _open_dataset(args.data)
    result = train(config, dataset, args.out, steps=args.steps)
    tail = result.losses[-100:]
    print(f"trained {len(result.losses)} steps in {result.wall_time:.1f} s; "
          f"mean loss of last {len(tail)} steps {np.mean(tail) if tail else float('nan'):.6g}; "
          f"checkpoint {args.out}")
    return 0


def cmd_rollout(args) -> int:
    from .rollout import rollout, save_rollout

    dataset = _open_dataset(args.data)
    predictor, model = _predictor(args.ckpt)
    radius = model.config.radius if model is not None else dataset.gamma
    traj = dataset.trajectory(args.traj)
    result = rollout(predictor, traj, start=args.start, radius=radius)
    save_rollout(args.out, result, traj, start=args.start)
    flag = f" (truncated at step {result.truncated_at})" if result.truncated else ""
    print(f"rolled out {result.num_steps} steps of trajectory {args.traj}{flag} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .rollout import ConstantVelocity, evaluate_dataset, write_report

    dataset = _open_dataset(args.data)
    predictor, model = _predictor(args.ckpt)
    radius = model.config.radius if model is not None else dataset.gamma
    name = BASELINE if model is None else model.config.variant
    results = {name: evaluate_dataset(predictor, dataset, args.split, radius)}
    results[f"{BASELINE} baseline"] = evaluate_dataset(ConstantVelocity(), dataset, args.split, dataset.gamma)
    text = write_report(args.report, dataset.meta.get("preset", "dataset"), results)
    sys.stdout.write(text)
    return 0


def cmd_mesh_report(args) -> int:
    from .hierarchy import bfs_pool, bistride_cells, build_hierarchy, mesh_quality

    dataset = _open_dataset(args.data)
    if args.lam < 0:
        raise UsageError("--lambda must be >= 0")
    ids = [args.traj] if args.traj is not None else list(range(len(dataset)))
    rows = ["trajectory\tlevel\tnodes\tedges\tratio\tmin_angle\tmax_angle\tjacobian_before\tjacobian_after"]
    for k in ids:
        top = dataset.trajectory(k).topology
        h = build_hierarchy(top, args.lam)
        for v, cur in enumerate(h.levels):
            coords = top.mesh_coords[cur.node_ids]
            after = mesh_quality(cur.cells, coords)
            if v == 0:
                ratio, before = 1.0, after["mean_scaled_jacobian"]
            else:
                prev = h.levels[v - 1]
                ratio = cur.num_nodes / prev.num_nodes
                before = mesh_quality(bistride_cells(prev, bfs_pool(prev)), coords)["mean_scaled_jacobian"]
            rows.append(
                f"{k}\t{v}\t{cur.num_nodes}\t{cur.num_edges}\t{ratio:.4f}\t{after['min_angle']:.2f}\t"
                f"{after['max_angle']:.2f}\t{before:.4f}\t{after['mean_scaled_jacobian']:.4f}"
            )
    text = "\n".join(rows) + "\n"
    if args.report:
        Path(args.report).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    import torch

    from .gradcheck import run_gradcheck

    torch.set_num_threads(1)
    report = run_gradcheck(args.seed)
    name, worst = report.worst()
    print(f"max relative error {worst:.3e} ({name}); {report.num_parameters} parameters; "
          f"{report.kink_entries} kink-crossing entries; {report.seconds:.1f} s")
    return 0 if worst < args.tol else 1


def cmd_plot(args) -> int:
    from .plotting import plot_rollout
    from .rollout import load_rollout

    if not Path(args.rollout).is_file():
        raise UsageError(f"rollout file not found: {args.rollout}")
    paths = plot_rollout(load_rollout(args.rollout), args.out, every=args.every)
    print(f"wrote {len(paths)} images to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hcmt", description="Learned flexible-body impact simulator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("gendata", help="generate a synthetic impact dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=50)
    p.add_argument("--val", type=int, default=5)
    p.add_argument("--test", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", default="impact2d")
    p.add_argument("--steps", type=int, default=None, help="recorded steps per trajectory")
    p.set_defaults(func=cmd_gendata)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--steps", type=int, default=None, help="override train_steps")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="closed-loop rollout of one trajectory")
    p.add_argument("--ckpt", required=True, help=f"checkpoint path or '{BASELINE}'")
    p.add_argument("--data", required=True)
    p.add_argument("--traj", type=int, required=True)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("eval", help="RMSE report against the constant-velocity baseline")
    p.add_argument("--ckpt", required=True, help=f"checkpoint path or '{BASELINE}'")
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mesh-report", help="pooling ratios and remeshing quality per level")
    p.add_argument("--data", required=True)
    p.add_argument("--lambda", dest="lam", type=int, required=True)
    p.add_argument("--traj", type=int, default=None)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_mesh_report)

    p = sub.add_parser("gradcheck", help="finite-difference check of the loss gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("plot", help="stress-field images of a saved rollout")
    p.add_argument("--rollout", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--every", type=int, default=1)
    p.set_defaults(func=cmd_plot)
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"hcmt {args.command}: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, OSError, ValueError, FloatingPointError, RuntimeError) as exc:
        print(f"hcmt {args.command}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
