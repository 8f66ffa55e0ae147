"""Small end-to-end tour: data, hierarchy, a short training run, a rollout.

Runs in a couple of minutes on one core. Everything lands in ``--out``.

    python3 demos/impact_walkthrough.py --out /tmp/hcmt_demo
"""

import argparse
import logging
from pathlib import Path

import torch

from hcmt.datagen import generate_dataset
from hcmt.dataset import Dataset
from hcmt.hierarchy import build_hierarchy
from hcmt.model import ModelConfig
from hcmt.plotting import plot_rollout
from hcmt.rollout import ConstantVelocity, ModelPredictor, evaluate, load_rollout, rollout, save_rollout
from hcmt.training import train


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="demo_out")
    parser.add_argument("--steps", type=int, default=400, help="training steps")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(1)
    out = Path(args.out)

    # a handful of ball-on-plate impacts
    data = generate_dataset(out / "data", 6, 1, 1, seed=0)
    dataset = Dataset.open(data)
    traj = dataset.trajectory(dataset.split("test")[0])
    print(f"{len(dataset)} trajectories, {traj.topology.num_nodes} nodes, {traj.num_steps} steps each")

    # each pooled level keeps roughly half of the nodes and is remeshed
    hierarchy = build_hierarchy(traj.topology, 4)
    print("nodes per level:", hierarchy.node_counts())

    # a reduced model; the default config is much larger
    config = ModelConfig(hidden=32, l_c=1, l_h=5, lam=2, train_steps=args.steps, log_every=100)
    run = train(config, dataset, out / "model.ckpt")
    print(f"trained {args.steps} steps in {run.wall_time:.0f} s, last loss {run.losses[-1]:.3f}")

    with torch.no_grad():
        learned = rollout(ModelPredictor(run.model), traj, radius=dataset.gamma)
    baseline = rollout(ConstantVelocity(), traj, radius=dataset.gamma)
    for name, result in (("model", learned), ("constant velocity", baseline)):
        metrics = evaluate(result, traj)
        print(f"{name:>17}: position RMSE-all x1e3 {metrics['position_rmse_all']:.3f}")

    save_rollout(out / "rollout.bin", learned, traj)
    frames = plot_rollout(load_rollout(out / "rollout.bin"), out / "frames", every=10)
    print(f"wrote {len(frames)} frames to {out / 'frames'}")


if __name__ == "__main__":
    main()
