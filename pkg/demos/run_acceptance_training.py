"""Produce the cached long runs read by the acceptance suite.

Generates the default dataset, trains the default configuration for the
full budget (about 100 minutes on one core) and then the reduced-budget
variant comparison. Results go to ``acceptance_runs/``.

    python3 demos/run_acceptance_training.py [--skip-ablation]
"""

import argparse
import logging
import tempfile
from pathlib import Path

import torch

from hcmt.datagen import generate_dataset
from hcmt.experiments import ablation_run, training_sanity
from hcmt.model import ModelConfig

RUNS = Path(__file__).resolve().parents[1] / "acceptance_runs"
ABLATION = ModelConfig(hidden=32, train_steps=1500, log_every=500, checkpoint_every=500)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--skip-training", action="store_true")
    parser.add_argument("--skip-ablation", action="store_true")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    with tempfile.TemporaryDirectory() as tmp:
        data = generate_dataset(Path(tmp) / "impact2d", 50, 5, 5, seed=0)
        if not args.skip_training:
            result = training_sanity(data, RUNS / "training_sanity", ModelConfig(log_every=1000))
            print({k: result[k] for k in ("train_seconds", "trained", "initial", "baseline")})
        if not args.skip_ablation:
            print(ablation_run(data, RUNS / "ablation", ABLATION))


if __name__ == "__main__":
    main()
