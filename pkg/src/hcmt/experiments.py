"""Train-and-evaluate runs used by the acceptance suite and the demos."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path

import torch

from .dataset import Dataset
from .model import ModelConfig
from .rollout import ConstantVelocity, ModelPredictor, evaluate_dataset
from .training import train

__all__ = ["dataset_fingerprint", "training_sanity", "ablation_run"]

log = logging.getLogger(__name__)


def dataset_fingerprint(data_dir: str | Path) -> str:
    """SHA-256 over the names and bytes of every file in the dataset directory."""
    digest = hashlib.sha256()
    for path in sorted(Path(data_dir).iterdir()):
        if path.is_file():
            digest.update(path.name.encode() + b"\0")
            digest.update(path.read_bytes())
    return digest.hexdigest()


def training_sanity(
    data_dir: str | Path,
    out_dir: str | Path,
    config: ModelConfig | None = None,
    split: str = "test",
) -> dict:
    """Train ``config`` on ``data_dir`` and compare against the untrained model and the baseline.

    Writes ``model.ckpt`` and ``result.json`` into ``out_dir`` and returns the
    result dictionary.
    """
    config = config or ModelConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = Dataset.open(data_dir)
    started = time.perf_counter()
    run = train(config, dataset, out / "model.ckpt")
    train_seconds = time.perf_counter() - started
    with torch.no_grad():
        trained = evaluate_dataset(ModelPredictor(run.model), dataset, split)
        initial = evaluate_dataset(ModelPredictor(run.initial_model()), dataset, split)
    baseline = evaluate_dataset(ConstantVelocity(), dataset, split)
    result = {
        "config": config.to_dict(),
        "dataset_sha256": dataset_fingerprint(data_dir),
        "torch_threads": torch.get_num_threads(),
        "train_seconds": train_seconds,
        "total_seconds": time.perf_counter() - started,
        "first_losses": run.losses[:100],
        "final_loss_mean": sum(run.losses[-500:]) / max(1, len(run.losses[-500:])),
        "trained": trained,
        "initial": initial,
        "baseline": baseline,
    }
    (out / "result.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    return result


def ablation_run(data_dir: str | Path, out_dir: str | Path, base: ModelConfig, seeds=(0, 1, 2)) -> dict:
    """Rollout RMSE-all of full, only_cmt and only_hmt under one budget per seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = Dataset.open(data_dir)
    table: dict[str, dict[str, float]] = {}
    for seed in seeds:
        row = {}
        for variant in ("full", "only_cmt", "only_hmt"):
            cfg = ModelConfig.from_dict({**base.to_dict(), "variant": variant, "seed": seed})
            run = train(cfg, dataset)
            with torch.no_grad():
                metrics = evaluate_dataset(ModelPredictor(run.model), dataset, "test", one_step=False)
            row[variant] = metrics["position_rmse_all"]
            log.info("seed %d %s rmse_all %.3f", seed, variant, row[variant])
        table[str(seed)] = row
    result = {
        "budget": f"hidden {base.hidden}, {base.train_steps} steps",
        "config": base.to_dict(),
        "dataset_sha256": dataset_fingerprint(data_dir),
        "rmse_all": table,
    }
    (out / "ablation.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    return result
