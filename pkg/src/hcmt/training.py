"""Single-sample training loop with random-walk input noise."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import Dataset
from .hierarchy import Hierarchy
from .mesh import Trajectory, add_randomwalk_noise
from .model import HCMT, ModelConfig, ModelInputs, loss_fn, make_targets, prepare_inputs, save_model
from .nn import ExponentialDecayAdam

__all__ = ["TrainResult", "HierarchyCache", "warmup_steps", "training_example", "train"]

log = logging.getLogger(__name__)


def warmup_steps(train_steps: int) -> int:
    """Steps during which normalizer statistics accumulate."""
    return max(1, min(1000, train_steps // 20))


class HierarchyCache:
    """Hierarchies keyed by trajectory index; the mesh-space geometry is static."""

    def __init__(self, num_levels: int):
        self.num_levels = num_levels
        self._store: dict[int, Hierarchy] = {}

    def get(self, key: int, trajectory: Trajectory, model: HCMT) -> Hierarchy:
        if key not in self._store:
            self._store[key] = model.build_hierarchy(trajectory.topology)
        return self._store[key]


def training_example(
    trajectory: Trajectory,
    t: int,
    hierarchy: Hierarchy,
    config: ModelConfig,
    rng: np.random.Generator,
) -> tuple[ModelInputs, torch.Tensor, torch.Tensor]:
    """Noisy inputs for step ``t``, raw targets and the loss mask.

    The target velocity is the clean next position minus the noisy current
    one, so the model learns to undo accumulated drift.
    """
    noisy = add_randomwalk_noise(trajectory, config.noise_std, rng)
    state = trajectory.state(t, positions=noisy)
    inputs = prepare_inputs(trajectory.topology, state, hierarchy, config.radius, config.num_levels)
    target = make_targets(state.world_coords, trajectory.positions[t + 2], trajectory.stress[t + 2])
    mask = torch.as_tensor(~trajectory.topology.fixed_mask)
    return inputs, target, mask


@dataclass
class TrainResult:
    model: HCMT
    losses: list[float] = field(default_factory=list)
    initial_parameters: dict[str, torch.Tensor] = field(default_factory=dict)
    wall_time: float = 0.0

    def initial_model(self) -> HCMT:
        """Untrained parameters combined with the fitted (frozen) normalizers."""
        model = HCMT(self.model.config)
        state = dict(self.model.state_dict())
        state.update(self.initial_parameters)
        model.load_state_dict(state)
        return model


def train(
    config: ModelConfig,
    dataset: Dataset,
    out: str | Path | None = None,
    steps: int | None = None,
    split: str = "train",
) -> TrainResult:
    """Train for ``steps`` (default ``config.train_steps``) single-sample updates.

    ``out`` receives periodic checkpoints and the final model; if the loss
    becomes non-finite the run stops with the last good checkpoint left in
    place.
    """
    steps = config.train_steps if steps is None else steps
    ids = dataset.split(split)
    if not ids:
        raise ValueError(f"dataset split {split!r} is empty")
    torch.manual_seed(config.seed)
    model = HCMT(config)
    initial = {k: v.detach().clone() for k, v in model.named_parameters()}
    opt = ExponentialDecayAdam(model.named_parameters(), config.lr_start, config.lr_end, steps)
    rng = np.random.default_rng(config.seed)
    cache = HierarchyCache(config.num_levels)
    warm = warmup_steps(steps)
    result = TrainResult(model=model, initial_parameters=initial)
    started = time.perf_counter()
    for step in range(steps):
        k = int(ids[rng.integers(len(ids))])
        traj = dataset.trajectory(k)
        t = int(rng.integers(traj.num_steps))
        inputs, target, mask = training_example(traj, t, cache.get(k, traj, model), config, rng)
        if step < warm:
            model.accumulate_stats(inputs, target)
        elif step == warm:
            model.freeze_normalizers()
        opt.zero_grad()
        loss = loss_fn(model(inputs), model.target_norm.normalize(target), mask)
        value = float(loss.item())
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss at step {step}")
        loss.backward()
        opt.step()
        result.losses.append(value)
        if config.log_every and (step + 1) % config.log_every == 0:
            recent = result.losses[-config.log_every :]
            log.info("step %d loss %.6g lr %.3g", step + 1, sum(recent) / len(recent), opt.lr)
        if out is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            save_model(out, model, {"step": step + 1})
    if steps <= warm:
        model.freeze_normalizers()
    result.wall_time = time.perf_counter() - started
    if out is not None:
        save_model(out, model, {"step": steps})
    return result
