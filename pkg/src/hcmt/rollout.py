"""Closed-loop rollouts, baselines and error metrics."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .dataset import Dataset
from .hierarchy import Hierarchy
from .mesh import MeshTopology, SystemState, Trajectory, build_contact_edges, build_graph
from .model import HCMT, prepare_inputs, update_positions

__all__ = [
    "Predictor",
    "ModelPredictor",
    "ConstantVelocity",
    "RolloutResult",
    "rollout",
    "rmse",
    "evaluate",
    "one_step_rmse",
    "evaluate_dataset",
    "write_report",
    "save_rollout",
    "load_rollout",
]

SCALE = 1e3


class Predictor(Protocol):
    def __call__(self, topology: MeshTopology, state: SystemState) -> tuple[np.ndarray, np.ndarray]:
        """Per-node velocity ``(N, 2)`` and next stress ``(N,)``."""


class ModelPredictor:
    """Wraps a model with a hierarchy built once per topology."""

    def __init__(self, model: HCMT, radius: float | None = None):
        self.model = model.eval()
        self.radius = model.config.radius if radius is None else radius
        self._hierarchies: dict[int, tuple[MeshTopology, Hierarchy]] = {}

    def hierarchy(self, topology: MeshTopology) -> Hierarchy:
        key = id(topology)
        if key not in self._hierarchies:
            self._hierarchies[key] = (topology, self.model.build_hierarchy(topology))
        return self._hierarchies[key][1]

    def __call__(self, topology, state):
        inputs = prepare_inputs(topology, state, self.hierarchy(topology), self.radius, self.model.num_levels)
        return self.model.predict(inputs)


class ConstantVelocity:
    """Repeats the last displacement and keeps the current stress."""

    def __call__(self, topology, state):
        return state.velocity, state.stress


@dataclass
class RolloutResult:
    """Predicted states; index 0 is the ground-truth initial state."""

    positions: np.ndarray
    stress: np.ndarray
    contact_counts: np.ndarray
    truncated: bool = False
    truncated_at: int | None = None

    @property
    def num_steps(self) -> int:
        return self.positions.shape[0] - 1


def rollout(
    predictor: Predictor,
    trajectory: Trajectory,
    start: int = 0,
    steps: int | None = None,
    radius: float = 0.4,
    bound: float = 1e4,
) -> RolloutResult:
    """Feed predictions back as inputs for ``steps`` steps (default: to the end).

    Fixed nodes are pinned to their recorded positions. If any coordinate
    leaves ``[-bound, bound]`` or turns non-finite the rollout stops, the
    remaining states repeat the last valid one and ``truncated`` is set.
    """
    top = trajectory.topology
    max_steps = trajectory.num_steps - start
    steps = max_steps if steps is None else steps
    if not 0 <= steps <= max_steps:
        raise ValueError(f"rollout of {steps} steps from {start} exceeds the trajectory ({trajectory.num_steps})")
    fixed = top.fixed_mask
    mesh_edges = build_graph(top)
    state = trajectory.state(start)
    positions = [state.world_coords]
    stress = [state.stress]
    contacts = []
    truncated_at = None
    for k in range(steps):
        contacts.append(build_contact_edges(top, state, radius, mesh_edges).shape[0])
        velocity, sigma = predictor(top, state)
        nxt = update_positions(state.world_coords, velocity, fixed)
        nxt[fixed] = trajectory.positions[start + k + 2][fixed]
        if not (np.all(np.isfinite(nxt)) and np.abs(nxt).max() <= bound and np.all(np.isfinite(sigma))):
            truncated_at = k
            break
        state = SystemState(nxt, state.world_coords, np.asarray(sigma, dtype=np.float64))
        positions.append(nxt)
        stress.append(state.stress)
    while len(positions) < steps + 1:
        positions.append(positions[-1])
        stress.append(stress[-1])
        contacts.append(contacts[-1] if contacts else 0)
    return RolloutResult(
        positions=np.stack(positions),
        stress=np.stack(stress),
        contact_counts=np.asarray(contacts, dtype=np.int64),
        truncated=truncated_at is not None,
        truncated_at=truncated_at,
    )


def rmse(pred: np.ndarray, truth: np.ndarray) -> float:
    """Root mean square over every scalar component."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def evaluate(result: RolloutResult, trajectory: Trajectory, start: int = 0) -> dict[str, float]:
    """RMSE-1 and RMSE-all of positions and stress, scaled by 1e3."""
    n = result.num_steps
    if n < 1:
        raise ValueError("rollout has no predicted steps")
    if start + n > trajectory.num_steps:
        raise ValueError("rollout is longer than the ground truth")
    gt_pos = trajectory.positions[start + 2 : start + 2 + n]
    gt_sig = trajectory.stress[start + 2 : start + 2 + n]
    return {
        "position_rmse_1": SCALE * rmse(result.positions[1], gt_pos[0]),
        "position_rmse_all": SCALE * rmse(result.positions[1:], gt_pos),
        "stress_rmse_1": SCALE * rmse(result.stress[1], gt_sig[0]),
        "stress_rmse_all": SCALE * rmse(result.stress[1:], gt_sig),
    }


def one_step_rmse(predictor: Predictor, trajectory: Trajectory) -> dict[str, float]:
    """Teacher-forced one-step errors pooled over every step, scaled by 1e3."""
    top = trajectory.topology
    pos_err, sig_err = [], []
    for t in range(trajectory.num_steps):
        state = trajectory.state(t)
        velocity, sigma = predictor(top, state)
        nxt = update_positions(state.world_coords, velocity, top.fixed_mask)
        pos_err.append(nxt - trajectory.positions[t + 2])
        sig_err.append(np.asarray(sigma) - trajectory.stress[t + 2])
    return {
        "position_rmse_one_step": SCALE * float(np.sqrt(np.mean(np.square(pos_err)))),
        "stress_rmse_one_step": SCALE * float(np.sqrt(np.mean(np.square(sig_err)))),
    }


def evaluate_dataset(
    predictor: Predictor,
    dataset: Dataset,
    split: str = "test",
    radius: float | None = None,
    one_step: bool = True,
) -> dict[str, float]:
    """Metrics averaged over the trajectories of ``split``."""
    ids = dataset.split(split)
    if not ids:
        raise ValueError(f"dataset split {split!r} is empty")
    radius = dataset.gamma if radius is None else radius
    rows = []
    truncated = 0
    for k in ids:
        traj = dataset.trajectory(k)
        result = rollout(predictor, traj, radius=radius)
        truncated += result.truncated
        row = evaluate(result, traj)
        if one_step:
            row.update(one_step_rmse(predictor, traj))
        rows.append(row)
    out = {key: float(np.mean([r[key] for r in rows])) for key in rows[0]}
    out["truncated"] = float(truncated)
    return out


def write_report(path: str | Path, dataset_name: str, results: dict[str, dict[str, float]]) -> str:
    """Tab-separated ``metric, dataset, position, stress`` rows for each predictor."""
    lines = ["metric\tdataset\tposition\tstress"]
    for name, m in results.items():
        for label, key in (("RMSE-1", "rmse_1"), ("RMSE-all", "rmse_all"), ("RMSE-one-step", "rmse_one_step")):
            pk, sk = f"position_{key}", f"stress_{key}"
            if pk in m:
                lines.append(f"{label} [{name}]\t{dataset_name}\t{m[pk]:.4f}\t{m[sk]:.4f}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


ROLLOUT_MAGIC = b"HCMTROLL"
_ARRAYS = ("positions", "stress", "truth_positions", "truth_stress")


def save_rollout(path: str | Path, result: RolloutResult, trajectory: Trajectory, start: int = 0) -> None:
    """Magic, u32 header length, JSON header, then little-endian float64 arrays."""
    n = result.num_steps
    arrays = {
        "positions": result.positions,
        "stress": result.stress,
        "truth_positions": trajectory.positions[start + 1 : start + 2 + n],
        "truth_stress": trajectory.stress[start + 1 : start + 2 + n],
    }
    header = {
        "shapes": {k: list(arrays[k].shape) for k in _ARRAYS},
        "cells": trajectory.topology.cells.tolist(),
        "object_id": trajectory.topology.object_id.tolist(),
        "contact_counts": result.contact_counts.tolist(),
        "truncated": bool(result.truncated),
        "start": start,
        "dt": trajectory.dt,
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(ROLLOUT_MAGIC + struct.pack("<I", len(raw)) + raw)
        for k in _ARRAYS:
            fh.write(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())


def load_rollout(path: str | Path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:8] != ROLLOUT_MAGIC:
        raise ValueError(f"{path}: not a rollout file")
    (size,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12 : 12 + size])
    off = 12 + size
    out = dict(header)
    for k in _ARRAYS:
        shape = header["shapes"][k]
        count = int(np.prod(shape))
        out[k] = np.frombuffer(raw, "<f8", count, off).reshape(shape).copy()
        off += 8 * count
    out["cells"] = np.asarray(header["cells"], dtype=np.int64).reshape(-1, 3)
    out["object_id"] = np.asarray(header["object_id"], dtype=np.int64)
    return out
