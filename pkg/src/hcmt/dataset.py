"""On-disk dataset format.

A dataset directory holds ``meta.json`` and one ``traj_<k>.bin`` per
trajectory. Each binary file is little-endian::

    b"HCMT"  u32 version=1  u32 num_nodes  u32 num_records
    num_records x ( float32[num_nodes, 2] positions, float32[num_nodes] stress )

``meta.json`` carries the global settings (``dim``, ``dt``, ``gamma``,
``splits``) and, per trajectory, the topology and material arrays
(``num_nodes``, ``cells``, ``object_id``, ``kinds``, ``mesh_coords``,
``rho``, ``Y``) together with the randomized draws that produced it.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh import MeshTopology, Trajectory

MAGIC = b"HCMT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class DatasetError(IOError):
    pass


def write_trajectory_bin(path: str | Path, positions: np.ndarray, stress: np.ndarray) -> None:
    positions = np.asarray(positions)
    stress = np.asarray(stress)
    records, n, dim = positions.shape
    if dim != 2 or stress.shape != (records, n):
        raise ValueError("positions must be (records, N, 2) and stress (records, N)")
    block = np.concatenate(
        [positions.astype("<f4").reshape(records, 2 * n), stress.astype("<f4")], axis=1
    )
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, n, records))
            fh.write(block.tobytes())
    except OSError as exc:
        raise DatasetError(f"cannot write {path}: {exc}") from exc


def read_trajectory_bin(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise DatasetError(f"{path}: truncated header")
    magic, version, n, records = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + records * 3 * n * 4
    if len(raw) != expected:
        raise DatasetError(f"{path}: expected {expected} bytes, found {len(raw)}")
    block = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(records, 3 * n)
    positions = block[:, : 2 * n].reshape(records, n, 2).astype(np.float64)
    stress = block[:, 2 * n :].astype(np.float64)
    return positions, stress


def topology_to_meta(topology: MeshTopology) -> dict:
    return {
        "num_nodes": int(topology.num_nodes),
        "cells": topology.cells.tolist(),
        "object_id": topology.object_id.tolist(),
        "kinds": topology.kinds.tolist(),
        "mesh_coords": topology.mesh_coords.tolist(),
        "rho": topology.rho.tolist(),
        "Y": topology.youngs.tolist(),
    }


def topology_from_meta(entry: dict) -> MeshTopology:
    topo = MeshTopology(
        cells=np.asarray(entry["cells"], dtype=np.int64).reshape(-1, 3),
        object_id=entry["object_id"],
        mesh_coords=np.asarray(entry["mesh_coords"], dtype=np.float64).reshape(-1, 2),
        kinds=entry["kinds"],
        rho=entry["rho"],
        youngs=entry["Y"],
    )
    if topo.num_nodes != entry["num_nodes"]:
        raise DatasetError("num_nodes disagrees with mesh_coords")
    return topo


@dataclass
class Dataset:
    root: Path
    meta: dict
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def open(cls, root: str | Path) -> "Dataset":
        root = Path(root)
        meta_path = root / "meta.json"
        if not root.is_dir():
            raise DatasetError(f"dataset directory not found: {root}")
        if not meta_path.is_file():
            raise DatasetError(f"missing meta.json in {root}")
        with open(meta_path) as fh:
            meta = json.load(fh)
        if meta.get("dim") != 2:
            raise DatasetError(f"{meta_path}: only dim=2 datasets are supported")
        return cls(root, meta)

    @property
    def dt(self) -> float:
        return float(self.meta["dt"])

    @property
    def gamma(self) -> float:
        return float(self.meta["gamma"])

    def split(self, name: str) -> list[int]:
        return list(self.meta["splits"].get(name, []))

    def __len__(self) -> int:
        return len(self.meta["trajectories"])

    def trajectory(self, k: int) -> Trajectory:
        if k in self._cache:
            return self._cache[k]
        entries = self.meta["trajectories"]
        if not 0 <= k < len(entries):
            raise DatasetError(f"trajectory {k} not in dataset ({len(entries)} trajectories)")
        entry = entries[k]
        topo = topology_from_meta(entry)
        positions, stress = read_trajectory_bin(self.root / entry["file"])
        if positions.shape[1] != topo.num_nodes:
            raise DatasetError(f"{entry['file']}: node count differs from meta.json")
        traj = Trajectory(topo, positions, stress, self.dt, metadata=entry.get("material", {}))
        self._cache[k] = traj
        return traj


def write_meta(root: str | Path, meta: dict) -> None:
    path = Path(root) / "meta.json"
    try:
        with open(path, "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise DatasetError(f"cannot write {path}: {exc}") from exc
