"""Multi-level mesh hierarchy: bi-stride BFS pooling and Delaunay remeshing."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .delaunay import DegenerateGeometryError, delaunay_triangulate
from .mesh import ConfigError, MeshTopology, SystemState, build_graph, edges_from_cells, mesh_edge_features

__all__ = [
    "LevelGraph",
    "Hierarchy",
    "bfs_pool",
    "delaunay_remesh",
    "mesh_quality",
    "bistride_cells",
    "build_hierarchy",
    "POOL_FLOOR",
]

POOL_FLOOR = 3


@dataclass
class LevelGraph:
    """One level of the hierarchy.

    ``node_ids`` index level-0 nodes; ``mesh_edges`` and ``cells`` use local
    indices into ``node_ids``; ``parent_map[i]`` is the local index of node
    ``i`` in the previous level (identity at level 0).
    """

    level: int
    node_ids: np.ndarray
    mesh_edges: np.ndarray
    cells: np.ndarray
    object_id: np.ndarray
    parent_map: np.ndarray
    raw_edge_features: np.ndarray | None = None

    @property
    def num_nodes(self) -> int:
        return self.node_ids.shape[0]

    @property
    def num_edges(self) -> int:
        return self.mesh_edges.shape[0]

    def adjacency(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for i, j in self.mesh_edges.tolist():
            adj[i].append(j)
        return adj


@dataclass
class Hierarchy:
    levels: list[LevelGraph] = field(default_factory=list)

    @property
    def num_levels(self) -> int:
        """Number of pooled levels (``lambda``); level 0 excluded."""
        return len(self.levels) - 1

    def node_counts(self) -> list[int]:
        return [lv.num_nodes for lv in self.levels]

    def edge_features(self, topology: MeshTopology, world_coords: np.ndarray) -> list[np.ndarray]:
        """Raw mesh-edge features of every level for the given world positions."""
        out = []
        for lv in self.levels:
            out.append(
                mesh_edge_features(
                    topology.mesh_coords[lv.node_ids], world_coords[lv.node_ids], lv.mesh_edges
                )
            )
        return out


def bfs_pool(level_graph: LevelGraph) -> np.ndarray:
    """Bi-stride selection: keep nodes at even BFS depth, per object.

    BFS starts from the lowest local index of each object and restarts from
    the lowest unvisited index for every further connected component.
    Objects keep at least ``min(3, size)`` nodes; shortfalls are filled in
    BFS order.
    """
    adj = level_graph.adjacency()
    obj = level_graph.object_id
    selected = np.zeros(level_graph.num_nodes, dtype=bool)
    for o in np.unique(obj):
        members = np.flatnonzero(obj == o)
        depth = {}
        bfs_order = []
        for seed in members.tolist():
            if seed in depth:
                continue
            depth[seed] = 0
            queue = deque([seed])
            while queue:
                i = queue.popleft()
                bfs_order.append(i)
                for j in adj[i]:
                    if j not in depth:
                        depth[j] = depth[i] + 1
                        queue.append(j)
        kept = [i for i in bfs_order if depth[i] % 2 == 0]
        floor = min(POOL_FLOOR, len(members))
        if len(kept) < floor:
            kept_set = set(kept)
            for i in bfs_order:
                if len(kept) >= floor:
                    break
                if i not in kept_set:
                    kept.append(i)
                    kept_set.add(i)
        selected[kept] = True
    return np.flatnonzero(selected)


def delaunay_remesh(points: np.ndarray) -> np.ndarray:
    """Counter-clockwise Delaunay triangles of ``points`` (local indices)."""
    return delaunay_triangulate(points)


def _path_edges(points: np.ndarray) -> np.ndarray:
    order = np.lexsort((points[:, 1], points[:, 0]))
    return np.stack([order[:-1], order[1:]], axis=1)


def _bidirectional(pairs: np.ndarray, n: int) -> np.ndarray:
    if pairs.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    both = np.concatenate([pairs, pairs[:, ::-1]])
    key = np.unique(both[:, 0] * n + both[:, 1])
    return np.stack([key // n, key % n], axis=1)


def _triangle_angles(cells: np.ndarray, coords: np.ndarray) -> np.ndarray:
    p = coords[cells]  # (T, 3, 2)
    angles = np.empty(cells.shape, dtype=np.float64)
    for k in range(3):
        e1 = p[:, (k + 1) % 3] - p[:, k]
        e2 = p[:, (k + 2) % 3] - p[:, k]
        cross = np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        dot = (e1 * e2).sum(1)
        angles[:, k] = np.arctan2(cross, dot)
    return angles


def mesh_quality(cells: np.ndarray, mesh_coords: np.ndarray) -> dict:
    """Interior-angle extremes and scaled Jacobian statistics of a triangle mesh.

    The scaled Jacobian of a triangle is ``(2 / sqrt(3)) * min_k sin(angle_k)``:
    1 for an equilateral triangle, 0 for a degenerate one.
    """
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    coords = np.asarray(mesh_coords, dtype=np.float64)
    if cells.shape[0] == 0:
        return {
            "num_cells": 0,
            "min_angle": float("nan"),
            "max_angle": float("nan"),
            "mean_min_angle": float("nan"),
            "mean_max_angle": float("nan"),
            "mean_scaled_jacobian": float("nan"),
            "degenerate": 0,
        }
    p = coords[cells]
    area2 = np.abs(
        (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
        - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    )
    edge_scale = max(float(np.ptp(coords, axis=0).max()), 1e-300) ** 2
    degenerate = area2 <= 1e-14 * edge_scale
    angles = _triangle_angles(cells, coords)
    jac = (2.0 / np.sqrt(3.0)) * np.sin(angles).min(axis=1)
    jac[degenerate] = 0.0
    deg = np.degrees(angles)
    return {
        "num_cells": int(cells.shape[0]),
        "min_angle": float(deg.min()),
        "max_angle": float(deg.max()),
        "mean_min_angle": float(deg.min(axis=1).mean()),
        "mean_max_angle": float(deg.max(axis=1).mean()),
        "mean_scaled_jacobian": float(jac.mean()),
        "degenerate": int(degenerate.sum()),
    }


def bistride_cells(level_graph: LevelGraph, selected: np.ndarray) -> np.ndarray:
    """Triangles of the coarse graph before remeshing.

    Selected nodes are joined when they lie within two hops in the fine
    graph; every 3-clique of that graph is returned (indices local to
    ``selected``).
    """
    adj = [set(a) for a in level_graph.adjacency()]
    pos = {int(s): k for k, s in enumerate(selected.tolist())}
    coarse: list[set[int]] = [set() for _ in selected]
    for k, s in enumerate(selected.tolist()):
        reach = set(adj[s])
        for j in adj[s]:
            reach |= adj[j]
        reach.discard(s)
        coarse[k] = {pos[r] for r in reach if r in pos}
    tris = []
    for a in range(len(coarse)):
        for b in coarse[a]:
            if b <= a:
                continue
            for c in coarse[a] & coarse[b]:
                if c > b:
                    tris.append((a, b, c))
    return np.asarray(tris, dtype=np.int64).reshape(-1, 3)


def _remesh_level(
    prev: LevelGraph, selected: np.ndarray, topology: MeshTopology, level: int
) -> LevelGraph:
    node_ids = prev.node_ids[selected]
    coords = topology.mesh_coords[node_ids]
    object_id = prev.object_id[selected]
    cell_parts = []
    extra_pairs = []
    for o in np.unique(object_id):
        local = np.flatnonzero(object_id == o)
        if local.shape[0] >= 3:
            try:
                tris = delaunay_remesh(coords[local])
                cell_parts.append(local[tris])
                continue
            except DegenerateGeometryError:
                pass
        if local.shape[0] >= 2:
            extra_pairs.append(local[_path_edges(coords[local])])
    n = node_ids.shape[0]
    cells = np.concatenate(cell_parts) if cell_parts else np.zeros((0, 3), dtype=np.int64)
    edges = edges_from_cells(cells, n)
    if extra_pairs:
        pairs = np.concatenate([edges] + extra_pairs)
        edges = _bidirectional(pairs, n)
    return LevelGraph(
        level=level,
        node_ids=node_ids,
        mesh_edges=edges,
        cells=cells,
        object_id=object_id,
        parent_map=selected,
    )


def build_hierarchy(
    topology: MeshTopology,
    num_levels: int,
    state: SystemState | None = None,
    mesh_edges: np.ndarray | None = None,
) -> Hierarchy:
    """Pool and remesh ``num_levels`` times, per object, in mesh space.

    The structure depends only on the reference coordinates, so it can be
    reused for every state of a trajectory; ``state`` (if given) fills the
    per-level raw edge features.
    """
    if num_levels < 0:
        raise ConfigError(f"number of levels must be >= 0, got {num_levels}")
    if mesh_edges is None:
        mesh_edges = build_graph(topology)
    n = topology.num_nodes
    levels = [
        LevelGraph(
            level=0,
            node_ids=np.arange(n),
            mesh_edges=mesh_edges,
            cells=topology.cells,
            object_id=topology.object_id,
            parent_map=np.arange(n),
        )
    ]
    for level in range(1, num_levels + 1):
        selected = bfs_pool(levels[-1])
        levels.append(_remesh_level(levels[-1], selected, topology, level))
    hierarchy = Hierarchy(levels)
    world = topology.mesh_coords if state is None else state.world_coords
    for lv, feats in zip(hierarchy.levels, hierarchy.edge_features(topology, world)):
        lv.raw_edge_features = feats
    return hierarchy
