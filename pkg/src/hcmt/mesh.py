"""Mesh data model, graph features, contact detection and training noise."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NodeKind",
    "TopologyError",
    "ConfigError",
    "MeshTopology",
    "SystemState",
    "Trajectory",
    "GraphSample",
    "NODE_FEATURE_DIM",
    "MESH_EDGE_FEATURE_DIM",
    "CONTACT_EDGE_FEATURE_DIM",
    "build_graph",
    "edges_from_cells",
    "build_contact_edges",
    "brute_force_contact_edges",
    "compute_edge_features",
    "mesh_edge_features",
    "node_features",
    "make_graph_sample",
    "add_randomwalk_noise",
]

NODE_FEATURE_DIM = 7
MESH_EDGE_FEATURE_DIM = 6
CONTACT_EDGE_FEATURE_DIM = 3


class TopologyError(ValueError):
    """Raised for malformed connectivity (bad indices, degenerate cells)."""


class ConfigError(ValueError):
    """Raised when a parameter violates its documented range."""


class NodeKind(enum.IntEnum):
    PLATE_FREE = 0
    PLATE_FIXED = 1
    BALL = 2

    @staticmethod
    def one_hot(kinds: np.ndarray) -> np.ndarray:
        kinds = np.asarray(kinds, dtype=np.int64)
        out = np.zeros((kinds.shape[0], len(NodeKind)), dtype=np.float64)
        out[np.arange(kinds.shape[0]), kinds] = 1.0
        return out


@dataclass
class MeshTopology:
    """Static description of the meshes in a scene.

    ``mesh_coords`` are the undeformed (reference) coordinates; ``rho`` and
    ``youngs`` are per-node material constants.
    """

    cells: np.ndarray
    object_id: np.ndarray
    mesh_coords: np.ndarray
    kinds: np.ndarray
    rho: np.ndarray
    youngs: np.ndarray

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.int64).reshape(-1, 3)
        self.object_id = np.asarray(self.object_id, dtype=np.int64)
        self.mesh_coords = np.asarray(self.mesh_coords, dtype=np.float64)
        self.kinds = np.asarray(self.kinds, dtype=np.int64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        self.youngs = np.asarray(self.youngs, dtype=np.float64)
        n = self.mesh_coords.shape[0]
        for name in ("object_id", "kinds", "rho", "youngs"):
            if getattr(self, name).shape != (n,):
                raise TopologyError(f"{name} must have one entry per node ({n})")
        if self.cells.size and (self.cells.min() < 0 or self.cells.max() >= n):
            raise TopologyError("cell index out of range")
        if self.cells.size:
            a, b, c = (self.mesh_coords[self.cells[:, k]] for k in range(3))
            area2 = np.abs(
                (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
            )
            if np.any(area2 <= 0.0):
                raise TopologyError("degenerate (zero-area) cell in mesh space")

    @property
    def num_nodes(self) -> int:
        return self.mesh_coords.shape[0]

    @property
    def fixed_mask(self) -> np.ndarray:
        return self.kinds == NodeKind.PLATE_FIXED

    def objects(self) -> np.ndarray:
        return np.unique(self.object_id)


@dataclass
class SystemState:
    world_coords: np.ndarray
    prev_world_coords: np.ndarray
    stress: np.ndarray

    def __post_init__(self):
        self.world_coords = np.asarray(self.world_coords, dtype=np.float64)
        self.prev_world_coords = np.asarray(self.prev_world_coords, dtype=np.float64)
        self.stress = np.asarray(self.stress, dtype=np.float64)

    @property
    def velocity(self) -> np.ndarray:
        """Displacement over the last step, ``x^t - x^{t-1}``."""
        return self.world_coords - self.prev_world_coords


@dataclass
class Trajectory:
    """Recorded positions and stresses of one scene.

    ``positions`` has ``num_steps + 2`` records: record 0 only provides the
    history for the first state, so ``state(t)`` for ``t = 0..num_steps``
    pairs record ``t + 1`` with record ``t``.
    """

    topology: MeshTopology
    positions: np.ndarray
    stress: np.ndarray
    dt: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.stress = np.asarray(self.stress, dtype=np.float64)
        if self.positions.ndim != 3 or self.positions.shape[1:] != (self.topology.num_nodes, 2):
            raise TopologyError("positions must be (records, num_nodes, 2)")
        if self.stress.shape != self.positions.shape[:2]:
            raise TopologyError("stress must be (records, num_nodes)")
        if self.positions.shape[0] < 2:
            raise TopologyError("a trajectory needs a history record and an initial state")

    @property
    def num_steps(self) -> int:
        return self.positions.shape[0] - 2

    def state(self, t: int, positions: np.ndarray | None = None) -> SystemState:
        pos = self.positions if positions is None else positions
        if not 0 <= t <= self.num_steps:
            raise IndexError(f"state index {t} outside 0..{self.num_steps}")
        return SystemState(pos[t + 1], pos[t], self.stress[t + 1])

    @property
    def states(self) -> list[SystemState]:
        return [self.state(t) for t in range(self.num_steps + 1)]


@dataclass
class GraphSample:
    node_features: np.ndarray
    mesh_edges: np.ndarray
    mesh_features: np.ndarray
    contact_edges: np.ndarray
    contact_features: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[0]


def _unique_sorted_pairs(pairs: np.ndarray, num_nodes: int) -> np.ndarray:
    if pairs.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    key = np.unique(pairs[:, 0] * num_nodes + pairs[:, 1])
    return np.stack([key // num_nodes, key % num_nodes], axis=1)


def edges_from_cells(cells: np.ndarray, num_nodes: int) -> np.ndarray:
    """Bidirectional, deduplicated, lexicographically sorted edges of triangles."""
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    if cells.size and (cells.min() < 0 or cells.max() >= num_nodes):
        raise TopologyError("cell index out of range")
    if cells.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    undirected = np.concatenate([cells[:, [0, 1]], cells[:, [1, 2]], cells[:, [2, 0]]])
    both = np.concatenate([undirected, undirected[:, ::-1]])
    return _unique_sorted_pairs(both, num_nodes)


def build_graph(topology: MeshTopology) -> np.ndarray:
    return edges_from_cells(topology.cells, topology.num_nodes)


def _pair_keys(edges: np.ndarray, num_nodes: int) -> np.ndarray:
    return edges[:, 0] * num_nodes + edges[:, 1]


def build_contact_edges(
    topology: MeshTopology,
    state: SystemState,
    radius: float,
    mesh_edges: np.ndarray | None = None,
) -> np.ndarray:
    """All ordered pairs closer than ``radius`` in world space, minus mesh edges.

    Candidates come from a uniform hash grid with cell size ``radius``; each
    node is tested against the 3x3 block of cells around its own.
    """
    if not radius > 0:
        raise ConfigError(f"contact radius must be positive, got {radius}")
    x = state.world_coords
    n = x.shape[0]
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    if mesh_edges is None:
        mesh_edges = build_graph(topology)

    cell = np.floor((x - x.min(axis=0)) / radius).astype(np.int64)
    stride = int(cell[:, 1].max()) + 3
    key = (cell[:, 0] + 1) * stride + (cell[:, 1] + 1)
    order = np.argsort(key, kind="stable")
    sorted_key = key[order]

    src_parts, dst_parts = [], []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            target = key + dx * stride + dy
            lo = np.searchsorted(sorted_key, target, side="left")
            hi = np.searchsorted(sorted_key, target, side="right")
            counts = hi - lo
            total = int(counts.sum())
            if total == 0:
                continue
            src = np.repeat(np.arange(n), counts)
            offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
            dst = order[np.repeat(lo, counts) + offsets]
            src_parts.append(src)
            dst_parts.append(dst)
    if not src_parts:
        return np.zeros((0, 2), dtype=np.int64)
    src = np.concatenate(src_parts)
    dst = np.concatenate(dst_parts)
    keep = src != dst
    src, dst = src[keep], dst[keep]
    d = x[src] - x[dst]
    keep = np.einsum("ij,ij->i", d, d) < radius * radius
    pairs = np.stack([src[keep], dst[keep]], axis=1)
    if mesh_edges.size:
        pairs = pairs[~np.isin(_pair_keys(pairs, n), _pair_keys(mesh_edges, n))]
    return _unique_sorted_pairs(pairs, n)


def brute_force_contact_edges(
    topology: MeshTopology, state: SystemState, radius: float, mesh_edges: np.ndarray
) -> np.ndarray:
    """O(N^2) reference for :func:`build_contact_edges`."""
    x = state.world_coords
    n = x.shape[0]
    d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(-1)
    close = d2 < radius * radius
    np.fill_diagonal(close, False)
    if mesh_edges.size:
        close[mesh_edges[:, 0], mesh_edges[:, 1]] = False
    i, q = np.nonzero(close)
    return _unique_sorted_pairs(np.stack([i, q], axis=1), n)


def mesh_edge_features(
    mesh_coords: np.ndarray, world_coords: np.ndarray, edges: np.ndarray
) -> np.ndarray:
    """``(u_ij, |u_ij|, x_ij, |x_ij|)`` with ``u_ij = u_i - u_j``."""
    if edges.size == 0:
        return np.zeros((0, MESH_EDGE_FEATURE_DIM))
    u = mesh_coords[edges[:, 0]] - mesh_coords[edges[:, 1]]
    x = world_coords[edges[:, 0]] - world_coords[edges[:, 1]]
    return np.concatenate(
        [u, np.linalg.norm(u, axis=1, keepdims=True), x, np.linalg.norm(x, axis=1, keepdims=True)],
        axis=1,
    )


def compute_edge_features(
    topology: MeshTopology,
    state: SystemState,
    mesh_edges: np.ndarray,
    contact_edges: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    n = topology.num_nodes
    for edges in (mesh_edges, contact_edges):
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise TopologyError("edge references a node outside the mesh")
    mesh = mesh_edge_features(topology.mesh_coords, state.world_coords, mesh_edges)
    if contact_edges.size:
        xq = state.world_coords[contact_edges[:, 0]] - state.world_coords[contact_edges[:, 1]]
        contact = np.concatenate([xq, np.linalg.norm(xq, axis=1, keepdims=True)], axis=1)
    else:
        contact = np.zeros((0, CONTACT_EDGE_FEATURE_DIM))
    return mesh, contact


def node_features(topology: MeshTopology, state: SystemState) -> np.ndarray:
    """One-hot kind, last displacement, density and Young's modulus."""
    return np.concatenate(
        [
            NodeKind.one_hot(topology.kinds),
            state.velocity,
            topology.rho[:, None],
            topology.youngs[:, None],
        ],
        axis=1,
    )


def make_graph_sample(
    topology: MeshTopology,
    state: SystemState,
    radius: float,
    mesh_edges: np.ndarray | None = None,
) -> GraphSample:
    if mesh_edges is None:
        mesh_edges = build_graph(topology)
    contact_edges = build_contact_edges(topology, state, radius, mesh_edges)
    mesh_feat, contact_feat = compute_edge_features(topology, state, mesh_edges, contact_edges)
    return GraphSample(
        node_features=node_features(topology, state),
        mesh_edges=mesh_edges,
        mesh_features=mesh_feat,
        contact_edges=contact_edges,
        contact_features=contact_feat,
    )


def add_randomwalk_noise(
    trajectory: Trajectory, std: float, rng: np.random.Generator
) -> np.ndarray:
    """Noisy copy of ``trajectory.positions`` for building training inputs.

    Increments are i.i.d. Gaussian with standard deviation
    ``std / sqrt(num_records - 1)`` so the accumulated offset at the last
    record has standard deviation ``std``. The history record carries no
    noise and fixed nodes are never perturbed. Targets must be taken from
    the clean positions.
    """
    if std < 0:
        raise ConfigError(f"noise std must be non-negative, got {std}")
    pos = trajectory.positions
    if std == 0:
        return pos.copy()
    records = pos.shape[0]
    step_std = std / np.sqrt(max(records - 1, 1))
    increments = rng.normal(0.0, step_std, size=pos.shape)
    increments[0] = 0.0
    walk = np.cumsum(increments, axis=0)
    walk[:, trajectory.topology.fixed_mask] = 0.0
    return pos + walk
