"""Synthetic 2D ball-on-plate impact scenes integrated with a mass-spring model.

The plate is a triangulated strip pinned at both ends; the ball is a
triangulated disc dropped onto it. Mesh edges act as linear springs with
viscous damping along the edge, lumped masses come from triangle areas,
and opposing-object node pairs closer than the contact radius repel with a
linear penalty. Integration is semi-implicit Euler at a fine substep and
every ``record_every``-th state is written.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import DatasetError, topology_to_meta, write_meta, write_trajectory_bin
from .delaunay import delaunay_triangulate
from .mesh import ConfigError, MeshTopology, NodeKind, SystemState, edges_from_cells

__all__ = [
    "ScenarioSpec",
    "MaterialSample",
    "Scene",
    "SceneError",
    "InstabilityError",
    "PRESETS",
    "sample_material",
    "plate_mesh",
    "disc_mesh",
    "build_scene",
    "make_scene",
    "stable_substep",
    "step_dynamics",
    "integrate",
    "mechanical_energy",
    "total_momentum",
    "node_stress",
    "simulate",
    "generate_dataset",
]

log = logging.getLogger(__name__)


class SceneError(ValueError):
    pass


class InstabilityError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    """Scene geometry, material ranges and integration settings.

    ``(lo, hi)`` tuples are uniform ranges sampled once per trajectory;
    ``plate_rows`` is a set of choices.
    """

    plate_columns: int = 31
    plate_rows: tuple[int, ...] = (7, 8, 9)
    element_size: float = 0.5
    plate_rho: tuple[float, float] = (0.8, 1.2)
    plate_youngs: tuple[float, float] = (8.0e4, 1.5e5)
    damping_ratio: float = 0.08
    ball_radius: float = 1.5
    ball_rings: int = 3
    ball_rho: float = 2.0
    ball_youngs: float = 1.5e5
    drop_gap: tuple[float, float] = (0.45, 0.7)
    drop_speed: tuple[float, float] = (3.0, 5.0)
    ball_offset: tuple[float, float] = (-2.0, 2.0)
    penalty_stiffness: float = 3.0e4
    contact_radius: float = 0.3
    gravity: float = 10.0
    dt: float = 0.005
    steps: int = 50
    stability_margin: float = 0.25
    model_radius: float = 0.4

    def with_(self, **changes) -> "ScenarioSpec":
        return dataclasses.replace(self, **changes)


PRESETS = {"impact2d": ScenarioSpec()}


@dataclass(frozen=True)
class MaterialSample:
    plate_rows: int
    plate_rho: float
    plate_youngs: float
    drop_gap: float
    drop_speed: float
    ball_offset: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def sample_material(spec: ScenarioSpec, rng: np.random.Generator) -> MaterialSample:
    return MaterialSample(
        plate_rows=int(rng.choice(np.asarray(spec.plate_rows))),
        plate_rho=float(rng.uniform(*spec.plate_rho)),
        plate_youngs=float(rng.uniform(*spec.plate_youngs)),
        drop_gap=float(rng.uniform(*spec.drop_gap)),
        drop_speed=float(rng.uniform(*spec.drop_speed)),
        ball_offset=float(rng.uniform(*spec.ball_offset)),
    )


def plate_mesh(columns: int, rows: int, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Regular grid with two triangles per square, alternating diagonals."""
    if columns < 2 or rows < 2:
        raise SceneError(f"plate needs at least 2x2 nodes, got {columns}x{rows}")
    jj, ii = np.meshgrid(np.arange(rows), np.arange(columns), indexing="ij")
    points = np.stack([ii.ravel() * h, jj.ravel() * h], axis=1)
    cells = []
    for j in range(rows - 1):
        for i in range(columns - 1):
            a = j * columns + i
            b, c, d = a + 1, a + columns + 1, a + columns
            if (i + j) % 2 == 0:
                cells += [(a, b, c), (a, c, d)]
            else:
                cells += [(a, b, d), (b, c, d)]
    return points, np.asarray(cells, dtype=np.int64)


def disc_mesh(radius: float, rings: int) -> tuple[np.ndarray, np.ndarray]:
    """Centre node plus ``rings`` concentric rings of ``6k`` nodes, Delaunay-meshed."""
    if rings < 1:
        raise SceneError("disc needs at least one ring")
    pts = [np.zeros((1, 2))]
    for k in range(1, rings + 1):
        theta = 2 * np.pi * np.arange(6 * k) / (6 * k)
        r = radius * k / rings
        pts.append(np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1))
    points = np.concatenate(pts)
    return points, delaunay_triangulate(points)


@dataclass
class Scene:
    """Precomputed quantities for the integrator."""

    topology: MeshTopology
    mass: np.ndarray
    springs: np.ndarray
    rest_length: np.ndarray
    stiffness: np.ndarray
    damping: np.ndarray
    spring_youngs: np.ndarray
    degree: np.ndarray
    pinned: np.ndarray
    gravity: float
    penalty_stiffness: float
    contact_radius: float
    dt_fine: float = 0.0
    record_every: int = 1


def _lumped_mass(topology: MeshTopology) -> np.ndarray:
    p = topology.mesh_coords[topology.cells]
    area = 0.5 * np.abs(
        (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
        - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    )
    rho = topology.rho[topology.cells].mean(axis=1)
    mass = np.zeros(topology.num_nodes)
    np.add.at(mass, topology.cells.ravel(), np.repeat(rho * area / 3.0, 3))
    return mass


def make_scene(
    topology: MeshTopology,
    element_size: float,
    damping_ratio: float,
    gravity: float,
    penalty_stiffness: float,
    contact_radius: float,
    pinned: bool = True,
) -> Scene:
    """Springs on every undirected mesh edge with ``k = Y * h / L``."""
    edges = edges_from_cells(topology.cells, topology.num_nodes)
    springs = edges[edges[:, 0] < edges[:, 1]]
    mass = _lumped_mass(topology)
    if np.any(mass <= 0):
        raise SceneError("every node must belong to at least one cell")
    u = topology.mesh_coords
    rest = np.linalg.norm(u[springs[:, 0]] - u[springs[:, 1]], axis=1)
    youngs = topology.youngs[springs].mean(axis=1)
    k = youngs * element_size / rest
    m_pair = np.minimum(mass[springs[:, 0]], mass[springs[:, 1]])
    c = 2.0 * damping_ratio * np.sqrt(k * m_pair)
    degree = np.bincount(springs.ravel(), minlength=topology.num_nodes).astype(np.float64)
    pin = topology.fixed_mask if pinned else np.zeros(topology.num_nodes, dtype=bool)
    return Scene(
        topology=topology,
        mass=mass,
        springs=springs,
        rest_length=rest,
        stiffness=k,
        damping=c,
        spring_youngs=youngs,
        degree=degree,
        pinned=pin,
        gravity=gravity,
        penalty_stiffness=penalty_stiffness,
        contact_radius=contact_radius,
    )


def stable_substep(scene: Scene, dt: float, margin: float) -> tuple[float, int]:
    """Largest ``dt / n`` with ``omega_max * dt / n <= margin``.

    ``omega_max`` is bounded with Gershgorin on ``M^-1 K`` including the
    contact penalty acting on a node's full neighbourhood.
    """
    row = np.zeros(scene.topology.num_nodes)
    np.add.at(row, scene.springs.ravel(), np.repeat(2.0 * scene.stiffness, 2))
    row += 6.0 * scene.penalty_stiffness
    omega = float(np.sqrt((row / scene.mass).max()))
    n = max(1, int(np.ceil(omega * dt / margin)))
    return dt / n, n


def build_scene(spec: ScenarioSpec, rng: np.random.Generator, pinned: bool = True):
    """Topology, initial state (with one-step history) and the integrator scene."""
    draw = sample_material(spec, rng)
    h = spec.element_size
    plate_pts, plate_cells = plate_mesh(spec.plate_columns, draw.plate_rows, h)
    ball_pts, ball_cells = disc_mesh(spec.ball_radius, spec.ball_rings)
    plate_top = (draw.plate_rows - 1) * h
    centre = np.array(
        [0.5 * (spec.plate_columns - 1) * h + draw.ball_offset, plate_top + draw.drop_gap + spec.ball_radius]
    )
    ball_pts = ball_pts + centre
    if ball_pts[:, 1].min() - plate_top <= spec.contact_radius:
        raise SceneError(f"ball overlaps the plate (gap {draw.drop_gap:.3f})")
    n_plate = plate_pts.shape[0]
    points = np.concatenate([plate_pts, ball_pts])
    cells = np.concatenate([plate_cells, ball_cells + n_plate])
    kinds = np.full(points.shape[0], NodeKind.BALL, dtype=np.int64)
    kinds[:n_plate] = NodeKind.PLATE_FREE
    column = np.arange(n_plate) % spec.plate_columns
    kinds[:n_plate][(column == 0) | (column == spec.plate_columns - 1)] = NodeKind.PLATE_FIXED
    object_id = np.r_[np.zeros(n_plate, np.int64), np.ones(ball_pts.shape[0], np.int64)]
    rho = np.where(object_id == 0, draw.plate_rho, spec.ball_rho)
    youngs = np.where(object_id == 0, draw.plate_youngs, spec.ball_youngs)
    topology = MeshTopology(cells, object_id, points, kinds, rho, youngs)
    scene = make_scene(
        topology, h, spec.damping_ratio, spec.gravity, spec.penalty_stiffness, spec.contact_radius, pinned
    )
    scene.dt_fine, scene.record_every = stable_substep(scene, spec.dt, spec.stability_margin)
    velocity = np.zeros_like(points)
    velocity[object_id == 1, 1] = -draw.drop_speed
    state = SystemState(points.copy(), points - velocity * spec.dt, np.zeros(points.shape[0]))
    return topology, state, scene, draw


def _contact_pairs(x: np.ndarray, object_id: np.ndarray, radius: float) -> np.ndarray:
    """Pairs ``i < j`` on different objects closer than ``radius``."""
    a = np.flatnonzero(object_id == object_id.min())
    b = np.flatnonzero(object_id != object_id.min())
    if a.size == 0 or b.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    lo, hi = x[b].min(axis=0) - radius, x[b].max(axis=0) + radius
    a = a[np.all((x[a] > lo) & (x[a] < hi), axis=1)]
    if a.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    d = x[a][:, None, :] - x[b][None, :, :]
    ia, ib = np.nonzero(np.einsum("ijk,ijk->ij", d, d) < radius * radius)
    return np.stack([a[ia], b[ib]], axis=1)


def _forces(scene: Scene, x: np.ndarray, v: np.ndarray, damping: bool = True, contact: bool = True) -> np.ndarray:
    i, j = scene.springs[:, 0], scene.springs[:, 1]
    d = x[j] - x[i]
    length = np.linalg.norm(d, axis=1)
    unit = d / length[:, None]
    f_mag = scene.stiffness * (length - scene.rest_length)
    if damping:
        f_mag = f_mag + scene.damping * np.einsum("ij,ij->i", v[j] - v[i], unit)
    f_edge = f_mag[:, None] * unit
    n = x.shape[0]
    force = np.empty_like(x)
    for axis in range(2):
        force[:, axis] = np.bincount(i, f_edge[:, axis], n) - np.bincount(j, f_edge[:, axis], n)
    if contact and scene.penalty_stiffness > 0:
        pairs = _contact_pairs(x, scene.topology.object_id, scene.contact_radius)
        if pairs.size:
            p, q = pairs[:, 0], pairs[:, 1]
            dq = x[q] - x[p]
            dist = np.linalg.norm(dq, axis=1)
            push = scene.penalty_stiffness * (scene.contact_radius - dist)
            f = (push / np.maximum(dist, 1e-12))[:, None] * dq
            for axis in range(2):
                force[:, axis] += np.bincount(q, f[:, axis], n) - np.bincount(p, f[:, axis], n)
    force[:, 1] -= scene.gravity * scene.mass
    return force


def step_dynamics(scene: Scene, state: SystemState, dt: float | None = None) -> SystemState:
    """One semi-implicit Euler substep; ``state.prev_world_coords`` is the previous substep."""
    dt = scene.dt_fine if dt is None else dt
    x = state.world_coords
    v = (x - state.prev_world_coords) / dt
    v_new = v + dt * _forces(scene, x, v) / scene.mass[:, None]
    v_new[scene.pinned] = 0.0
    x_new = x + dt * v_new
    if not np.all(np.isfinite(x_new)):
        raise InstabilityError(f"non-finite state with substep dt={dt:g}")
    return SystemState(x_new, x, node_stress(scene, x_new))


def integrate(scene: Scene, x: np.ndarray, v: np.ndarray, substeps: int, dt: float | None = None):
    """Advance positions and velocities by ``substeps`` substeps."""
    dt = scene.dt_fine if dt is None else dt
    inv_m = 1.0 / scene.mass[:, None]
    for _ in range(substeps):
        v = v + dt * _forces(scene, x, v) * inv_m
        v[scene.pinned] = 0.0
        x = x + dt * v
    if not np.all(np.isfinite(x)):
        raise InstabilityError(f"non-finite state with substep dt={dt:g}")
    return x, v


def node_stress(scene: Scene, x: np.ndarray) -> np.ndarray:
    """Mean over incident springs of ``Y * |strain|``."""
    i, j = scene.springs[:, 0], scene.springs[:, 1]
    length = np.linalg.norm(x[j] - x[i], axis=1)
    s = scene.spring_youngs * np.abs(length - scene.rest_length) / scene.rest_length
    out = np.zeros(x.shape[0])
    np.add.at(out, i, s)
    np.add.at(out, j, s)
    return out / np.maximum(scene.degree, 1.0)


def total_momentum(scene: Scene, v: np.ndarray) -> np.ndarray:
    return (scene.mass[:, None] * v).sum(axis=0)


def mechanical_energy(scene: Scene, x: np.ndarray, v: np.ndarray) -> float:
    """Kinetic, elastic and gravitational energy of the free nodes.

    Semi-implicit Euler with ``v_n = (x_n - x_{n-1}) / dt`` makes this
    non-increasing for a damped linear spring when
    ``c^2 dt - 2 c m + dt k m <= 0``, roughly ``zeta >= omega * dt / 4``.
    The default damping ratio and substep margin satisfy that bound.
    """
    i, j = scene.springs[:, 0], scene.springs[:, 1]
    length = np.linalg.norm(x[j] - x[i], axis=1)
    elastic = 0.5 * float((scene.stiffness * (length - scene.rest_length) ** 2).sum())
    free = ~scene.pinned
    kinetic = 0.5 * float((scene.mass[free, None] * v[free] ** 2).sum())
    potential = scene.gravity * float((scene.mass[free] * x[free, 1]).sum())
    return kinetic + elastic + potential


def simulate(spec: ScenarioSpec, rng: np.random.Generator, pinned: bool = True):
    """Topology, ``(steps + 2, N, 2)`` positions, ``(steps + 2, N)`` stress, draws, scene."""
    topology, state, scene, draw = build_scene(spec, rng, pinned)
    x = state.world_coords.copy()
    v = state.velocity / spec.dt
    positions = [state.prev_world_coords, x]
    stress = [np.zeros(topology.num_nodes), np.zeros(topology.num_nodes)]
    for _ in range(spec.steps):
        x, v = integrate(scene, x, v, scene.record_every)
        positions.append(x)
        stress.append(node_stress(scene, x))
    return topology, np.stack(positions), np.stack(stress), draw, scene


def generate_dataset(
    out: str | Path,
    n_train: int = 50,
    n_val: int = 5,
    n_test: int = 5,
    seed: int = 0,
    preset: str | ScenarioSpec = "impact2d",
) -> Path:
    """Write a dataset directory; output bytes depend only on the arguments."""
    if min(n_train, n_val, n_test) < 1:
        raise ConfigError("train, val and test counts must all be >= 1")
    if isinstance(preset, ScenarioSpec):
        spec = preset
    elif preset in PRESETS:
        spec = PRESETS[preset]
    else:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    root = Path(out)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create {root}: {exc}") from exc
    total = n_train + n_val + n_test
    entries, manifest = [], []
    for k in range(total):
        rng = np.random.default_rng([seed, k])
        topology, positions, stress, draw, scene = simulate(spec, rng)
        name = f"traj_{k:04d}.bin"
        write_trajectory_bin(root / name, positions, stress)
        entry = topology_to_meta(topology)
        entry["file"] = name
        entry["material"] = draw.to_dict()
        entry["substeps"] = scene.record_every
        entries.append(entry)
        manifest.append({"index": k, "file": name, "num_nodes": topology.num_nodes, **draw.to_dict()})
        log.info("trajectory %d: %d nodes, %d substeps per record", k, topology.num_nodes, scene.record_every)
    meta = {
        "dim": 2,
        "dt": spec.dt,
        "gamma": spec.model_radius,
        "steps": spec.steps,
        "seed": seed,
        "preset": next((k for k, v in PRESETS.items() if v == spec), "custom"),
        "scenario": dataclasses.asdict(spec),
        "splits": {
            "train": list(range(n_train)),
            "val": list(range(n_train, n_train + n_val)),
            "test": list(range(n_train + n_val, total)),
        },
        "trajectories": entries,
    }
    write_meta(root, meta)
    try:
        with open(root / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise DatasetError(f"cannot write {root / 'manifest.json'}: {exc}") from exc
    return root
