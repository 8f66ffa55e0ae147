"""Central finite-difference check of the end-to-end loss gradient."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .datagen import plate_mesh
from .mesh import MeshTopology, NodeKind, SystemState
from .nn import PATTERN
from .model import HCMT, ModelConfig, ModelInputs, loss_fn, make_targets, prepare_inputs

__all__ = ["GradcheckReport", "small_instance", "gradcheck_config", "run_gradcheck"]


def gradcheck_config(seed: int = 0) -> ModelConfig:
    return ModelConfig(hidden=8, heads=2, l_c=1, l_h=3, lam=1, seed=seed, radius=0.6)


def small_instance(seed: int = 0) -> tuple[MeshTopology, SystemState, np.ndarray, np.ndarray]:
    """A 6x3 plate and a 4x3 block hovering within contact range (30 nodes).

    Returns topology, state, next positions and next stress.
    """
    rng = np.random.default_rng(seed)
    plate, plate_cells = plate_mesh(6, 3, 0.5)
    block, block_cells = plate_mesh(4, 3, 0.5)
    block = block + np.array([0.9, 1.45])
    points = np.concatenate([plate, block])
    cells = np.concatenate([plate_cells, block_cells + plate.shape[0]])
    n = points.shape[0]
    object_id = np.r_[np.zeros(plate.shape[0], np.int64), np.ones(block.shape[0], np.int64)]
    kinds = np.where(object_id == 1, NodeKind.BALL, NodeKind.PLATE_FREE)
    kinds[[0, 5]] = NodeKind.PLATE_FIXED
    rho = np.where(object_id == 1, 2.0, 1.0) + 0.1 * rng.random(n)
    youngs = np.where(object_id == 1, 5.0, 1.0) + 0.1 * rng.random(n)
    topology = MeshTopology(cells, object_id, points, kinds, rho, youngs)
    free = ~topology.fixed_mask
    world = points + 0.02 * rng.standard_normal((n, 2)) * free[:, None]
    prev = world - 0.03 * rng.standard_normal((n, 2)) * free[:, None]
    state = SystemState(world, prev, rng.random(n))
    nxt = world + 0.03 * rng.standard_normal((n, 2)) * free[:, None]
    return topology, state, nxt, rng.random(n)


@dataclass
class GradcheckReport:
    errors: dict[str, float]
    num_parameters: int
    seconds: float
    kink_entries: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]


def _relative_error(fd: torch.Tensor, ad: torch.Tensor) -> float:
    denom = max(float(fd.norm()), float(ad.norm()))
    if denom == 0.0:
        return 0.0
    return float((fd - ad).norm()) / denom


def run_gradcheck(seed: int = 0, step: float = 1e-4) -> GradcheckReport:
    """Compare autograd with central differences for every parameter tensor.

    The error of a tensor is ``|g_fd - g_ad| / max(|g_fd|, |g_ad|)`` over all
    of its entries. Entries whose +-step evaluations land on a different
    ReLU/clip branch than the base point are differenced again with the
    base branch held fixed; ``kink_entries`` counts them.
    """
    started = time.perf_counter()
    config = gradcheck_config(seed)
    torch.manual_seed(seed)
    model = HCMT(config).eval()
    topology, state, nxt, next_stress = small_instance(seed)
    hierarchy = model.build_hierarchy(topology)
    inputs: ModelInputs = prepare_inputs(topology, state, hierarchy, config.radius, config.num_levels)
    if inputs.contact_edges.shape[0] == 0:
        raise RuntimeError("gradient-check instance has no contact edges")
    target = make_targets(state.world_coords, nxt, next_stress)
    mask = torch.as_tensor(~topology.fixed_mask)
    model.accumulate_stats(inputs, target)
    model.freeze_normalizers()
    goal = model.target_norm.normalize(target)

    def objective() -> torch.Tensor:
        return loss_fn(model(inputs), goal, mask)

    model.zero_grad()
    PATTERN.start("record")
    try:
        objective().backward()
    finally:
        PATTERN.stop()
    errors = {}
    count = kinks = 0
    with torch.no_grad():
        for name, p in model.named_parameters():
            analytic = p.grad.detach().clone()
            flat = p.view(-1)
            numeric = torch.empty_like(flat)
            for i in range(flat.numel()):
                orig = float(flat[i])
                numeric[i], crossed = _central_difference(objective, flat, i, orig, step, "compare")
                if crossed:
                    numeric[i], _ = _central_difference(objective, flat, i, orig, step, "replay")
                    kinks += 1
            errors[name] = _relative_error(numeric, analytic.view(-1))
            count += flat.numel()
    return GradcheckReport(errors, count, time.perf_counter() - started, kinks)


def _central_difference(objective, flat, i, orig, step, mode):
    crossed = False
    values = []
    for x in (orig + step, orig - step):
        flat[i] = x
        PATTERN.start(mode)
        try:
            values.append(float(objective()))
        finally:
            crossed |= PATTERN.flipped
            PATTERN.stop()
    flat[i] = orig
    return (values[0] - values[1]) / (2 * step), crossed
