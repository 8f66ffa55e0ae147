"""Hierarchical Mesh Transformer: mesh-only attention over a pooled V-cycle."""

from __future__ import annotations

import torch
from torch import nn

from .attention import AttentionBlock
from .mesh import ConfigError

__all__ = ["HmtBlock", "make_schedule", "pool_states", "unpool_states", "hmt_layer"]


class HmtBlock(AttentionBlock):
    """Single-branch block over one level's mesh edges."""

    def __init__(self, dim: int, heads: int, clip_range=(-2.0, 2.0)):
        super().__init__(dim, heads, dual=False, clip_range=clip_range, contact=False)

    def forward(self, h, mesh_edges, mesh_hidden, contact_edges=None, contact_hidden=None):
        return super().forward(h, mesh_edges, mesh_hidden)


def make_schedule(num_blocks: int, num_levels: int) -> list[int]:
    """Level of every block: descend to ``num_levels``, hold, then climb back to 0.

    >>> make_schedule(3, 1)
    [1, 1, 0]
    """
    if num_levels < 0:
        raise ConfigError(f"number of levels must be >= 0, got {num_levels}")
    if num_levels == 0:
        return [0] * num_blocks
    if num_blocks < 2 * num_levels + 1:
        raise ConfigError(
            f"a V-cycle over {num_levels} levels needs at least 2*lambda+1 = "
            f"{2 * num_levels + 1} blocks, got L_H = {num_blocks}"
        )
    down = list(range(1, num_levels + 1))
    hold = [num_levels] * (num_blocks - 2 * num_levels)
    up = list(range(num_levels - 1, -1, -1))
    return down + hold + up


def pool_states(h: torch.Tensor, parent_map) -> torch.Tensor:
    """Coarse states: the rows of surviving nodes, copied."""
    return h[torch.as_tensor(parent_map, dtype=torch.long)]


def unpool_states(coarse: torch.Tensor, saved_fine: torch.Tensor, parent_map) -> torch.Tensor:
    """Saved fine states plus the coarse states added onto surviving nodes."""
    if saved_fine is None:
        raise RuntimeError("unpooling without a saved fine state")
    idx = torch.as_tensor(parent_map, dtype=torch.long)
    return saved_fine.index_add(0, idx, coarse)


def hmt_layer(
    h: torch.Tensor,
    level_edges: list[torch.Tensor],
    level_hidden: list[torch.Tensor],
    parent_maps: list,
    blocks: nn.ModuleList,
    schedule: list[int],
) -> torch.Tensor:
    """Run ``blocks`` along ``schedule``, pooling and unpooling between levels.

    ``level_edges[v]``/``level_hidden[v]`` are the mesh edges and encoded
    edge hiddens of level ``v``; ``parent_maps[v]`` maps level ``v`` nodes to
    level ``v - 1`` (entry 0 is unused).
    """
    if len(schedule) != len(blocks):
        raise ConfigError(f"schedule has {len(schedule)} entries for {len(blocks)} blocks")
    if schedule and max(schedule) >= len(level_edges):
        raise ConfigError(
            f"schedule reaches level {max(schedule)} but the hierarchy has "
            f"{len(level_edges) - 1} pooled levels"
        )
    level = 0
    saved: list[torch.Tensor] = []
    for block, target in zip(blocks, schedule):
        while level < target:
            saved.append(h)
            level += 1
            h = pool_states(h, parent_maps[level])
        while level > target:
            h = unpool_states(h, saved.pop(), parent_maps[level])
            level -= 1
        h = block(h, level_edges[level], level_hidden[level])
    while level > 0:
        h = unpool_states(h, saved.pop(), parent_maps[level])
        level -= 1
    return h
