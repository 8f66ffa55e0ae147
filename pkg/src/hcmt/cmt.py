"""Contact Mesh Transformer: dual-branch attention over mesh and contact edges."""

from __future__ import annotations

from torch import nn

from .attention import AttentionBlock

__all__ = ["CmtBlock", "cmt_layer"]


class CmtBlock(AttentionBlock):
    """One CMT block.

    With ``single_branch`` mesh and contact edges are attended by one
    softmax and the output projection is ``dim x dim``.
    ``branch_params="separate"`` gives the contact branch its own Q/K/V/E/W.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        single_branch: bool = False,
        branch_params: str = "shared",
        clip_range=(-2.0, 2.0),
    ):
        if branch_params not in ("shared", "separate"):
            raise ValueError(f"branch_params must be 'shared' or 'separate', got {branch_params!r}")
        super().__init__(
            dim,
            heads,
            dual=not single_branch,
            shared_branches=branch_params == "shared",
            clip_range=clip_range,
            contact=True,
        )


def cmt_layer(z, mesh_edges, mesh_hidden, contact_edges, contact_hidden, blocks: nn.ModuleList):
    for block in blocks:
        z = block(z, mesh_edges, mesh_hidden, contact_edges, contact_hidden)
    return z
