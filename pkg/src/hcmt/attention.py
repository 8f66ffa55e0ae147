"""Edge-aware multi-head graph attention shared by the CMT and HMT layers.

For a receiving node ``i`` and neighbour ``j`` (per head, ``d_head`` wide)::

    logit_ij = clip(<Q LN(z_i), K LN(z_j)> / sqrt(d)) + E LN(e_ij)
    alpha_ij = softmax over j of logit_ij, separately per dimension
    a_ij     = alpha_ij * W LN(e_ij)
    out_i    = sum_j a_ij * V LN(z_j)

The scalar dot-product term is broadcast over the ``d_head`` entries of the
edge projection.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .nn import DTYPE, LayerNorm, clip, relu

__all__ = ["BranchProjections", "segment_softmax", "edge_attention", "AttentionBlock", "FeedForward"]


class BranchProjections(nn.Module):
    """Q, K, V node maps and E, W edge maps, all heads stacked (``dim x dim``)."""

    def __init__(self, dim: int):
        super().__init__()
        self.q = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.k = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.v = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.e = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.w = nn.Linear(dim, dim, bias=False, dtype=DTYPE)


class FeedForward(nn.Module):
    """Three linear layers with two ReLUs at constant width."""

    def __init__(self, dim: int):
        super().__init__()
        self.l1 = nn.Linear(dim, dim, dtype=DTYPE)
        self.l2 = nn.Linear(dim, dim, dtype=DTYPE)
        self.l3 = nn.Linear(dim, dim, dtype=DTYPE)

    def forward(self, x):
        return self.l3(relu(self.l2(relu(self.l1(x)))))


def segment_softmax(logits: torch.Tensor, index: torch.Tensor, num_segments: int) -> torch.Tensor:
    """Softmax of ``logits`` (``E x ...``) within groups sharing ``index``."""
    expanded = index.view(-1, *([1] * (logits.dim() - 1))).expand_as(logits)
    shape = (num_segments,) + tuple(logits.shape[1:])
    peak = torch.full(shape, -math.inf, dtype=logits.dtype).scatter_reduce(
        0, expanded, logits.detach(), reduce="amax", include_self=True
    )
    ex = torch.exp(logits - peak[index])
    denom = torch.zeros(shape, dtype=logits.dtype).index_add_(0, index, ex)
    return ex / denom[index]


def edge_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    edge_hidden: torch.Tensor,
    proj: BranchProjections,
    edges: torch.Tensor,
    scale: float,
    clip_range: tuple[float, float],
) -> tuple[torch.Tensor, torch.Tensor]:
    """Messages ``(N, H, d_head)`` and pre-modulation weights ``(E, H, d_head)``.

    ``q, k, v`` are ``(N, H, d_head)``; ``edge_hidden`` is already layer-normed.
    Nodes without incoming edges receive zeros.
    """
    n, heads, d_head = q.shape
    if edges.shape[0] == 0:
        return q.new_zeros(n, heads, d_head), q.new_zeros(0, heads, d_head)
    recv, send = edges[:, 0], edges[:, 1]
    num_e = edges.shape[0]
    score = clip((q[recv] * k[send]).sum(-1) / scale, *clip_range)
    logits = score.unsqueeze(-1) + proj.e(edge_hidden).view(num_e, heads, d_head)
    alpha = segment_softmax(logits, recv, n)
    gated = alpha * proj.w(edge_hidden).view(num_e, heads, d_head)
    out = q.new_zeros(n, heads, d_head).index_add_(0, recv, gated * v[send])
    return out, alpha


class AttentionBlock(nn.Module):
    """Pre-LN transformer block over mesh edges and, optionally, contact edges.

    ``z' = z + O zbar + FFN(LN(z + O zbar))``. With ``dual`` the contact
    edges get their own softmax and ``zbar`` concatenates the mesh-branch
    heads, then the contact-branch heads. With ``contact`` but not ``dual``
    both edge sets share one softmax (single branch). Edge hiddens pass
    through unchanged.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        dual: bool = False,
        shared_branches: bool = True,
        clip_range: tuple[float, float] = (-2.0, 2.0),
        contact: bool | None = None,
    ):
        super().__init__()
        if dim % heads:
            raise ValueError(f"hidden size {dim} is not divisible by {heads} heads")
        self.dim, self.heads, self.dual = dim, heads, dual
        self.uses_contact = dual if contact is None else (contact or dual)
        self.shared_branches = shared_branches
        self.clip_range = (float(clip_range[0]), float(clip_range[1]))
        self.ln_node = LayerNorm(dim)
        self.ln_mesh = LayerNorm(dim)
        self.mesh = BranchProjections(dim)
        self.contact = None
        if self.uses_contact:
            self.ln_contact = LayerNorm(dim)
        if dual and not shared_branches:
            self.contact = BranchProjections(dim)
        self.out = nn.Linear(2 * dim if dual else dim, dim, dtype=DTYPE)
        self.ln_ffn = LayerNorm(dim)
        self.ffn = FeedForward(dim)

    def _qkv(self, proj: BranchProjections, zn: torch.Tensor):
        n = zn.shape[0]
        shape = (n, self.heads, self.dim // self.heads)
        return proj.q(zn).view(shape), proj.k(zn).view(shape), proj.v(zn).view(shape)

    def aggregate(self, z, mesh_edges, mesh_hidden, contact_edges=None, contact_hidden=None):
        """``zbar`` and the per-branch pre-modulation attention weights."""
        n = z.shape[0]
        zn = self.ln_node(z)
        scale = math.sqrt(self.dim)
        q, k, v = self._qkv(self.mesh, zn)
        edge_hidden = self.ln_mesh(mesh_hidden)
        if self.uses_contact and not self.dual and contact_edges is not None:
            mesh_edges = torch.cat([mesh_edges, contact_edges])
            edge_hidden = torch.cat([edge_hidden, self.ln_contact(contact_hidden)])
        mesh_out, mesh_alpha = edge_attention(
            q, k, v, edge_hidden, self.mesh, mesh_edges, scale, self.clip_range
        )
        weights = {"mesh": mesh_alpha}
        parts = [mesh_out.reshape(n, self.dim)]
        if self.dual:
            proj = self.mesh if self.contact is None else self.contact
            if self.contact is not None:
                q, k, v = self._qkv(proj, zn)
            if contact_edges is None:
                contact_edges = torch.zeros((0, 2), dtype=torch.long)
                contact_hidden = z.new_zeros(0, self.dim)
            contact_out, contact_alpha = edge_attention(
                q, k, v, self.ln_contact(contact_hidden), proj, contact_edges, scale, self.clip_range
            )
            weights["contact"] = contact_alpha
            parts.append(contact_out.reshape(n, self.dim))
        return torch.cat(parts, dim=-1), weights

    def forward(self, z, mesh_edges, mesh_hidden, contact_edges=None, contact_hidden=None):
        zbar, _ = self.aggregate(z, mesh_edges, mesh_hidden, contact_edges, contact_hidden)
        u = z + self.out(zbar)
        return u + self.ffn(self.ln_ffn(u))
