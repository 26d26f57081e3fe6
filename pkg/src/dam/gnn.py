"""Structure-aware attention over node and edge states, iterated T times."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn


@dataclass
class GNNConfig:
    iterations: int = 2
    heads: int = 8
    node_dim: int = 768
    edge_dim: int = 768

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.node_dim % self.heads:
            raise ValueError(f"heads={self.heads} does not divide node_dim={self.node_dim}")

    @property
    def head_dim(self) -> int:
        return self.node_dim // self.heads


class GatedGNN(nn.Module):
    """Edge-augmented multi-head attention with residual LayerNorm updates.

    Per head, ``alpha_ij = softmax_j(q_i . (k_j + ke_ij) / sqrt(head_dim))`` and
    node i receives ``sum_j alpha_ij (v_j + ve_ij)``. Edges are then refreshed
    from their endpoint nodes. Parameters are shared across iterations.
    """

    def __init__(self, config: GNNConfig):
        super().__init__()
        self.config = config
        d, e = config.node_dim, config.edge_dim
        self.query = nn.Linear(d, d)
        self.key = nn.Linear(d, d)
        self.value = nn.Linear(d, d)
        self.edge_key = nn.Linear(e, d, bias=False)
        self.edge_value = nn.Linear(e, d, bias=False)
        self.node_norm = nn.LayerNorm(d)
        self.edge_update = nn.Linear(2 * d, e)
        self.edge_norm = nn.LayerNorm(e)

    def gnn_step(
        self, nodes: torch.Tensor, edges: torch.Tensor, mask: Optional[torch.Tensor] = None
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """One iteration.

        nodes ``[B, N, D]``, edges ``[B, N, N, E]`` with ``edges[b, i, j]`` the
        edge i->j, mask ``[B, N]`` marking real nodes. Returns the new nodes,
        the new edges and the attention weights ``[B, H, N, N]``.
        """
        b, n, d = nodes.shape
        h, hd = self.config.heads, self.config.head_dim
        q = self.query(nodes).view(b, n, h, hd)
        k = self.key(nodes).view(b, n, h, hd)
        v = self.value(nodes).view(b, n, h, hd)
        ke = self.edge_key(edges).view(b, n, n, h, hd)
        ve = self.edge_value(edges).view(b, n, n, h, hd)

        scores = torch.einsum("bihd,bjhd->bhij", q, k) + torch.einsum("bihd,bijhd->bhij", q, ke)
        scores = scores / math.sqrt(hd)
        if mask is not None:
            scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)

        msg = torch.einsum("bhij,bjhd->bihd", attn, v) + torch.einsum("bhij,bijhd->bihd", attn, ve)
        new_nodes = self.node_norm(nodes + msg.reshape(b, n, d))

        pair = torch.cat(
            [new_nodes.unsqueeze(2).expand(b, n, n, d), new_nodes.unsqueeze(1).expand(b, n, n, d)], dim=-1
        )
        new_edges = self.edge_norm(edges + self.edge_update(pair))
        return new_nodes, new_edges, attn

    def forward(self, nodes, edges, mask=None):
        for _ in range(self.config.iterations):
            nodes, edges, _ = self.gnn_step(nodes, edges, mask)
        return nodes, edges


def readout(edges: torch.Tensor, candidate: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """``[e_{i,t} ; e_{t,i}]`` per batch row; ``candidate``/``target`` are node positions ``[B]``."""
    rows = torch.arange(edges.shape[0], device=edges.device)
    return torch.cat([edges[rows, candidate, target], edges[rows, target, candidate]], dim=-1)
