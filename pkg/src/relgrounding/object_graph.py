"""Phrase-level visual graph with one round of attention message passing."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from relgrounding.coarse_matcher import mlp


class MessageNet(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.net = mlp(dim, hidden, dim)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


@dataclass
class GraphOutput:
    z: torch.Tensor  # (..., N, d) refined node features
    omega: torch.Tensor  # (..., N, N), zero off the edge set


def adjacency_from_relations(relations, num_nodes: int) -> torch.Tensor:
    """Undirected, self-loop free boolean adjacency from (i, j, label) triples."""
    adj = torch.zeros(num_nodes, num_nodes, dtype=torch.bool)
    for rel in relations:
        i, j = rel[0], rel[1]
        if i != j:
            adj[i, j] = adj[j, i] = True
    return adj


def init_nodes(attention: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
    """Attention-weighted mean of each phrase's K selected features.

    attention (..., N, K), features (..., N, K, d) -> (..., N, d)
    """
    return (attention.unsqueeze(-1) * features).sum(-2)


def message_pass(z: torch.Tensor, adjacency: torch.Tensor, message_net: nn.Module | None) -> GraphOutput:
    """z'_i = z_i + sum_j omega_ij F(z_j), omega a softmax of F(z_i).F(z_j) over neighbors.

    Nodes without neighbors pass through unchanged; ``message_net=None``
    disables the graph entirely.
    """
    if message_net is None:
        return GraphOutput(z, torch.zeros(*z.shape[:-1], z.shape[-2], dtype=z.dtype))
    m = message_net(z)
    logits = m @ m.transpose(-1, -2)
    logits = logits.masked_fill(~adjacency, float("-inf"))
    has_nbr = adjacency.any(-1, keepdim=True)
    # all -inf rows would give NaN; they are zeroed below
    omega = torch.softmax(torch.where(has_nbr, logits, torch.zeros_like(logits)), dim=-1)
    omega = torch.where(adjacency, omega, torch.zeros_like(omega))
    return GraphOutput(z + omega @ m, omega)


def redistribute(z_new: torch.Tensor, attention: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
    """x'_{ik} = x_{ik} + a_{ik} z'_i for each phrase's selected proposals."""
    return features + attention.unsqueeze(-1) * z_new.unsqueeze(-2)
