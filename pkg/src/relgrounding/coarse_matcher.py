"""Stage-one matching: score every proposal, regress offsets, keep the top K."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from relgrounding.geometry import apply_offset_t


def mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.Tanh(), nn.Linear(hidden, out_dim))


class MatchHead(nn.Module):
    """A scorer and an offset regressor over ``[x_q; x_o; x_q * x_o]``."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.cls = mlp(3 * dim, hidden, 1)
        self.reg = mlp(3 * dim, hidden, 4)

    def forward(self, x_q: torch.Tensor, x_o: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x_q, x_o = torch.broadcast_tensors(x_q, x_o)
        pair = torch.cat([x_q, x_o, x_q * x_o], dim=-1)
        return torch.sigmoid(self.cls(pair)).squeeze(-1), self.reg(pair)


def score_and_regress(head: MatchHead, x_q: torch.Tensor, x_o: torch.Tensor):
    """Raw score in (0, 1) and a 4-vector offset for each phrase/proposal pair."""
    return head(x_q, x_o)


@dataclass
class ScoreTable:
    raw: torch.Tensor
    semantic: torch.Tensor
    fused: torch.Tensor
    attention: torch.Tensor


def fuse_and_attend(raw: torch.Tensor, semantic: torch.Tensor, scale: float = 1.0) -> ScoreTable:
    """Multiplicative fusion, then a softmax over proposals of ``scale * fused``."""
    if raw.shape != semantic.shape:
        raise ValueError(f"shape mismatch {tuple(raw.shape)} vs {tuple(semantic.shape)}")
    fused = raw * semantic
    return ScoreTable(raw, semantic, fused, torch.softmax(scale * fused, dim=-1))


@dataclass
class RefinedSet:
    indices: torch.Tensor  # (..., N, K)
    boxes: torch.Tensor  # (..., N, K, 4), after the phrase's offsets
    attention: torch.Tensor  # (..., N, K), renormalized over the selection


def topk_indices(fused: torch.Tensor, k: int) -> torch.Tensor:
    """Descending order, ties resolved toward the lower proposal index."""
    order = torch.sort(fused.detach(), dim=-1, descending=True, stable=True).indices
    return order[..., :k]


def gather_k(values: torch.Tensor, indices: torch.Tensor) -> torch.Tensor:
    """Pick ``indices`` (..., N, K) out of ``values`` (..., N, M, *rest)."""
    rest = values.shape[indices.dim() :]
    idx = indices.reshape(*indices.shape, *([1] * len(rest))).expand(*indices.shape, *rest)
    return torch.gather(values, indices.dim() - 1, idx)


def restrict_attention(fused: torch.Tensor, indices: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    # softmax over the kept subset == full softmax restricted and renormalized
    return torch.softmax(scale * torch.gather(fused, -1, indices), dim=-1)


def select_topk(
    table: ScoreTable,
    boxes: torch.Tensor,
    offsets: torch.Tensor | None,
    k: int,
    bounds: torch.Tensor,
    scale: float = 1.0,
) -> RefinedSet:
    """Keep each phrase's ``k`` best proposals and move them by that phrase's offsets.

    ``boxes`` is (..., M, 4) shared by all phrases; ``offsets`` is
    (..., N, M, 4) or None to keep the boxes in place.
    """
    M = boxes.shape[-2]
    if k > M:
        raise ValueError(f"K={k} exceeds the {M} available proposals")
    indices = topk_indices(table.fused, k)
    per_phrase = boxes.unsqueeze(-3).expand(*table.fused.shape, 4)
    picked = gather_k(per_phrase, indices)
    if offsets is not None:
        picked = apply_offset_t(picked, gather_k(offsets.detach(), indices), bounds)
    return RefinedSet(indices, picked, restrict_attention(table.fused, indices, scale))
