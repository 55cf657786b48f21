"""Stage-two matching over the K context-enriched candidates of each phrase."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from relgrounding.coarse_matcher import MatchHead


@dataclass
class FineTable:
    score: torch.Tensor  # s^f (..., N, K)
    attention: torch.Tensor  # softmax of s^f over K
    offsets: torch.Tensor  # (..., N, K, 4)


def fine_score(
    head: MatchHead,
    x_q: torch.Tensor,
    x_ctx: torch.Tensor,
    semantic_k: torch.Tensor,
    scale: float = 1.0,
) -> FineTable:
    """x_q (..., N, d); x_ctx (..., N, K, d); semantic_k (..., N, K)."""
    raw, offsets = head(x_q.unsqueeze(-2), x_ctx)
    score = raw * semantic_k
    return FineTable(score, torch.softmax(scale * score, dim=-1), offsets)


def fuse_scores(coarse_k: torch.Tensor, fine: torch.Tensor) -> torch.Tensor:
    return coarse_k * fine


def best_candidate(fused: torch.Tensor) -> torch.Tensor:
    """Argmax over K; the first maximum wins ties."""
    return torch.argmax(fused, dim=-1)
