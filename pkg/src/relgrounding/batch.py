"""Padding a list of instances into dense tensors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from relgrounding.corpus import GroundingInstance
from relgrounding.text_encoder import span_pooling_matrix


@dataclass
class Batch:
    image_ids: list[str]
    features: torch.Tensor  # (B, M, d_in)
    boxes: torch.Tensor  # (B, M, 4)
    categories: torch.Tensor  # (B, M)
    image_size: torch.Tensor  # (B, 2) width, height
    tokens: torch.Tensor  # (B, T)
    token_mask: torch.Tensor  # (B, T)
    pooling: torch.Tensor  # (B, N, T)
    phrase_mask: torch.Tensor  # (B, N)
    concepts: torch.Tensor  # (B, N)
    phrase_tokens: torch.Tensor  # (B, N, L)
    phrase_token_mask: torch.Tensor  # (B, N, L)
    adjacency: torch.Tensor  # (B, N, N)
    rel_pairs: torch.Tensor  # (R, 3) instance, i, j
    rel_labels: torch.Tensor  # (R,)
    num_phrases: list[int]

    @property
    def size(self) -> int:
        return len(self.image_ids)

    @property
    def bounds(self) -> torch.Tensor:
        """(B, 4) image rectangles."""
        zeros = torch.zeros_like(self.image_size)
        return torch.cat([zeros, self.image_size], dim=-1)


def collate(instances: list[GroundingInstance], dtype: torch.dtype = torch.float32) -> Batch:
    """Pad instances into a :class:`Batch`. Ground-truth boxes are not read."""
    B = len(instances)
    M = max(inst.image.num_proposals for inst in instances)
    if any(inst.image.num_proposals != M for inst in instances):
        raise ValueError("all instances in a batch need the same proposal count")
    N = max(len(inst.caption.phrases) for inst in instances)
    T = max(len(inst.caption.tokens) for inst in instances)
    L = max(len(p) for inst in instances for p in inst.caption.phrases)

    tokens = torch.zeros(B, T, dtype=torch.long)
    token_mask = torch.zeros(B, T, dtype=torch.bool)
    phrase_mask = torch.zeros(B, N, dtype=torch.bool)
    concepts = torch.zeros(B, N, dtype=torch.long)
    phrase_tokens = torch.zeros(B, N, L, dtype=torch.long)
    phrase_token_mask = torch.zeros(B, N, L, dtype=torch.bool)
    adjacency = torch.zeros(B, N, N, dtype=torch.bool)
    pairs, labels = [], []
    for b, inst in enumerate(instances):
        cap = inst.caption
        tokens[b, : len(cap.tokens)] = torch.tensor(cap.tokens)
        token_mask[b, : len(cap.tokens)] = True
        for i, span in enumerate(cap.phrases):
            phrase_mask[b, i] = True
            concepts[b, i] = span.concept
            phrase_tokens[b, i, : len(span)] = torch.tensor(cap.tokens[span.start : span.end])
            phrase_token_mask[b, i, : len(span)] = True
        for rel in cap.relations:
            adjacency[b, rel.i, rel.j] = adjacency[b, rel.j, rel.i] = True
            if rel.label > 0:
                pairs.append((b, rel.i, rel.j))
                labels.append(rel.label)

    return Batch(
        image_ids=[inst.image.image_id for inst in instances],
        features=torch.from_numpy(np.stack([inst.image.features for inst in instances])).to(dtype),
        boxes=torch.from_numpy(np.stack([inst.image.boxes for inst in instances])).to(dtype),
        categories=torch.from_numpy(np.stack([inst.image.categories for inst in instances])).long(),
        image_size=torch.tensor([[inst.image.width, inst.image.height] for inst in instances], dtype=dtype),
        tokens=tokens,
        token_mask=token_mask,
        pooling=span_pooling_matrix([list(inst.caption.phrases) for inst in instances], N, T).to(dtype),
        phrase_mask=phrase_mask,
        concepts=concepts,
        phrase_tokens=phrase_tokens,
        phrase_token_mask=phrase_token_mask,
        adjacency=adjacency,
        rel_pairs=torch.tensor(pairs, dtype=torch.long).reshape(-1, 3),
        rel_labels=torch.tensor(labels, dtype=torch.long),
        num_phrases=[len(inst.caption.phrases) for inst in instances],
    )
