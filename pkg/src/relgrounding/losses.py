"""Weak-supervision objectives: reconstruction, self-taught regression,
relation classification and image/caption ranking."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from relgrounding.coarse_matcher import mlp
from relgrounding.geometry import encode_offset_t, iou_t

log = logging.getLogger(__name__)

BOS = 2


class PhraseDecoder(nn.Module):
    """Teacher-forced LSTM that regenerates a phrase from a visual vector.

    Each step sees ``[z; embed(previous word)]``, starting from BOS.
    """

    def __init__(self, vocab_size: int, word_dim: int, visual_dim: int, hidden_dim: int):
        super().__init__()
        self.vocab_size = vocab_size
        self.embed = nn.Embedding(vocab_size, word_dim)
        self.rnn = nn.LSTM(visual_dim + word_dim, hidden_dim, batch_first=True)
        self.out = nn.Linear(hidden_dim, vocab_size)

    def forward(self, z: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        """z (P, d), tokens (P, L) -> log-probabilities (P, L, V)."""
        tokens = torch.where(tokens >= self.vocab_size, torch.ones_like(tokens), tokens)
        prev = torch.cat([torch.full_like(tokens[:, :1], BOS), tokens[:, :-1]], dim=1)
        inputs = torch.cat([z.unsqueeze(1).expand(-1, tokens.shape[1], -1), self.embed(prev)], dim=-1)
        h, _ = self.rnn(inputs)
        return torch.log_softmax(self.out(h), dim=-1)


def sequence_nll(log_probs: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean negative log-likelihood over each sequence's tokens -> (P,)."""
    nll = -log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    if mask is None:
        return nll.mean(-1)
    mask = mask.to(nll.dtype)
    return (nll * mask).sum(-1) / mask.sum(-1).clamp(min=1)


def reconstruction_loss(
    decoder: PhraseDecoder,
    z_coarse: torch.Tensor,
    z_fine: torch.Tensor,
    phrase_tokens: torch.Tensor,
    token_mask: torch.Tensor,
    phrase_mask: torch.Tensor,
) -> torch.Tensor:
    """Per-instance sum over phrases of both stages' L_log, averaged over the batch.

    z_* (B, N, d); phrase_tokens/token_mask (B, N, L); phrase_mask (B, N).
    """
    B = phrase_mask.shape[0]
    sel = phrase_mask
    z = torch.cat([z_coarse[sel], z_fine[sel]], dim=0)
    tokens = phrase_tokens[sel].repeat(2, 1)
    mask = token_mask[sel].repeat(2, 1)
    return sequence_nll(decoder(z, tokens), tokens, mask).sum() / B


def smooth_l1(x: torch.Tensor) -> torch.Tensor:
    """Elementwise smooth-L1 with the quadratic/linear transition at |x| = 1."""
    ax = x.abs()
    return torch.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def build_regression_targets(
    boxes: torch.Tensor,
    scores: torch.Tensor,
    predicted: torch.Tensor,
    tau: float,
    valid: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Self-taught offset targets toward each row's most confident box.

    boxes (..., P, 4), scores (..., P), predicted (..., P, 4). An entry whose
    IoU with the top box exceeds ``tau`` gets the offset onto that box;
    every other entry keeps its own prediction and is reported False in the
    mask. Targets carry no gradient.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    boxes = boxes.detach()
    scores = scores.detach()
    if valid is not None:
        scores = scores.masked_fill(~valid, float("-inf"))
    best = torch.argmax(scores, dim=-1, keepdim=True)
    best_box = torch.gather(boxes, -2, best.unsqueeze(-1).expand(*best.shape, 4))
    wh = boxes[..., 2:] - boxes[..., :2]
    positive = (wh > 0).all(-1)
    best_positive = torch.gather(positive, -1, best)
    mask = (iou_t(boxes, best_box) > tau) & positive & best_positive
    if valid is not None:
        mask &= valid
    # keep log() away from degenerate boxes; those entries are masked anyway
    safe_src = torch.where(positive.unsqueeze(-1), boxes, torch.tensor([0.0, 0.0, 1.0, 1.0], dtype=boxes.dtype))
    safe_dst = torch.where(best_positive.unsqueeze(-1), best_box, torch.tensor([0.0, 0.0, 1.0, 1.0], dtype=boxes.dtype))
    offsets = encode_offset_t(safe_src, safe_dst.expand_as(safe_src))
    targets = torch.where(mask.unsqueeze(-1), offsets, predicted.detach())
    return targets, mask


def regression_term(predicted: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Smooth-L1 summed over the 4 components, averaged over contributing entries.

    Reduces the last entry axis: (..., P, 4) -> (...). Rows with no
    contributing entry give 0.
    """
    per_entry = smooth_l1(predicted - targets.detach()).sum(-1) * mask.to(predicted.dtype)
    return per_entry.sum(-1) / mask.sum(-1).clamp(min=1).to(predicted.dtype)


def regression_loss(
    coarse_pred: torch.Tensor,
    fine_pred: torch.Tensor,
    coarse_targets: tuple[torch.Tensor, torch.Tensor],
    fine_targets: tuple[torch.Tensor, torch.Tensor],
    phrase_mask: torch.Tensor,
) -> torch.Tensor:
    """Both stages' terms summed over phrases, averaged over the batch."""
    per_phrase = regression_term(coarse_pred, *coarse_targets) + regression_term(fine_pred, *fine_targets)
    per_phrase = per_phrase * phrase_mask.to(per_phrase.dtype)
    return per_phrase.sum() / phrase_mask.shape[0]


class RelationClassifier(nn.Module):
    """Ordered-pair relation logits over the ``C_r`` vocabulary labels."""

    def __init__(self, dim: int, hidden: int, num_relations: int):
        super().__init__()
        self.num_relations = num_relations
        self.net = mlp(2 * dim, hidden, max(num_relations, 1))

    def forward(self, z_i: torch.Tensor, z_j: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([z_i, z_j], dim=-1))


def relation_loss(
    classifier: RelationClassifier,
    z_fine: torch.Tensor,
    pairs: torch.Tensor,
    labels: torch.Tensor,
) -> torch.Tensor:
    """Mean cross-entropy over each instance's labeled pairs, averaged over the batch.

    z_fine (B, N, d); pairs (R, 3) rows of (instance, i, j); labels (R,) in
    1..C_r. Instances without labeled pairs contribute 0.
    """
    B = z_fine.shape[0]
    if pairs.numel() == 0 or classifier.num_relations == 0:
        return z_fine.sum() * 0.0
    b, i, j = pairs.unbind(-1)
    logits = classifier(z_fine[b, i], z_fine[b, j])
    ce = F.cross_entropy(logits, labels - 1, reduction="none")
    per_instance = torch.zeros(B, dtype=ce.dtype).index_add(0, b, ce)
    counts = torch.zeros(B, dtype=ce.dtype).index_add(0, b, torch.ones_like(ce))
    return (per_instance / counts.clamp(min=1)).sum() / B


def cosine_matrix(images: torch.Tensor, sentences: torch.Tensor) -> torch.Tensor:
    """S[a, b] = cos(image a, sentence b)."""
    return F.normalize(images, dim=-1, eps=1e-12) @ F.normalize(sentences, dim=-1, eps=1e-12).T


def ranking_term(images: torch.Tensor, sentences: torch.Tensor, margin: float) -> torch.Tensor:
    """Hardest-negative bidirectional hinge, summed over the batch."""
    B = images.shape[0]
    if B < 2:
        log.warning("ranking loss needs at least 2 pairs per batch; returning 0")
        return images.sum() * 0.0
    S = cosine_matrix(images, sentences)
    pos = S.diagonal()
    off = torch.eye(B, dtype=torch.bool)
    neg = S.masked_fill(off, float("-inf"))
    hardest_image = neg.max(dim=0).values  # per sentence, over I' != I
    hardest_sentence = neg.max(dim=1).values  # per image, over D' != D
    return (
        torch.clamp(margin - pos + hardest_image, min=0).sum()
        + torch.clamp(margin - pos + hardest_sentence, min=0).sum()
    )


def ranking_loss(
    image_coarse: torch.Tensor,
    image_fine: torch.Tensor,
    sentences: torch.Tensor,
    margin: float,
) -> torch.Tensor:
    return ranking_term(image_coarse, sentences, margin) + ranking_term(image_fine, sentences, margin)


@dataclass
class LossBundle:
    rec: torch.Tensor
    reg: torch.Tensor
    rel: torch.Tensor
    rank: torch.Tensor
    total: torch.Tensor
    weights: tuple[float, float, float]

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("rec", "reg", "rel", "rank", "total")}


def total_loss(
    rec: torch.Tensor,
    reg: torch.Tensor,
    rel: torch.Tensor,
    rank: torch.Tensor,
    weights: tuple[float, float, float] = (0.1, 1.0, 1.0),
) -> LossBundle:
    l1, l2, l3 = weights
    total = rec + l1 * reg + l2 * rel + l3 * rank
    return LossBundle(rec, reg, rel, rank, total, (l1, l2, l3))
