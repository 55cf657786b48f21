"""Sentence encoding, phrase pooling and category-side semantic similarity."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from relgrounding.corpus import PhraseSpan

UNK = 1


class TextEncoder(nn.Module):
    """Word embedding followed by a unidirectional LSTM.

    Ids at or beyond ``vocab_size`` are read as UNK.
    """

    def __init__(self, vocab_size: int, word_dim: int, hidden_dim: int):
        super().__init__()
        self.vocab_size = vocab_size
        self.embed = nn.Embedding(vocab_size, word_dim)
        self.rnn = nn.LSTM(word_dim, hidden_dim, batch_first=True)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """(B, T) or (T,) ids -> (B, T, d) or (T, d) hidden states."""
        squeeze = tokens.dim() == 1
        if squeeze:
            tokens = tokens[None]
        tokens = torch.where(tokens >= self.vocab_size, torch.full_like(tokens, UNK), tokens)
        H, _ = self.rnn(self.embed(tokens))
        return H[0] if squeeze else H


def encode_sentence(encoder: TextEncoder, tokens) -> torch.Tensor:
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    if tokens.dim() != 1 or len(tokens) == 0:
        raise ValueError("expected a non-empty 1-D token sequence")
    return encoder(tokens)


def pool_phrase(H: torch.Tensor, span: PhraseSpan) -> torch.Tensor:
    return H[span.start : span.end].mean(dim=0)


def span_pooling_matrix(spans: list[list[PhraseSpan]], num_phrases: int, length: int) -> torch.Tensor:
    """(B, N, T) weights with 1/|q| over each span, so ``P @ H`` pools every phrase."""
    P = torch.zeros(len(spans), num_phrases, length, dtype=torch.float64)
    for b, row in enumerate(spans):
        for i, span in enumerate(row):
            P[b, i, span.start : span.end] = 1.0 / len(span)
    return P


class SemanticEmbedding(nn.Module):
    """Shared concept/category table standing in for an external text embedding."""

    def __init__(self, num_ids: int, dim: int):
        super().__init__()
        self.table = nn.Embedding(num_ids, dim)

    def forward(self, concepts: torch.Tensor, categories: torch.Tensor) -> torch.Tensor:
        """Broadcast similarity in [0, 1]; see :func:`semantic_similarity`."""
        a = F.normalize(self.table(concepts), dim=-1, eps=1e-12)
        b = F.normalize(self.table(categories), dim=-1, eps=1e-12)
        return 0.5 * ((a * b).sum(-1) + 1.0)


def semantic_similarity(embedding: SemanticEmbedding, phrase_concept, category) -> torch.Tensor:
    """Cosine of the two table rows mapped affinely from [-1, 1] onto [0, 1].

    A signed score would let two negatives multiply into a confident match.
    """
    return embedding(torch.as_tensor(phrase_concept), torch.as_tensor(category))
