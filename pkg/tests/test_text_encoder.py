import math

import pytest
import torch

from relgrounding.corpus import PhraseSpan
from relgrounding.text_encoder import (
    SemanticEmbedding,
    TextEncoder,
    encode_sentence,
    pool_phrase,
    semantic_similarity,
    span_pooling_matrix,
)


@pytest.fixture
def encoder():
    torch.manual_seed(0)
    return TextEncoder(vocab_size=12, word_dim=5, hidden_dim=4).double()


def test_single_token_gives_one_row(encoder):
    assert encode_sentence(encoder, [3]).shape == (1, 4)


def test_empty_sentence_rejected(encoder):
    with pytest.raises(ValueError):
        encode_sentence(encoder, [])


def test_zero_parameters_give_zero_states(encoder):
    with torch.no_grad():
        for p in encoder.parameters():
            p.zero_()
    H = encode_sentence(encoder, [3, 5, 7, 2])
    assert torch.equal(H, torch.zeros_like(H))


def _sig(x):
    return 1 / (1 + math.exp(-x))


def test_matches_hand_written_recurrence():
    torch.manual_seed(1)
    enc = TextEncoder(vocab_size=6, word_dim=1, hidden_dim=1).double()
    tokens = [2, 4, 1]
    H = encode_sentence(enc, tokens).detach()
    W_ih, W_hh = enc.rnn.weight_ih_l0.detach(), enc.rnn.weight_hh_l0.detach()
    b = (enc.rnn.bias_ih_l0 + enc.rnn.bias_hh_l0).detach()
    h = c = 0.0
    for t, tok in enumerate(tokens):
        x = enc.embed.weight[tok, 0].item()
        pre = [W_ih[g, 0].item() * x + W_hh[g, 0].item() * h + b[g].item() for g in range(4)]
        i, f, g, o = _sig(pre[0]), _sig(pre[1]), math.tanh(pre[2]), _sig(pre[3])
        c = f * c + i * g
        h = o * math.tanh(c)
        assert H[t, 0].item() == pytest.approx(h, abs=1e-12)


def test_states_depend_only_on_prefix(encoder):
    full = encode_sentence(encoder, [4, 6, 8, 3, 9])
    prefix = encode_sentence(encoder, [4, 6, 8])
    assert torch.allclose(full[:3], prefix, atol=1e-12)


def test_unknown_ids_read_as_unk(encoder):
    assert torch.equal(encode_sentence(encoder, [4, 99, 3]), encode_sentence(encoder, [4, 1, 3]))


def test_pool_single_token_and_mean():
    H = torch.tensor([[1.0, 1.0, 1.0], [3.0, 3.0, 3.0], [7.0, 0.0, 2.0]])
    assert torch.equal(pool_phrase(H, PhraseSpan(2, 3, 0)), H[2])
    assert torch.equal(pool_phrase(H, PhraseSpan(0, 2, 0)), torch.tensor([2.0, 2.0, 2.0]))


def test_pooling_matrix_agrees_with_pool_phrase():
    torch.manual_seed(2)
    H = torch.randn(2, 6, 3, dtype=torch.float64)
    spans = [[PhraseSpan(0, 2, 0), PhraseSpan(3, 6, 0)], [PhraseSpan(1, 2, 0)]]
    pooled = span_pooling_matrix(spans, 2, 6) @ H
    for b, row in enumerate(spans):
        for i, s in enumerate(row):
            assert torch.allclose(pooled[b, i], pool_phrase(H[b], s))
    assert torch.equal(pooled[1, 1], torch.zeros(3, dtype=torch.float64))


def test_semantic_similarity_examples():
    emb = SemanticEmbedding(4, 2).double()
    with torch.no_grad():
        emb.table.weight.copy_(torch.tensor([[1.0, 0.0], [0.0, 3.0], [-2.0, 0.0], [1.0, 1.0]]))
    assert semantic_similarity(emb, 0, 0).item() == pytest.approx(1.0)
    assert semantic_similarity(emb, 0, 1).item() == pytest.approx(0.5)
    assert semantic_similarity(emb, 0, 2).item() == pytest.approx(0.0)
    assert semantic_similarity(emb, 0, 3).item() == pytest.approx((math.sqrt(0.5) + 1) / 2)


def test_semantic_similarity_broadcasts_into_unit_interval():
    torch.manual_seed(3)
    emb = SemanticEmbedding(10, 6)
    s = emb(torch.arange(10)[:, None], torch.arange(10)[None, :])
    assert s.shape == (10, 10)
    assert (s >= 0).all() and (s <= 1 + 1e-6).all()
    assert torch.allclose(s, s.T)
