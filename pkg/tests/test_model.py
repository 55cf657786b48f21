import torch

from relgrounding.batch import collate
from relgrounding.corpus import corpus_stats
from relgrounding.geometry import apply_offset_t
from relgrounding.model import infer
from relgrounding.trainer import RunConfig, build_model, model_config


def _model(corpus, **changes):
    cfg = RunConfig(M=10, K=3, d=8, word_dim=8, hidden=8, semantic_dim=4, dtype="float64").replace(**changes)
    return build_model(cfg, model_config(cfg, corpus_stats(corpus.train)))


def test_single_survivor_is_refined_twice(tiny_corpus):
    model = _model(tiny_corpus, K=1)
    data = [i.without_gt() for i in tiny_corpus.val]
    batch = collate(data, torch.float64)
    with torch.no_grad():
        out = model(batch)
    preds = infer(data, model)
    k = 0
    for b, inst in enumerate(data):
        for i in range(len(inst.caption.phrases)):
            m = int(torch.argmax(out.coarse.fused[b, i]))
            bounds = batch.bounds[b]
            once = apply_offset_t(batch.boxes[b, m], out.coarse_offsets[b, i, m], bounds)
            twice = apply_offset_t(once, out.fine.offsets[b, i, 0], bounds)
            assert torch.allclose(torch.tensor(preds[k].box, dtype=torch.float64), twice, atol=1e-9)
            k += 1


def test_infer_independent_of_batching(tiny_corpus):
    model = _model(tiny_corpus)
    whole = infer(list(tiny_corpus.val), model)
    single = infer(list(tiny_corpus.val), model, batch_size=1)
    for a, b in zip(whole, single):
        assert (a.image_id, a.phrase) == (b.image_id, b.phrase)
        assert torch.allclose(torch.tensor(a.box), torch.tensor(b.box), atol=1e-9)


def test_infer_ignores_gt(tiny_corpus):
    model = _model(tiny_corpus)
    a = infer(list(tiny_corpus.val), model)
    b = infer([i.without_gt() for i in tiny_corpus.val], model)
    assert [p.box for p in a] == [p.box for p in b]


def test_replaying_a_plan_reproduces_the_pass(tiny_corpus):
    model = _model(tiny_corpus)
    batch = collate(list(tiny_corpus.train[:4]), torch.float64)
    first = model(batch)
    second = model(batch, first.plan)
    assert torch.equal(first.fused, second.fused)
    assert torch.equal(first.z_fine, second.z_fine)


def test_without_topk_all_proposals_survive(tiny_corpus):
    model = _model(tiny_corpus, use_topk=False)
    out = model(collate(list(tiny_corpus.train[:2]), torch.float64))
    assert out.refined.indices.shape[-1] == 10
    assert torch.equal(out.refined.indices.sort(-1).values[0, 0], torch.arange(10))


def test_disabled_losses_are_zero(tiny_corpus):
    model = _model(tiny_corpus, use_graph_and_relation=False, use_regression=False, use_rank=False)
    batch = collate(list(tiny_corpus.train[:4]), torch.float64)
    bundle = model.losses(batch, model(batch), (0.1, 1.0, 1.0))
    assert bundle.reg.item() == bundle.rel.item() == bundle.rank.item() == 0.0
    assert bundle.total.item() == bundle.rec.item()


def test_losses_are_finite_and_nonnegative(tiny_corpus):
    for seed in range(5):
        model = _model(tiny_corpus, seed=seed)
        batch = collate(list(tiny_corpus.train[4 * seed : 4 * seed + 4]), torch.float64)
        values = model.losses(batch, model(batch), (0.1, 1.0, 1.0)).as_floats()
        assert all(v >= 0 and v == v and abs(v) != float("inf") for v in values.values()), values


def test_regression_loss_reaches_offset_heads_only_through_predictions(tiny_corpus):
    model = _model(tiny_corpus)
    batch = collate(list(tiny_corpus.train[:4]), torch.float64)
    model.losses(batch, model(batch), (1.0, 0.0, 0.0)).reg.backward()
    assert model.fine_head.reg[0].weight.grad.abs().sum() > 0
    assert model.coarse_head.reg[0].weight.grad.abs().sum() > 0
    assert all(p.grad is None or p.grad.abs().sum() == 0 for p in model.decoder.parameters())
