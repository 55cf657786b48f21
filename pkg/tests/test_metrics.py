from dataclasses import replace

import pytest
import torch

from relgrounding.geometry import Box
from relgrounding.metrics import EvaluationError, evaluate, load_predictions, relation_accuracy, save_predictions
from relgrounding.model import Prediction
from relgrounding.trainer import RunConfig, build_model, model_config
from relgrounding.corpus import corpus_stats


def _oracle(corpus):
    return [Prediction(inst.image.image_id, i, gt, 1.0) for inst in corpus for i, gt in enumerate(inst.gt_boxes)]


def test_oracle_predictions(tiny_corpus):
    report = evaluate(_oracle(tiny_corpus.val), tiny_corpus.val)
    assert report.acc_at[0.5] == 1.0 and report.pointit == 1.0 and report.mean_iou == pytest.approx(1.0)
    assert report.count == sum(len(i.caption.phrases) for i in tiny_corpus.val)


def _two_phrase_instance(tiny_corpus):
    inst = next(i for i in tiny_corpus.val if len(i.caption.phrases) == 2)
    return replace(inst, gt_boxes=(Box(0, 0, 10, 10), Box(20, 20, 30, 30)))


def test_two_phrase_example(tiny_corpus):
    inst = _two_phrase_instance(tiny_corpus)
    preds = [Prediction(inst.image.image_id, 0, Box(0, 0, 10, 6), 0.0),
             Prediction(inst.image.image_id, 1, Box(20, 20, 30, 24), 0.0)]
    report = evaluate(preds, [inst])
    assert report.acc_at[0.5] == 0.5
    assert report.mean_iou == pytest.approx(0.5)
    # both predicted centers still fall inside their gt boxes
    assert report.pointit == 1.0
    values = [report.acc_at[t] for t in sorted(report.acc_at)]
    assert values == sorted(values, reverse=True)


def test_missing_and_duplicate_predictions(tiny_corpus):
    inst = _two_phrase_instance(tiny_corpus)
    one = Prediction(inst.image.image_id, 0, Box(0, 0, 10, 10), 0.0)
    with pytest.raises(EvaluationError, match="missing"):
        evaluate([one], [inst])
    with pytest.raises(EvaluationError, match="duplicate"):
        evaluate([one, one, replace(one, phrase=1)], [inst])
    with pytest.raises(EvaluationError, match="no gt"):
        evaluate([one], [inst.without_gt()])


def test_predictions_file_round_trip(tiny_corpus, tmp_path):
    preds = _oracle(tiny_corpus.val)
    save_predictions(preds, tmp_path / "p.jsonl")
    again = load_predictions(tmp_path / "p.jsonl")
    assert [(p.image_id, p.phrase, tuple(p.box)) for p in again] == [(p.image_id, p.phrase, tuple(p.box)) for p in preds]
    (tmp_path / "bad.jsonl").write_text('{"image_id": "x"}\n')
    with pytest.raises(EvaluationError, match="line 1"):
        load_predictions(tmp_path / "bad.jsonl")


def test_relation_accuracy_full_list_is_perfect(tiny_corpus):
    cfg = RunConfig(M=10, K=3, d=8, word_dim=8, hidden=8, semantic_dim=4)
    mcfg = model_config(cfg, corpus_stats(tiny_corpus.train))
    model = build_model(cfg, mcfg)
    acc = relation_accuracy(model, tiny_corpus.val, [1, mcfg.num_relations])
    assert acc[mcfg.num_relations] == 1.0
    assert 0.0 <= acc[1] <= 1.0


def test_relation_accuracy_perfect_classifier(tiny_corpus):
    cfg = RunConfig(M=10, K=3, d=8, word_dim=8, hidden=8, semantic_dim=4)
    model = build_model(cfg, model_config(cfg, corpus_stats(tiny_corpus.train)))
    labels = {l for inst in tiny_corpus.val for l in (r.label for r in inst.caption.relations)}
    if len(labels) != 1:
        # make the corpus single-labeled so a constant classifier is perfect
        data = [replace(i, caption=replace(i.caption, relations=tuple(replace(r, label=1) for r in i.caption.relations)))
                for i in tiny_corpus.val]
    else:
        data = tiny_corpus.val
    with torch.no_grad():
        last = model.relation.net[2]
        last.weight.zero_()
        last.bias.zero_()
        last.bias[0] = 5.0
    assert relation_accuracy(model, data, [1])[1] == 1.0


def test_relation_accuracy_without_pairs(tiny_corpus, caplog):
    cfg = RunConfig(M=10, K=3, d=8, word_dim=8, hidden=8, semantic_dim=4)
    model = build_model(cfg, model_config(cfg, corpus_stats(tiny_corpus.train)))
    data = [replace(i, caption=replace(i.caption, relations=())) for i in tiny_corpus.val]
    assert relation_accuracy(model, data, [1]) == {}
    assert "no labeled relation pairs" in caplog.text
