import json

import numpy as np
import pytest

from relgrounding.corpus import (
    CorpusError,
    RelationVocabulary,
    build_relation_vocabulary,
    dumps_instance,
    load_corpus,
    save_corpus,
)


def _record(image_id="img", dim=4, span=(0, 2), relations=(), gt=True):
    rng = np.random.default_rng(0)
    proposals = [[0, 0, 10, 10, 1, *rng.normal(size=dim).round(3)], [5, 5, 20, 20, 2, *rng.normal(size=dim).round(3)]]
    rec = {
        "image": {"id": image_id, "width": 32, "height": 32, "proposals": proposals},
        "caption": {"tokens": [3, 7, 4, 8], "phrases": [[*span, 1], [2, 4, 2]], "relations": list(relations)},
    }
    if gt:
        rec["gt"] = [[0, 0, 10, 10], [5, 5, 20, 20]]
    return json.dumps(rec)


def _write(tmp_path, *lines):
    path = tmp_path / "corpus.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


def test_two_lines_two_instances(tmp_path):
    insts = load_corpus(_write(tmp_path, _record("a"), _record("b")))
    assert [i.image.image_id for i in insts] == ["a", "b"]
    assert insts[0].image.num_proposals == 2 and insts[0].image.feature_dim == 4


def test_inverted_span_reports_line(tmp_path):
    with pytest.raises(CorpusError, match="span end before start, line 1"):
        load_corpus(_write(tmp_path, _record(span=(5, 3))))


def test_mixed_feature_dims_name_image(tmp_path):
    with pytest.raises(CorpusError, match="wide-one"):
        load_corpus(_write(tmp_path, _record("narrow", dim=16), _record("wide-one", dim=32)))


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda r: r["caption"].update(phrases=[[0, 0, 1]]), "empty span"),
        (lambda r: r["caption"].update(phrases=[[0, 9, 1]]), "outside"),
        (lambda r: r["caption"].update(relations=[[0, 0, 1]]), "invalid phrase indices"),
        (lambda r: r["caption"].update(relations=[[0, 5, 1]]), "invalid phrase indices"),
        (lambda r: r["image"]["proposals"][0].__setitem__(2, 99), "outside image bounds"),
        (lambda r: r.pop("caption"), "missing or malformed"),
    ],
)
def test_invariant_violations(tmp_path, mutate, message):
    rec = json.loads(_record())
    mutate(rec)
    with pytest.raises(CorpusError, match=message):
        load_corpus(_write(tmp_path, _record("ok"), json.dumps(rec)))
    with pytest.raises(CorpusError, match="line 2"):
        load_corpus(_write(tmp_path, _record("ok"), json.dumps(rec)))


def test_relation_label_range(tmp_path):
    path = _write(tmp_path, _record(relations=[[0, 1, 3]]))
    assert load_corpus(path, num_relations=3)[0].caption.relations[0].label == 3
    with pytest.raises(CorpusError, match="label out of range"):
        load_corpus(path, num_relations=2)


def test_proposal_count_check(tmp_path):
    with pytest.raises(CorpusError, match="expected 5"):
        load_corpus(_write(tmp_path, _record()), num_proposals=5)


def test_reserialization_is_byte_identical(tmp_path, tiny_corpus):
    first = tmp_path / "a.jsonl"
    second = tmp_path / "b.jsonl"
    save_corpus(tiny_corpus.train, first)
    save_corpus(load_corpus(first), second)
    assert first.read_bytes() == second.read_bytes()


def test_gt_is_optional_and_strippable(tiny_corpus):
    inst = tiny_corpus.train[0]
    stripped = inst.without_gt()
    assert stripped.gt_boxes is None
    assert '"gt"' not in dumps_instance(stripped)
    assert '"gt"' in dumps_instance(inst)


def test_vocabulary_examples():
    vocab = build_relation_vocabulary(["on"] * 5 + ["holding"] * 3 + ["near"], min_freq=2)
    assert vocab.ids == {"on": 1, "holding": 2} and vocab.size == 2
    assert vocab.label("near") == 0
    assert build_relation_vocabulary(["a", "b", "c"], min_freq=1).size == 0
    assert build_relation_vocabulary([], min_freq=1).size == 0


def test_vocabulary_tie_break_and_file(tmp_path):
    vocab = build_relation_vocabulary(["b"] * 3 + ["a"] * 3 + ["c"] * 4, min_freq=1)
    assert vocab.names() == ["c", "a", "b"]
    vocab.save(tmp_path / "v.tsv")
    lines = (tmp_path / "v.tsv").read_text().splitlines()
    assert "c\t1\t4" in lines and "a\t2\t3" in lines
    again = RelationVocabulary.load(tmp_path / "v.tsv")
    assert again.ids == vocab.ids and again.frequencies == vocab.frequencies and again.min_freq == 1


def test_vocabulary_rejects_bad_min_freq():
    with pytest.raises(ValueError):
        build_relation_vocabulary(["a"], min_freq=0)
