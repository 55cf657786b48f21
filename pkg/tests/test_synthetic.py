import numpy as np
import pytest

from relgrounding.corpus import dumps_instance
from relgrounding.geometry import Box, iou
from relgrounding.synthetic import GenerationError, SynthConfig, generate_synthetic, spatial_relation


def _serialized(corpus):
    return ["\n".join(dumps_instance(i) for i in split) for split in corpus.splits()]


def test_same_seed_same_bytes():
    cfg = SynthConfig(n_train=20, n_val=5, n_test=5, rho=0.5)
    assert _serialized(generate_synthetic(cfg, 7)) == _serialized(generate_synthetic(cfg, 7))
    assert _serialized(generate_synthetic(cfg, 7)) != _serialized(generate_synthetic(cfg, 8))


def _gt_index(inst, k):
    ious = [iou(Box(*b), inst.gt_boxes[k]) for b in inst.image.boxes]
    return int(np.argmax(ious)), max(ious)


def test_rho_zero_nearest_feature_is_gt():
    cfg = SynthConfig(n_train=200, n_val=0, n_test=0, rho=0.0)
    corpus = generate_synthetic(cfg, 3)
    protos = _prototypes(cfg, 3)
    for inst in corpus.train:
        feats = inst.image.features
        for k, phrase in enumerate(inst.caption.phrases):
            nearest = int(np.argmin(np.linalg.norm(feats - protos[phrase.concept], axis=1)))
            assert inst.image.boxes[nearest].tolist() == list(inst.gt_boxes[k])


def _prototypes(cfg, seed):
    from relgrounding.synthetic import concept_prototypes

    return concept_prototypes(cfg, seed)


def test_rho_one_has_close_distractor():
    cfg = SynthConfig(n_train=200, n_val=0, n_test=0, rho=1.0, phrases_per_caption=(2, 2))
    for inst in generate_synthetic(cfg, 11).train:
        feats = inst.image.features / np.linalg.norm(inst.image.features, axis=1, keepdims=True)
        k, _ = _gt_index(inst, 1)
        cos = feats @ feats[k]
        cos[k] = -1
        assert cos.max() > 0.9


def test_gt_boxes_are_proposals():
    corpus = generate_synthetic(SynthConfig(n_train=50, n_val=10, n_test=10, rho=0.5), 1)
    for inst in corpus.train + corpus.val + corpus.test:
        for k in range(len(inst.caption.phrases)):
            assert _gt_index(inst, k)[1] == 1.0


def test_relations_match_geometry():
    corpus = generate_synthetic(SynthConfig(n_train=100, n_val=0, n_test=0, rho=0.5), 2)
    names = corpus.relations.names()
    for inst in corpus.train:
        for rel in inst.caption.relations:
            expected = spatial_relation(inst.gt_boxes[rel.i], inst.gt_boxes[rel.j])
            assert names[rel.label - 1] == expected


def test_jitter_clusters_within_iou_range():
    cfg = SynthConfig(n_train=30, n_val=0, n_test=0, jitter_iou=(0.45, 0.65))
    for inst in generate_synthetic(cfg, 4).train:
        for gt in inst.gt_boxes:
            ious = [iou(Box(*b), gt) for b in inst.image.boxes]
            in_range = [v for v in ious if 0.45 - 2e-3 <= v <= 0.65 + 2e-3]
            assert len(in_range) >= cfg.cluster_size
            assert max(ious) < 0.99


def test_infeasible_geometry_raises():
    with pytest.raises(GenerationError):
        generate_synthetic(SynthConfig(n_train=2, n_val=0, n_test=0, object_size=(100, 120)), 0)
    with pytest.raises(GenerationError):
        generate_synthetic(SynthConfig(num_proposals=4, phrases_per_caption=(3, 3), rho=1.0), 0)
