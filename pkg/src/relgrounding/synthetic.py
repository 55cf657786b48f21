"""Synthetic grounding corpora with planted phrase/box correspondences.

Every phrase names a latent concept. The concept's prototype vector
generates the feature of the phrase's true proposal (plus noise), so the
pairing is recoverable from co-occurrence alone. Optional extras:

* relational distractors: a second proposal of the same concept, placed by
  reflecting the true box through the center of the previous phrase's box.
  The relation word preceding the phrase then only holds for the true box.
* jitter: the exact gt box is replaced by a cluster of proposals whose IoU
  with gt lies in ``jitter_iou``; features carry a linear code of each
  proposal's misalignment, and better aligned proposals carry a stronger
  concept signal.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from relgrounding import geometry
from relgrounding.corpus import (
    BOX_DECIMALS,
    FEATURE_DECIMALS,
    CaptionRecord,
    GroundingInstance,
    ImageRecord,
    PhraseSpan,
    Relation,
    RelationVocabulary,
    build_relation_vocabulary,
)
from relgrounding.geometry import Box

PAD, UNK, BOS = 0, 1, 2
DETERMINERS = ("a", "the")
CONJUNCTION = "and"
# relation of phrase i's box with respect to phrase i+1's box
SPATIAL_RELATIONS = ("left of", "right of", "above", "below")


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_train: int = 500
    n_val: int = 100
    n_test: int = 100
    num_proposals: int = 20
    phrases_per_caption: tuple[int, int] = (2, 3)
    feature_dim: int = 32
    num_concepts: int = 24
    image_size: tuple[float, float] = (128.0, 128.0)
    object_size: tuple[float, float] = (14.0, 28.0)
    background_size: tuple[float, float] = (8.0, 48.0)
    feature_noise: float = 0.25
    category_noise: float = 0.1
    # fraction of phrases preceded by a relation word that get a same-concept distractor
    rho: float = 0.0
    relation_min_freq: int = 1
    jitter_iou: tuple[float, float] | None = None
    cluster_size: int = 5
    jitter_sigma: float = 0.1
    misalignment_scale: float = 1.0
    # concept-signal gain of the best vs the worst aligned cluster member
    alignment_gain: float = 0.5
    max_placement_tries: int = 200


@dataclass(frozen=True)
class Lexicon:
    words: tuple[str, ...]
    concept_words: dict[int, int]
    relation_words: dict[str, tuple[int, ...]]
    determiners: tuple[int, ...]
    conjunction: int

    @property
    def size(self) -> int:
        return len(self.words)


def build_lexicon(config: SynthConfig) -> Lexicon:
    words = ["<pad>", "<unk>", "<bos>", *DETERMINERS, CONJUNCTION]
    index = {w: k for k, w in enumerate(words)}
    relation_words = {}
    for rel in SPATIAL_RELATIONS:
        ids = []
        for w in rel.split():
            if w not in index:
                index[w] = len(words)
                words.append(w)
            ids.append(index[w])
        relation_words[rel] = tuple(ids)
    concept_words = {}
    for c in range(1, config.num_concepts + 1):
        concept_words[c] = len(words)
        words.append(f"concept{c}")
    return Lexicon(
        words=tuple(words),
        concept_words=concept_words,
        relation_words=relation_words,
        determiners=tuple(index[w] for w in DETERMINERS),
        conjunction=index[CONJUNCTION],
    )


def concept_prototypes(config: SynthConfig, seed: int) -> np.ndarray:
    """Row ``c`` is the prototype of concept ``c`` (row 0 unused)."""
    rng = np.random.default_rng([seed, 0])
    protos = rng.standard_normal((config.num_concepts + 1, config.feature_dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    protos *= np.sqrt(config.feature_dim)
    protos[0] = 0.0
    return protos


def _misalignment_basis(config: SynthConfig, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 1])
    basis = rng.standard_normal((4, config.feature_dim))
    return basis / np.linalg.norm(basis, axis=1, keepdims=True) * np.sqrt(config.feature_dim)


def spatial_relation(a: Box, b: Box) -> str:
    """Dominant-axis relation of ``a`` with respect to ``b``."""
    (ax, ay), (bx, by) = a.center, b.center
    dx, dy = ax - bx, ay - by
    if abs(dx) >= abs(dy):
        return "left of" if dx < 0 else "right of"
    return "above" if dy < 0 else "below"


class _Generator:
    def __init__(self, config: SynthConfig, seed: int):
        self.cfg = config
        self.lex = build_lexicon(config)
        self.protos = concept_prototypes(config, seed)
        self.basis = _misalignment_basis(config, seed)
        W, H = config.image_size
        self.bounds = Box(0.0, 0.0, float(W), float(H))
        per_object = config.cluster_size if config.jitter_iou else 1
        n_max = config.phrases_per_caption[1]
        max_planted = (n_max + (n_max - 1 if config.rho > 0 else 0)) * per_object
        if max_planted > config.num_proposals:
            raise GenerationError(
                f"{max_planted} planted proposals do not fit in {config.num_proposals} proposals"
            )

    # -- geometry --------------------------------------------------------

    def _random_box(self, rng: np.random.Generator, size: tuple[float, float]) -> Box:
        W, H = self.bounds.x2, self.bounds.y2
        w, h = rng.uniform(*size, size=2)
        x1, y1 = rng.uniform(0, W - w), rng.uniform(0, H - h)
        return _round_box(Box(x1, y1, x1 + w, y1 + h))

    def _fits(self, box: Box, placed: list[Box]) -> bool:
        b = self.bounds
        if box.x1 < b.x1 or box.y1 < b.y1 or box.x2 > b.x2 or box.y2 > b.y2:
            return False
        return all(geometry.iou(box, other) == 0.0 for other in placed)

    def _layout(self, rng: np.random.Generator, n: int, distract: list[bool]):
        """True boxes per phrase plus reflected distractors (or None)."""
        cfg = self.cfg
        for _ in range(cfg.max_placement_tries):
            placed: list[Box] = []
            true_boxes: list[Box] = []
            distractors: list[Box | None] = []
            ok = True
            for j in range(n):
                for _ in range(cfg.max_placement_tries):
                    box = self._random_box(rng, cfg.object_size)
                    if not self._fits(box, placed):
                        continue
                    dbox = None
                    if distract[j]:
                        (pcx, pcy), (cx, cy) = true_boxes[j - 1].center, box.center
                        dx, dy = 2 * pcx - cx - box.width / 2, 2 * pcy - cy - box.height / 2
                        dbox = _round_box(Box(dx, dy, dx + box.width, dy + box.height))
                        if not self._fits(dbox, placed + [box]):
                            continue
                        if spatial_relation(true_boxes[j - 1], dbox) == spatial_relation(
                            true_boxes[j - 1], box
                        ):
                            continue
                    break
                else:
                    ok = False
                    break
                placed.append(box)
                true_boxes.append(box)
                distractors.append(dbox)
                if dbox is not None:
                    placed.append(dbox)
            if ok:
                return true_boxes, distractors
        raise GenerationError("infeasible geometry: cannot place planted boxes in the image")

    def _jitter(self, rng: np.random.Generator, gt: Box) -> Box:
        lo, hi = self.cfg.jitter_iou
        sigma = self.cfg.jitter_sigma
        for _ in range(100 * self.cfg.max_placement_tries):
            t = rng.normal(0.0, sigma, size=4)
            cand = geometry.apply_offset(gt, geometry.Offset(*t), self.bounds)
            cand = _round_box(cand)
            if cand.area > 0 and lo <= geometry.iou(cand, gt) <= hi:
                return cand
        raise GenerationError(f"cannot jitter {gt} into IoU range {self.cfg.jitter_iou}")

    # -- features --------------------------------------------------------

    def _feature(self, rng: np.random.Generator, concept: int, gain: float = 1.0, code=None) -> np.ndarray:
        cfg = self.cfg
        f = gain * self.protos[concept] + cfg.feature_noise * rng.standard_normal(cfg.feature_dim)
        if code is not None:
            f = f + cfg.misalignment_scale * np.asarray(code) @ self.basis
        return f

    def _category(self, rng: np.random.Generator, concept: int) -> int:
        if rng.random() < self.cfg.category_noise:
            return int(rng.integers(1, self.cfg.num_concepts + 1))
        return concept

    def _object_proposals(self, rng, gt: Box, concept: int):
        """(box, category, feature) rows covering one planted object."""
        cfg = self.cfg
        if cfg.jitter_iou is None:
            return [(gt, self._category(rng, concept), self._feature(rng, concept))]
        lo, hi = cfg.jitter_iou
        rows = []
        for _ in range(cfg.cluster_size):
            box = self._jitter(rng, gt)
            quality = (geometry.iou(box, gt) - lo) / max(hi - lo, 1e-9)
            gain = 1.0 - cfg.alignment_gain * (1.0 - quality)
            code = geometry.encode_offset(box, gt)
            rows.append((box, self._category(rng, concept), self._feature(rng, concept, gain, code)))
        return rows

    # -- instances -------------------------------------------------------

    def instance(self, rng: np.random.Generator, image_id: str) -> tuple[GroundingInstance, list[str]]:
        cfg, lex = self.cfg, self.lex
        n = int(rng.integers(cfg.phrases_per_caption[0], cfg.phrases_per_caption[1] + 1))
        concepts = rng.choice(np.arange(1, cfg.num_concepts + 1), size=n, replace=False)
        distract = [j > 0 and rng.random() < cfg.rho for j in range(n)]
        true_boxes, distractors = self._layout(rng, n, distract)

        rows = []
        for j in range(n):
            rows.extend(self._object_proposals(rng, true_boxes[j], int(concepts[j])))
            if distractors[j] is not None:
                rows.extend(self._object_proposals(rng, distractors[j], int(concepts[j])))
        others = np.setdiff1d(np.arange(1, cfg.num_concepts + 1), concepts)
        while len(rows) < cfg.num_proposals:
            concept = int(rng.choice(others))
            box = self._random_box(rng, cfg.background_size)
            rows.append((box, self._category(rng, concept), self._feature(rng, concept)))
        order = rng.permutation(len(rows))
        rows = [rows[k] for k in order]

        tokens: list[int] = []
        phrases: list[PhraseSpan] = []
        relation_names: list[str] = []
        for j in range(n):
            if j > 0:
                rel = spatial_relation(true_boxes[j - 1], true_boxes[j])
                relation_names.append(rel)
                tokens.extend(lex.relation_words[rel])
            start = len(tokens)
            tokens.append(int(rng.choice(lex.determiners)))
            tokens.append(lex.concept_words[int(concepts[j])])
            phrases.append(PhraseSpan(start, len(tokens), int(concepts[j])))

        boxes = np.array([list(r[0]) for r in rows], dtype=np.float64)
        cats = np.array([r[1] for r in rows], dtype=np.int64)
        feats = np.round(np.stack([r[2] for r in rows]), FEATURE_DECIMALS)
        image = ImageRecord(image_id, self.bounds.x2, self.bounds.y2, boxes, cats, feats)
        caption = CaptionRecord(tuple(tokens), tuple(phrases), ())
        return GroundingInstance(image, caption, tuple(true_boxes)), relation_names


def _round_box(box: Box) -> Box:
    return Box(*(round(float(v), BOX_DECIMALS) for v in box))


def _with_relations(inst: GroundingInstance, names: list[str], vocab: RelationVocabulary) -> GroundingInstance:
    rels = tuple(Relation(j, j + 1, vocab.label(name)) for j, name in enumerate(names))
    caption = CaptionRecord(inst.caption.tokens, inst.caption.phrases, rels)
    return GroundingInstance(inst.image, caption, inst.gt_boxes)


@dataclass
class SyntheticCorpus:
    train: list[GroundingInstance]
    val: list[GroundingInstance]
    test: list[GroundingInstance]
    relations: RelationVocabulary
    lexicon: Lexicon

    def splits(self) -> tuple[list[GroundingInstance], list[GroundingInstance], list[GroundingInstance]]:
        return self.train, self.val, self.test


def generate_synthetic(config: SynthConfig, seed: int) -> SyntheticCorpus:
    """Deterministic train/val/test corpora for ``seed``.

    The relation vocabulary is built from the training split's relation
    strings; relations outside it keep their edge with label 0.
    """
    gen = _Generator(config, seed)
    raw = {}
    for split_idx, (name, count) in enumerate(
        (("train", config.n_train), ("val", config.n_val), ("test", config.n_test))
    ):
        rng = np.random.default_rng([seed, 2, split_idx])
        raw[name] = [gen.instance(rng, f"{name}-{k:05d}") for k in range(count)]
    vocab = build_relation_vocabulary(
        (rel for _, names in raw["train"] for rel in names), config.relation_min_freq
    )
    splits = {name: [_with_relations(inst, names, vocab) for inst, names in items] for name, items in raw.items()}
    return SyntheticCorpus(splits["train"], splits["val"], splits["test"], vocab, gen.lex)
