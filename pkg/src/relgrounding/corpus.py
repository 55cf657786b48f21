"""Grounding records and their line-delimited JSON serialization.

One instance per line::

    {"image": {"id": str, "width": float, "height": float,
               "proposals": [[x1, y1, x2, y2, category, f_1, ..., f_d], ...]},
     "caption": {"tokens": [int, ...],
                 "phrases": [[start, end, concept], ...],
                 "relations": [[i, j, label], ...]},
     "gt": [[x1, y1, x2, y2], ...]}

Phrase spans are half-open token ranges. Relation label 0 marks a parsed
relation outside the vocabulary: it still links the two phrases but carries
no classification target. ``gt`` is optional and only ever read by the
evaluator. Floats are written with fixed decimals (boxes 3, features 6) so
load -> save is byte-identical.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from relgrounding.geometry import Box

BOX_DECIMALS = 3
FEATURE_DECIMALS = 6


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class PhraseSpan:
    start: int
    end: int
    concept: int

    def __len__(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class Relation:
    i: int
    j: int
    label: int


@dataclass(frozen=True, eq=False)
class ImageRecord:
    image_id: str
    width: float
    height: float
    boxes: np.ndarray  # (M, 4)
    categories: np.ndarray  # (M,)
    features: np.ndarray  # (M, d)

    @property
    def num_proposals(self) -> int:
        return len(self.boxes)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def bounds(self) -> Box:
        return Box(0.0, 0.0, float(self.width), float(self.height))

    def proposal_box(self, m: int) -> Box:
        return Box(*map(float, self.boxes[m]))


@dataclass(frozen=True)
class CaptionRecord:
    tokens: tuple[int, ...]
    phrases: tuple[PhraseSpan, ...]
    relations: tuple[Relation, ...] = ()


@dataclass(frozen=True, eq=False)
class GroundingInstance:
    image: ImageRecord
    caption: CaptionRecord
    # evaluation only; never read on the training path
    gt_boxes: tuple[Box, ...] | None = field(default=None, repr=False)

    def without_gt(self) -> GroundingInstance:
        return replace(self, gt_boxes=None)


@dataclass
class RelationVocabulary:
    ids: dict[str, int]
    frequencies: dict[str, int]
    min_freq: int

    @property
    def size(self) -> int:
        return len(self.ids)

    def label(self, relation: str) -> int:
        """Id of ``relation``, or 0 ("no relation") if it was filtered out."""
        return self.ids.get(relation, 0)

    def names(self) -> list[str]:
        return sorted(self.ids, key=self.ids.__getitem__)

    def save(self, path: str | Path) -> None:
        lines = [f"{name}\t{self.ids[name]}\t{self.frequencies[name]}\n" for name in self.names()]
        Path(path).write_text(f"#min_freq\t{self.min_freq}\n" + "".join(lines))

    @classmethod
    def load(cls, path: str | Path) -> RelationVocabulary:
        ids, freqs, min_freq = {}, {}, 1
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line:
                continue
            parts = line.split("\t")
            if parts[0] == "#min_freq":
                min_freq = int(parts[1])
                continue
            if len(parts) != 3:
                raise CorpusError(f"vocabulary line {lineno}: expected 3 tab-separated fields")
            ids[parts[0]] = int(parts[1])
            freqs[parts[0]] = int(parts[2])
        if sorted(ids.values()) != list(range(1, len(ids) + 1)):
            raise CorpusError(f"{path}: relation ids must be contiguous 1..C_r")
        return cls(ids, freqs, min_freq)


def build_relation_vocabulary(relation_strings: Iterable[str], min_freq: int) -> RelationVocabulary:
    """Keep relations occurring strictly more than ``min_freq`` times.

    Ids follow descending frequency, ties broken lexicographically; 0 stays
    reserved for "no relation".
    """
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts = Counter(relation_strings)
    kept = sorted((s for s, n in counts.items() if n > min_freq), key=lambda s: (-counts[s], s))
    return RelationVocabulary(
        ids={s: k + 1 for k, s in enumerate(kept)},
        frequencies={s: counts[s] for s in kept},
        min_freq=min_freq,
    )


# -- serialization ----------------------------------------------------------


def _fmt(value: float, decimals: int) -> str:
    return f"{value:.{decimals}f}"


def _box_json(box: Sequence[float]) -> str:
    return "[" + ",".join(_fmt(float(v), BOX_DECIMALS) for v in box) + "]"


def dumps_instance(inst: GroundingInstance) -> str:
    img, cap = inst.image, inst.caption
    proposals = []
    for box, cat, feat in zip(img.boxes, img.categories, img.features):
        cells = [_fmt(float(v), BOX_DECIMALS) for v in box]
        cells.append(str(int(cat)))
        cells.extend(_fmt(float(v), FEATURE_DECIMALS) for v in feat)
        proposals.append("[" + ",".join(cells) + "]")
    parts = [
        '{"image":{"id":' + json.dumps(img.image_id),
        ',"width":' + _fmt(img.width, BOX_DECIMALS),
        ',"height":' + _fmt(img.height, BOX_DECIMALS),
        ',"proposals":[' + ",".join(proposals) + "]}",
        ',"caption":{"tokens":' + json.dumps(list(cap.tokens), separators=(",", ":")),
        ',"phrases":' + json.dumps([[p.start, p.end, p.concept] for p in cap.phrases], separators=(",", ":")),
        ',"relations":' + json.dumps([[r.i, r.j, r.label] for r in cap.relations], separators=(",", ":")),
        "}",
    ]
    if inst.gt_boxes is not None:
        parts.append(',"gt":[' + ",".join(_box_json(b) for b in inst.gt_boxes) + "]")
    parts.append("}")
    return "".join(parts)


def save_corpus(instances: Iterable[GroundingInstance], path: str | Path) -> None:
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(dumps_instance(inst) + "\n")


def _fail(lineno: int, msg: str) -> CorpusError:
    return CorpusError(f"{msg}, line {lineno}")


def _parse_instance(obj: dict, lineno: int, num_relations: int | None) -> GroundingInstance:
    try:
        image, caption = obj["image"], obj["caption"]
        image_id = str(image["id"])
        width, height = float(image["width"]), float(image["height"])
        rows = image["proposals"]
        tokens = tuple(int(t) for t in caption["tokens"])
        raw_phrases = caption["phrases"]
        raw_relations = caption.get("relations", [])
    except (KeyError, TypeError, ValueError) as exc:
        raise _fail(lineno, f"missing or malformed field {exc}") from None

    if not rows:
        raise _fail(lineno, f"image {image_id}: no proposals")
    dims = {len(r) - 5 for r in rows}
    if len(dims) != 1:
        raise _fail(lineno, f"image {image_id}: mixed feature dimensions {sorted(dims)}")
    (dim,) = dims
    if dim < 1:
        raise _fail(lineno, f"image {image_id}: proposals need a feature vector")
    arr = np.asarray(rows, dtype=np.float64)
    boxes, cats, feats = arr[:, :4], arr[:, 4], arr[:, 5:]
    if np.any(cats != np.round(cats)) or np.any(cats < 1):
        raise _fail(lineno, f"image {image_id}: category ids must be integers >= 1")
    if (
        np.any(boxes[:, 0] > boxes[:, 2])
        or np.any(boxes[:, 1] > boxes[:, 3])
        or np.any(boxes < 0)
        or np.any(boxes[:, [0, 2]] > width)
        or np.any(boxes[:, [1, 3]] > height)
    ):
        raise _fail(lineno, f"image {image_id}: proposal box outside image bounds or inverted")
    if not np.all(np.isfinite(feats)):
        raise _fail(lineno, f"image {image_id}: non-finite feature")

    if not tokens:
        raise _fail(lineno, "caption has no tokens")
    phrases = []
    for k, p in enumerate(raw_phrases):
        if len(p) != 3:
            raise _fail(lineno, f"phrase {k}: expected [start, end, concept]")
        start, end, concept = (int(v) for v in p)
        if end < start:
            raise _fail(lineno, "span end before start")
        if end == start:
            raise _fail(lineno, f"phrase {k}: empty span")
        if start < 0 or end > len(tokens):
            raise _fail(lineno, f"phrase {k}: span outside [0, {len(tokens)})")
        phrases.append(PhraseSpan(start, end, concept))
    if not phrases:
        raise _fail(lineno, "caption has no phrases")

    relations = []
    for r in raw_relations:
        i, j, label = (int(v) for v in r)
        if not (0 <= i < len(phrases) and 0 <= j < len(phrases)) or i == j:
            raise _fail(lineno, f"relation {r}: invalid phrase indices")
        if label < 0 or (num_relations is not None and label > num_relations):
            raise _fail(lineno, f"relation {r}: label out of range")
        relations.append(Relation(i, j, label))

    gt = None
    if "gt" in obj:
        gt = tuple(Box(*map(float, b)) for b in obj["gt"])
        if len(gt) != len(phrases):
            raise _fail(lineno, f"gt has {len(gt)} boxes for {len(phrases)} phrases")

    for a in (boxes, cats, feats):
        a.setflags(write=False)
    img = ImageRecord(image_id, width, height, boxes, cats.astype(np.int64), feats)
    img.categories.setflags(write=False)
    return GroundingInstance(img, CaptionRecord(tokens, tuple(phrases), tuple(relations)), gt)


def load_corpus(
    path: str | Path,
    num_proposals: int | None = None,
    num_relations: int | None = None,
) -> list[GroundingInstance]:
    instances: list[GroundingInstance] = []
    feature_dim = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise _fail(lineno, f"malformed record ({exc.msg})") from None
            inst = _parse_instance(obj, lineno, num_relations)
            if feature_dim is None:
                feature_dim = inst.image.feature_dim
            elif inst.image.feature_dim != feature_dim:
                raise _fail(
                    lineno,
                    f"image {inst.image.image_id}: feature dimension {inst.image.feature_dim} "
                    f"differs from corpus dimension {feature_dim}",
                )
            if num_proposals is not None and inst.image.num_proposals != num_proposals:
                raise _fail(
                    lineno,
                    f"image {inst.image.image_id}: {inst.image.num_proposals} proposals, expected {num_proposals}",
                )
            instances.append(inst)
    return instances


def corpus_stats(instances: Sequence[GroundingInstance]) -> dict[str, int]:
    """Table sizes a model needs to cover this corpus."""
    return {
        "num_proposals": max(i.image.num_proposals for i in instances),
        "feature_dim": instances[0].image.feature_dim,
        "max_token": max(max(i.caption.tokens) for i in instances),
        "max_category": int(max(i.image.categories.max() for i in instances)),
        "max_concept": max(p.concept for i in instances for p in i.caption.phrases),
        "max_relation": max((r.label for i in instances for r in i.caption.relations), default=0),
    }
