"""Grounding metrics: accuracy at IoU thresholds, point game, mean IoU,
and top-k relation classification accuracy."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import torch

from relgrounding.batch import collate
from relgrounding.corpus import BOX_DECIMALS, GroundingInstance
from relgrounding.geometry import Box, center_in, iou
from relgrounding.model import GroundingNet, Prediction

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.5, 0.6, 0.7, 0.8)


class EvaluationError(ValueError):
    pass


@dataclass
class MetricsReport:
    acc_at: dict[float, float]
    pointit: float
    mean_iou: float
    count: int
    rel_top_k: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "acc_at": {str(t): v for t, v in self.acc_at.items()},
            "pointit": self.pointit,
            "mean_iou": self.mean_iou,
            "count": self.count,
            "rel_top_k": {str(k): v for k, v in self.rel_top_k.items()},
        }


def evaluate(
    predictions: Iterable[Prediction],
    gold: Sequence[GroundingInstance],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> MetricsReport:
    by_key: dict[tuple[str, int], Prediction] = {}
    duplicates = []
    for p in predictions:
        key = (p.image_id, p.phrase)
        if key in by_key:
            duplicates.append(key)
        by_key[key] = p

    missing, ious, hits = [], [], 0
    expected = set()
    for inst in gold:
        if inst.gt_boxes is None:
            raise EvaluationError(f"image {inst.image.image_id} has no gt boxes")
        for i, gt in enumerate(inst.gt_boxes):
            key = (inst.image.image_id, i)
            expected.add(key)
            pred = by_key.get(key)
            if pred is None:
                missing.append(key)
                continue
            ious.append(iou(pred.box, gt))
            hits += center_in(pred.box, gt)
    extra = sorted(set(by_key) - expected)
    if missing or duplicates or extra:
        raise EvaluationError(
            f"prediction mismatch: missing={missing[:10]} duplicate={duplicates[:10]} unexpected={extra[:10]}"
        )
    n = len(ious)
    if n == 0:
        raise EvaluationError("no phrases to evaluate")
    acc_at = {float(t): sum(v >= t for v in ious) / n for t in sorted(thresholds)}
    return MetricsReport(acc_at, hits / n, sum(ious) / n, n)


@torch.no_grad()
def relation_accuracy(
    model: GroundingNet,
    corpus: Sequence[GroundingInstance],
    ks: Sequence[int] = (1, 5, 10),
    batch_size: int = 64,
) -> dict[int, float]:
    """Top-k accuracy of the relation classifier over labeled pairs."""
    dtype = next(model.parameters()).dtype
    correct = {k: 0 for k in ks}
    total = 0
    was_training = model.training
    model.eval()
    for start in range(0, len(corpus), batch_size):
        batch = collate([inst.without_gt() for inst in corpus[start : start + batch_size]], dtype)
        if len(batch.rel_labels) == 0:
            continue
        out = model(batch)
        b, i, j = batch.rel_pairs.unbind(-1)
        logits = model.relation(out.z_fine[b, i], out.z_fine[b, j])
        order = torch.argsort(logits, dim=-1, descending=True, stable=True)
        rank = (order == (batch.rel_labels - 1).unsqueeze(-1)).float().argmax(-1)
        for k in ks:
            correct[k] += int((rank < k).sum())
        total += len(batch.rel_labels)
    model.train(was_training)
    if total == 0:
        log.warning("no labeled relation pairs; relation accuracy undefined")
        return {}
    return {k: correct[k] / total for k in ks}


def save_predictions(predictions: Iterable[Prediction], path: str | Path) -> None:
    with open(path, "w") as fh:
        for p in predictions:
            box = ",".join(f"{v:.{BOX_DECIMALS}f}" for v in p.box)
            fh.write(
                '{"image_id":' + json.dumps(p.image_id) + f',"phrase":{p.phrase},"box":[{box}],"score":{p.score:.6f}}}\n'
            )


def load_predictions(path: str | Path) -> list[Prediction]:
    preds = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            preds.append(Prediction(str(obj["image_id"]), int(obj["phrase"]), Box(*obj["box"]), float(obj["score"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise EvaluationError(f"malformed prediction, line {lineno}: {exc}") from None
    return preds
