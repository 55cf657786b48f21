"""Desk-scale settings for the synthetic experiments.

The RunConfig defaults are the full-scale training recipe (lr 1e-3,
batch 40, 80k iterations, plain softmax attention). At a few thousand
iterations on a one-core machine that recipe barely moves, so the synthetic
presets raise the learning rate and sharpen the attention softmax.
"""
from __future__ import annotations

from relgrounding.synthetic import SynthConfig
from relgrounding.trainer import RunConfig

_DESK = dict(M=20, K=5, batch_size=16, lr0=0.01, attention_scale=10.0)


def recovery() -> tuple[SynthConfig, RunConfig]:
    """Planted one-to-one correspondences, no distractors."""
    return SynthConfig(rho=0.0), RunConfig(d=32, total_iters=2000, **_DESK)


def jitter() -> tuple[SynthConfig, RunConfig]:
    """Every object covered by a cluster of imprecise boxes (IoU 0.45-0.65 with gt)."""
    return SynthConfig(rho=0.0, jitter_iou=(0.45, 0.65)), RunConfig(d=32, total_iters=2000, **_DESK)


def relational() -> tuple[SynthConfig, RunConfig]:
    """Half of the later phrases get a same-concept distractor; boxes are imprecise.

    The distractor differs from the true object only in where it sits relative
    to the previous phrase's object, and each object is covered by a small
    cluster of loose boxes.
    """
    synth = SynthConfig(rho=0.5, n_train=4000, jitter_iou=(0.35, 0.6), cluster_size=3)
    return synth, RunConfig(d=64, hidden=64, total_iters=6000, **_DESK)


PRESETS = {"recovery": recovery, "jitter": jitter, "relational": relational}
