"""Ablation runner: train each flag variant over a shared seed set and tabulate."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence, Union

import numpy as np

from relgrounding.corpus import GroundingInstance, corpus_stats
from relgrounding.metrics import evaluate
from relgrounding.model import infer
from relgrounding.synthetic import SynthConfig, generate_synthetic
from relgrounding.trainer import RunConfig, build_model, model_config, train

log = logging.getLogger(__name__)

Split = tuple[Sequence[GroundingInstance], Sequence[GroundingInstance]]
DataSource = Union[Split, Callable[[int], Split]]

FLAGS = (
    "use_semantic_fusion",
    "use_topk",
    "use_regression",
    "use_graph_and_relation",
    "use_rank",
    "use_rec",
)


@dataclass(frozen=True)
class Variant:
    name: str
    flags: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self) -> None:
        unknown = set(self.flags) - set(FLAGS)
        if unknown:
            raise ValueError(f"unknown ablation flags: {sorted(unknown)}")


# rows of the component ablation, from the bare matcher to the full model
COMPONENT_VARIANTS = (
    Variant("baseline", {"use_topk": False, "use_regression": False, "use_graph_and_relation": False}),
    Variant("+TSD", {"use_regression": False, "use_graph_and_relation": False}),
    Variant("+STR", {"use_graph_and_relation": False}),
    Variant("full"),
)

# rows of the loss ablation
LOSS_VARIANTS = (
    Variant("L_rec", {"use_rank": False, "use_regression": False, "use_graph_and_relation": False}),
    Variant("L_rank", {"use_rec": False, "use_regression": False, "use_graph_and_relation": False}),
    Variant("L_rec+L_rank", {"use_regression": False, "use_graph_and_relation": False}),
    Variant("+L_reg", {"use_graph_and_relation": False}),
    Variant("+L_rel"),
)


@dataclass
class RunRecord:
    seed: int
    acc: float = math.nan
    report: dict[str, Any] = field(default_factory=dict)
    init_digest: str = ""
    final_digest: str = ""
    error: str = ""


@dataclass
class AblationRow:
    variant: Variant
    runs: list[RunRecord]

    @property
    def failed(self) -> bool:
        return any(r.error for r in self.runs)

    @property
    def accs(self) -> list[float]:
        return [r.acc for r in self.runs if not r.error]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accs)) if self.accs and not self.failed else math.nan

    @property
    def spread(self) -> float:
        return float(np.std(self.accs)) if self.accs and not self.failed else math.nan


@dataclass
class AblationTable:
    rows: list[AblationRow]
    seeds: list[int]

    def row(self, name: str) -> AblationRow:
        for r in self.rows:
            if r.variant.name == name:
                return r
        raise KeyError(name)

    def render(self) -> str:
        width = max([len("variant")] + [len(r.variant.name) for r in self.rows])
        lines = [f"{'variant':<{width}}  acc@0.5 mean +- std   per seed", "-" * (width + 40)]
        for r in self.rows:
            if r.failed:
                errs = "; ".join(f"seed {x.seed}: {x.error}" for x in r.runs if x.error)
                lines.append(f"{r.variant.name:<{width}}  FAILED ({errs})")
                continue
            per_seed = " ".join(f"{a:.3f}" for a in r.accs)
            lines.append(f"{r.variant.name:<{width}}  {100 * r.mean:6.2f} +- {100 * r.spread:5.2f}   {per_seed}")
        return "\n".join(lines)

    def to_dict(self) -> dict[str, Any]:
        return {
            "seeds": self.seeds,
            "rows": [
                {
                    "name": r.variant.name,
                    "flags": r.variant.flags,
                    "failed": r.failed,
                    "mean": None if math.isnan(r.mean) else r.mean,
                    "std": None if math.isnan(r.spread) else r.spread,
                    "runs": [
                        {
                            "seed": x.seed,
                            "acc": None if math.isnan(x.acc) else x.acc,
                            "report": x.report,
                            "init_digest": x.init_digest,
                            "final_digest": x.final_digest,
                            "error": x.error,
                        }
                        for x in r.runs
                    ],
                }
                for r in self.rows
            ],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> AblationTable:
        data = json.loads(Path(path).read_text())
        rows = []
        for r in data["rows"]:
            runs = [
                RunRecord(
                    seed=x["seed"],
                    acc=math.nan if x["acc"] is None else x["acc"],
                    report=x["report"],
                    init_digest=x["init_digest"],
                    final_digest=x["final_digest"],
                    error=x["error"],
                )
                for x in r["runs"]
            ]
            rows.append(AblationRow(Variant(r["name"], r["flags"]), runs))
        return cls(rows, data["seeds"])


@dataclass(frozen=True)
class SyntheticSplits:
    """Picklable data source: a fresh synthetic corpus per seed."""

    config: SynthConfig

    def __call__(self, seed: int) -> Split:
        corpus = generate_synthetic(self.config, seed)
        return corpus.train, corpus.val


def _resolve(data: DataSource, seed: int) -> Split:
    return data(seed) if callable(data) else data


def _run_one(base: RunConfig, variant: Variant, seed: int, data: DataSource) -> RunRecord:
    record = RunRecord(seed)
    try:
        train_data, val_data = _resolve(data, seed)
        config = base.replace(seed=seed, **variant.flags)
        # digest of the fresh initialization, to show no state carries over
        mcfg = model_config(config, corpus_stats(list(train_data) + list(val_data)))
        record.init_digest = _param_digest(build_model(config, mcfg))
        result = train(config, train_data, val_data)
        report = evaluate(infer(list(val_data), result.model), val_data)
        record.report = report.to_dict()
        record.acc = report.acc_at[0.5]
        record.final_digest = result.checkpoint.digest()
    except Exception as exc:  # one failed run marks its row, the others proceed
        log.warning("variant %s seed %d failed: %s", variant.name, seed, exc)
        record.error = f"{type(exc).__name__}: {exc}"
    return record


def _param_digest(model) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().contiguous().numpy().tobytes())
    return h.hexdigest()


def run_ablation(
    base: RunConfig,
    variants: Sequence[Variant],
    seeds: Sequence[int],
    data: DataSource,
    workers: int = 1,
) -> AblationTable:
    """Train every variant on every seed and collect val acc@0.5.

    ``data`` is a fixed (train, val) pair or a function of the seed. With
    ``workers > 1`` the runs go to separate processes; ``data`` must then
    be picklable.
    """
    if not variants:
        raise ValueError("no variants to run")
    if not seeds:
        raise ValueError("no seeds given")
    jobs = [(v, s) for v in variants for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            futures = [pool.submit(_run_one, base, v, s, data) for v, s in jobs]
            records = [f.result() for f in futures]
    else:
        records = [_run_one(base, v, s, data) for v, s in jobs]

    it = iter(records)
    rows = [AblationRow(v, [next(it) for _ in seeds]) for v in variants]
    _check_isolation(rows)
    return AblationTable(rows, list(seeds))


def _check_isolation(rows: list[AblationRow]) -> None:
    """Runs with the same flags and seed must land on the same parameters."""
    seen: dict[tuple, str] = {}
    for row in rows:
        key_flags = tuple(sorted(row.variant.flags.items()))
        for run in row.runs:
            if run.error:
                continue
            key = (key_flags, run.seed)
            if key in seen and seen[key] != run.final_digest:
                raise RuntimeError(
                    f"state leaked between variants: seed {run.seed} flags {dict(key_flags)} diverged"
                )
            seen[key] = run.final_digest
