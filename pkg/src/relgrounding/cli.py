"""Command-line entry point: gen, train, eval, infer, ablate, plot."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import yaml

from relgrounding.ablation import COMPONENT_VARIANTS, LOSS_VARIANTS, SyntheticSplits, run_ablation
from relgrounding.corpus import RelationVocabulary, load_corpus, save_corpus
from relgrounding.metrics import evaluate, load_predictions, relation_accuracy, save_predictions
from relgrounding.model import infer
from relgrounding.plotting import plot
from relgrounding.presets import PRESETS
from relgrounding.synthetic import SynthConfig, generate_synthetic
from relgrounding.trainer import RunConfig, load_checkpoint, train

log = logging.getLogger("relgrounding")


def _parse_value(text: str) -> Any:
    return yaml.safe_load(text)


def _overrides(pairs: Sequence[str]) -> dict[str, Any]:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {pair!r}")
        out[key.strip()] = _parse_value(value)
    return out


def synth_config(path: str | None, preset: str | None, overrides: dict[str, Any]) -> SynthConfig:
    base = PRESETS[preset]()[0] if preset else SynthConfig()
    values = dataclasses.asdict(base)
    if path:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        values.update(loaded)
    values.update(overrides)
    known = {f.name for f in dataclasses.fields(SynthConfig)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown synthetic config keys: {sorted(unknown)}")
    for key in ("phrases_per_caption", "image_size", "object_size", "background_size", "jitter_iou"):
        if values.get(key) is not None:
            values[key] = tuple(values[key])
    return SynthConfig(**values)


def run_config(path: str | None, preset: str | None, overrides: dict[str, Any]) -> RunConfig:
    base = PRESETS[preset]()[1] if preset else RunConfig()
    values = base.to_dict()
    if path:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"{path}: expected a flat key-value mapping")
        values.update(loaded)
    values.update(overrides)
    return RunConfig.from_dict(values)


def _relations_count(corpus_path: str) -> int | None:
    vocab = Path(corpus_path).with_name("relations.tsv")
    return RelationVocabulary.load(vocab).size if vocab.exists() else None


def _load(path: str, M: int | None = None):
    return load_corpus(path, num_proposals=M, num_relations=_relations_count(path))


# -- subcommands --------------------------------------------------------------


def cmd_gen(args) -> None:
    cfg = synth_config(args.config, args.preset, _overrides(args.set))
    corpus = generate_synthetic(cfg, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, split in zip(("train", "val", "test"), corpus.splits()):
        save_corpus(split, out / f"{name}.jsonl")
    corpus.relations.save(out / "relations.tsv")
    (out / "synth.yaml").write_text(yaml.safe_dump(dataclasses.asdict(cfg), sort_keys=False))
    print(f"wrote {len(corpus.train)}/{len(corpus.val)}/{len(corpus.test)} instances to {out}")


def cmd_train(args) -> None:
    overrides = _overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.train:
        overrides["train_path"] = args.train
    if args.val:
        overrides["val_path"] = args.val
    config = run_config(args.config, args.preset, overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    explicit = bool(args.config or args.preset or args.set)
    resume = load_checkpoint(args.resume, config if explicit else None) if args.resume else None
    if resume is not None:
        config = resume.config
    train_data = _load(config.train_path, config.M)
    val_data = _load(config.val_path, config.M) if config.val_path else None
    config.save(out / "config.yaml")
    result = train(
        config,
        train_data,
        val_data,
        resume=resume,
        stop_after=args.stop_after,
        log_path=out / "metrics.tsv",
        checkpoint_path=out / "checkpoint.bin",
    )
    last = result.history[-1] if result.history else None
    summary = f"checkpoint {out / 'checkpoint.bin'} at iteration {result.checkpoint.iteration}"
    if last is not None and last.val_acc == last.val_acc:
        summary += f", val acc@0.5 {last.val_acc:.4f}"
    print(summary)


def cmd_infer(args) -> None:
    model = load_checkpoint(args.checkpoint).restore()
    data = _load(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    preds = infer(data, model)
    save_predictions(preds, out / "predictions.jsonl")
    print(f"wrote {len(preds)} predictions to {out / 'predictions.jsonl'}")


def cmd_eval(args) -> None:
    gold = _load(args.data)
    model = load_checkpoint(args.checkpoint).restore() if args.checkpoint else None
    if args.predictions:
        preds = load_predictions(args.predictions)
    elif model is not None:
        preds = infer(gold, model)
    else:
        raise ValueError("eval needs --predictions or --checkpoint")
    report = evaluate(preds, gold, thresholds=tuple(args.thresholds))
    if model is not None and model.cfg.num_relations > 0:
        report.rel_top_k = relation_accuracy(model, gold, [k for k in (1, 5, 10) if k <= model.cfg.num_relations])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    accs = " ".join(f"acc@{t}={v:.4f}" for t, v in report.acc_at.items())
    print(f"{accs} pointit={report.pointit:.4f} mean_iou={report.mean_iou:.4f} n={report.count}")


def cmd_ablate(args) -> None:
    overrides = _overrides(args.set)
    base = run_config(args.config, args.preset, overrides)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed or 0]
    variants = COMPONENT_VARIANTS if args.table == "component" else LOSS_VARIANTS
    if args.train:
        train_data, val_data = _load(args.train, base.M), _load(args.val, base.M)
        data: Any = (train_data, val_data)
    else:
        data = SyntheticSplits(synth_config(args.synth, args.preset, {}))

    table = run_ablation(base, variants, seeds, data, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table.save(out / "ablation.json")
    (out / "ablation.txt").write_text(table.render() + "\n")
    print(table.render())


def cmd_plot(args) -> None:
    out = Path(args.out)
    target = out / Path(args.input).stem if out.suffix == "" else out
    csv_path, png_path = plot(args.input, target)
    print(f"wrote {csv_path} and {png_path}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relgrounding", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="YAML file with config fields")
            p.add_argument("--preset", choices=sorted(PRESETS), help="start from a synthetic preset")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a field")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    common(p)
    p.set_defaults(func=cmd_gen, seed=0)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--train", help="training corpus (overrides train_path)")
    p.add_argument("--val", help="validation corpus (overrides val_path)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-after", type=int, default=None, help="stop at this iteration")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="ground every phrase of a corpus")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against gold boxes")
    common(p, config=False)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--predictions")
    p.add_argument("--thresholds", type=float, nargs="+", default=[0.5, 0.6, 0.7, 0.8])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train ablation variants over several seeds")
    common(p)
    p.add_argument("--seeds", help="comma-separated seeds (default: --seed)")
    p.add_argument("--table", choices=("component", "loss"), default="component")
    p.add_argument("--synth", help="synthetic corpus config, regenerated per seed")
    p.add_argument("--train")
    p.add_argument("--val")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render a metric log, report or ablation table")
    common(p, config=False)
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        if args.verbose:
            raise
        print(f"relgrounding {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
