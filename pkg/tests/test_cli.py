import json

import pytest
import yaml

from relgrounding.cli import main

SMALL = ["--set", "M=10", "--set", "K=3", "--set", "d=8", "--set", "word_dim=8", "--set", "hidden=8",
         "--set", "semantic_dim=4", "--set", "batch_size=4", "--set", "lr0=0.01"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "synth.yaml").write_text(yaml.safe_dump(
        {"n_train": 16, "n_val": 6, "n_test": 6, "num_proposals": 10, "feature_dim": 8, "num_concepts": 6}))
    assert main(["gen", "--config", str(root / "synth.yaml"), "--seed", "3", "--out", str(root / "data")]) == 0
    return root


def test_gen_writes_splits(workdir):
    data = workdir / "data"
    for name in ("train.jsonl", "val.jsonl", "test.jsonl", "relations.tsv", "synth.yaml"):
        assert (data / name).exists()
    assert len((data / "train.jsonl").read_text().splitlines()) == 16


def test_train_infer_eval_plot(workdir, capsys):
    data, run = workdir / "data", workdir / "run"
    args = ["train", "--train", str(data / "train.jsonl"), "--val", str(data / "val.jsonl"),
            "--set", "total_iters=6", "--set", "log_every=2", "--out", str(run), *SMALL]
    assert main(args) == 0
    assert (run / "checkpoint.bin").exists() and (run / "config.yaml").exists()
    assert "val acc@0.5" in capsys.readouterr().out

    ckpt = str(run / "checkpoint.bin")
    assert main(["infer", "--checkpoint", ckpt, "--data", str(data / "test.jsonl"), "--out", str(workdir / "pred")]) == 0
    preds = workdir / "pred" / "predictions.jsonl"
    assert len(preds.read_text().splitlines()) == sum(
        len(json.loads(line)["caption"]["phrases"]) for line in (data / "test.jsonl").read_text().splitlines())

    assert main(["eval", "--data", str(data / "test.jsonl"), "--predictions", str(preds),
                 "--thresholds", "0.5", "0.7", "--out", str(workdir / "eval")]) == 0
    from_file = json.loads((workdir / "eval" / "report.json").read_text())
    assert set(from_file["acc_at"]) == {"0.5", "0.7"}
    assert main(["eval", "--data", str(data / "test.jsonl"), "--checkpoint", ckpt, "--thresholds", "0.5", "0.7",
                 "--out", str(workdir / "eval2")]) == 0
    from_ckpt = json.loads((workdir / "eval2" / "report.json").read_text())
    assert from_ckpt["acc_at"] == from_file["acc_at"]
    assert "1" in from_ckpt["rel_top_k"]

    assert main(["plot", "--input", str(run / "metrics.tsv"), "--out", str(workdir / "plots")]) == 0
    assert (workdir / "plots" / "metrics.png").exists()
    assert main(["plot", "--input", str(workdir / "eval" / "report.json"), "--out", str(workdir / "plots")]) == 0
    assert (workdir / "plots" / "report.csv").exists()


def test_resume_from_cli_matches(workdir):
    data = workdir / "data"
    common = ["--train", str(data / "train.jsonl"), "--set", "total_iters=6", *SMALL]
    assert main(["train", *common, "--out", str(workdir / "full")]) == 0
    assert main(["train", *common, "--stop-after", "3", "--out", str(workdir / "half")]) == 0
    assert main(["train", "--resume", str(workdir / "half" / "checkpoint.bin"), "--out", str(workdir / "rest")]) == 0
    assert (workdir / "full" / "checkpoint.bin").read_bytes() == (workdir / "rest" / "checkpoint.bin").read_bytes()


def test_ablate_with_workers(workdir):
    out = workdir / "abl"
    args = ["ablate", "--synth", str(workdir / "synth.yaml"), "--seeds", "0,1", "--workers", "2",
            "--set", "total_iters=2", *SMALL, "--out", str(out)]
    assert main(args) == 0
    table = json.loads((out / "ablation.json").read_text())
    assert [r["name"] for r in table["rows"]] == ["baseline", "+TSD", "+STR", "full"]
    assert not any(r["failed"] for r in table["rows"])


def test_errors_exit_nonzero(workdir, capsys):
    assert main(["train", "--train", str(workdir / "missing.jsonl"), "--out", str(workdir / "x"), *SMALL]) == 1
    err = capsys.readouterr().err
    assert err.startswith("relgrounding train: error:") and len(err.strip().splitlines()) == 1
    assert main(["gen", "--set", "no_such=1", "--out", str(workdir / "y")]) == 1
    assert "no_such" in capsys.readouterr().err
