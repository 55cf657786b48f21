import pytest

from relgrounding.ablation import COMPONENT_VARIANTS, AblationTable, Variant, run_ablation
from relgrounding.trainer import RunConfig

BASE = RunConfig(M=10, K=3, d=8, word_dim=8, hidden=8, semantic_dim=4, batch_size=4, total_iters=4, lr0=0.01)


def test_repeated_variant_gives_identical_rows(tiny_corpus):
    table = run_ablation(BASE, [Variant("a"), Variant("b")], [0, 1], (tiny_corpus.train, tiny_corpus.val))
    a, b = table.rows
    assert [r.final_digest for r in a.runs] == [r.final_digest for r in b.runs]
    assert a.accs == b.accs
    assert a.runs[0].init_digest != a.runs[1].init_digest


def test_failed_run_marks_only_its_row(tiny_corpus):
    table = run_ablation(BASE.replace(M=12, K=3), [Variant("x")], [0], (tiny_corpus.train, tiny_corpus.val))
    assert table.row("x").failed and "M=12" in table.render()

    calls = []

    def data(seed):
        calls.append(seed)
        if seed == 1:
            raise RuntimeError("no data for seed 1")
        return tiny_corpus.train, tiny_corpus.val

    table = run_ablation(BASE, [Variant("y")], [0, 1], data)
    row = table.row("y")
    assert row.failed and row.runs[0].error == "" and "seed 1" in table.render()
    assert calls == [0, 1]


def test_component_rows_and_table_file(tiny_corpus, tmp_path):
    table = run_ablation(BASE, COMPONENT_VARIANTS, [0], (tiny_corpus.train, tiny_corpus.val))
    assert [r.variant.name for r in table.rows] == ["baseline", "+TSD", "+STR", "full"]
    table.save(tmp_path / "t.json")
    again = AblationTable.load(tmp_path / "t.json")
    assert again.render() == table.render()
    assert again.to_dict() == table.to_dict()


def test_unknown_flag_rejected():
    with pytest.raises(ValueError):
        Variant("v", {"use_magic": True})
    with pytest.raises(ValueError):
        run_ablation(BASE, [], [0], ([], []))
