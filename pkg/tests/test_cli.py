import csv
import io
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mpdr.cli import budget_subset, main, resolve_seed
from mpdr.data import Tier, load_dataset
from mpdr.encoder import EncoderParams, init_params
from mpdr.errors import UsageError
from mpdr.metrics import MetricsReport


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("MPDR_SEED", raising=False)
    return tmp_path


def run(*argv):
    return main([str(a) for a in argv])


def rows(path):
    return list(csv.DictReader(io.StringIO(Path(path).read_text())))


def synth(path, *extra, queries=30, corpus=800):
    assert run("synth", "--out", path, "--queries", queries, "--corpus-size", corpus, *extra) == 0
    return load_dataset(path)


# ---------------------------------------------------------------- synth

def test_synth_heterogeneous_and_manifest(work):
    corpus = synth("d.txt", "--regime", "heterogeneous", "--seed", 4, "--human-out", "h.txt")
    assert all(q.positives[0].tier is Tier.HUMAN for q in corpus.queries)
    human = load_dataset("h.txt")
    assert all(len(q.positives) == 1 and q.positives[0].tier is Tier.HUMAN for q in human.queries)
    m = json.loads(Path("d.txt.manifest.json").read_text())
    assert m["command"] == "synth" and m["seed"] == 4
    assert set(m) >= {"argv", "config", "outputs", "tool_version", "backend"}
    assert "d.txt" in m["outputs"] and "h.txt" in m["outputs"]


@pytest.mark.parametrize("name,mean", [("5.5-avg", 5.5), ("6.5-avg", 6.5)])
def test_synth_positive_presets(work, name, mean):
    corpus = synth("d.txt", "--positives", name, queries=600, corpus=600 * 25)
    assert abs(np.mean([len(q.positives) for q in corpus.queries]) - mean) < 0.15


def test_synth_bad_flags_exit_1(work, capsys):
    assert run("synth", "--out", "d.txt", "--queries", 100, "--corpus-size", 50) == 1
    assert "corpus_size" in capsys.readouterr().err
    assert run("synth", "--out", "d.txt", "--regime", "mixed") == 1
    assert run("synth", "--out", "d.txt", "--positives", "lots") == 1
    assert not Path("d.txt").exists()


def test_seed_resolution(work, monkeypatch):
    assert resolve_seed(None) == 0
    monkeypatch.setenv("MPDR_SEED", "17")
    assert resolve_seed(None) == 17 and resolve_seed(3) == 3
    run("synth", "--out", "a.txt", "--queries", 10, "--corpus-size", 300)
    assert json.loads(Path("a.txt.manifest.json").read_text())["seed"] == 17
    monkeypatch.setenv("MPDR_SEED", "abc")
    with pytest.raises(UsageError):
        resolve_seed(None)
    assert run("synth", "--out", "b.txt", "--queries", 10, "--corpus-size", 300) == 1


# ---------------------------------------------------------------- train / eval

def test_train_zero_epochs_equals_init(work):
    synth("d.txt")
    assert run("train", "--data", "d.txt", "--out", "m.bin", "--objective", "lsepair", "--epochs", 0, "--seed", 5) == 0
    assert EncoderParams.load("m.bin") == init_params(32, 16, 5)
    assert Path("m.bin.log.csv").read_text() == "epoch,stage,mean_loss,wall_ms\n"


def test_train_unknown_objective(work, capsys):
    synth("d.txt")
    assert run("train", "--data", "d.txt", "--out", "m.bin", "--objective", "InfoNCE2") == 1
    err = capsys.readouterr().err
    assert "valid tags" in err and "LSEPair_minP_maxN" in err


def test_train_missing_data(work):
    assert run("train", "--data", "nope.txt", "--out", "m.bin") == 1


@pytest.mark.parametrize("name,expected", [
    ("msmarco", {"epochs": "3", "batch_size": "128", "learning_rate": "3e-05", "G": "8", "M": "4"}),
    ("nq", {"epochs": "40", "batch_size": "64", "learning_rate": "1e-05"}),
])
def test_train_presets_echoed(work, name, expected):
    synth("d.txt")
    assert run("train", "--data", "d.txt", "--out", "m.bin", "--preset", name) == 0
    echoed = dict(line.split("=", 1) for line in Path("m.bin.config").read_text().splitlines())
    for key, value in expected.items():
        assert echoed[key] == value


def test_train_flags_override_preset(work):
    synth("d.txt")
    assert run("train", "--data", "d.txt", "--out", "m.bin", "--epochs", 2, "--batch", 16, "--lr", 0.01,
               "--group-size", 16, "--max-pos", 8, "--objective", "JointLH") == 0
    echoed = dict(line.split("=", 1) for line in Path("m.bin.config").read_text().splitlines())
    assert (echoed["epochs"], echoed["batch_size"], echoed["learning_rate"], echoed["G"], echoed["M"],
            echoed["objective"]) == ("2", "16", "0.01", "16", "8", "JointLH")
    assert len(Path("m.bin.log.csv").read_text().splitlines()) == 3
    assert run("train", "--data", "d.txt", "--out", "m.bin", "--group-size", 4, "--max-pos", 4) == 1


def test_curriculum(work):
    synth("d.txt", "--regime", "heterogeneous", "--human-out", "h.txt")
    assert run("train", "--data", "d.txt", "--out", "m.bin", "--epochs", 2, "--curriculum", "--stage2-data", "h.txt") == 0
    stages = [r["stage"] for r in rows("m.bin.log.csv")]
    assert stages == ["1", "1", "2"]
    assert run("train", "--data", "d.txt", "--out", "m.bin", "--curriculum") == 1


def test_eval_and_compare_identical(work, capsys):
    synth("d.txt")
    run("train", "--data", "d.txt", "--out", "m.bin", "--epochs", 2)
    assert run("eval", "--model", "m.bin", "--data", "d.txt", "--out", "a.csv") == 0
    out = capsys.readouterr().out
    assert "MRR@10" in out
    report = MetricsReport.from_csv(Path("a.csv").read_text())
    assert "Recall@800" in report.aggregate and len(report.per_query) == 30
    assert run("eval", "--model", "m.bin", "--data", "d.txt", "--out", "b.csv", "--compare", "a.csv") == 0
    cmp_rows = rows("b.csv.compare.csv")
    assert list(cmp_rows[0]) == ["metric", "mean_a", "mean_b", "t_statistic", "p_value", "mark"]
    assert all(float(r["p_value"]) == 1.0 and r["mark"] == "" for r in cmp_rows)


def test_eval_cutoff_clamped_with_warning(work, caplog):
    synth("d.txt")
    run("train", "--data", "d.txt", "--out", "m.bin", "--epochs", 0)
    assert run("eval", "--model", "m.bin", "--data", "d.txt", "--out", "a.csv", "--cutoffs", "10,2000") == 0
    assert "MRR@2000 exceeds corpus size; reporting MRR@800" in caplog.text
    assert "NDCG@800" in MetricsReport.from_csv(Path("a.csv").read_text()).aggregate


def test_eval_schema_is_stable(work):
    synth("d.txt")
    run("train", "--data", "d.txt", "--out", "m.bin", "--epochs", 1)
    run("eval", "--model", "m.bin", "--data", "d.txt", "--out", "a.csv")
    run("eval", "--model", "m.bin", "--data", "d.txt", "--out", "b.csv")
    assert Path("a.csv").read_bytes() == Path("b.csv").read_bytes()
    lines = Path("a.csv").read_text().splitlines()
    assert lines[0] == "query_id,metric,value"
    assert [line.rsplit(",", 1)[0] for line in lines[-6:]] == [
        "AGGREGATE,MRR@10", "AGGREGATE,Recall@100", "AGGREGATE,Recall@800", "AGGREGATE,NDCG@10",
        "AGGREGATE,Accuracy@20", "AGGREGATE,Accuracy@100"]


def test_eval_bad_model_file(work):
    synth("d.txt")
    Path("m.bin").write_bytes(b"garbage")
    assert run("eval", "--model", "m.bin", "--data", "d.txt", "--out", "a.csv") == 1


# ---------------------------------------------------------------- gradcheck

def test_gradcheck_exit_codes_and_determinism(work):
    assert run("gradcheck", "--trials", 1, "--seed", 7, "--out", "a.csv") == 0
    assert run("gradcheck", "--trials", 1, "--seed", 7, "--out", "b.csv") == 0
    assert Path("a.csv").read_bytes() == Path("b.csv").read_bytes()
    assert run("gradcheck", "--trials", 1, "--tol", 1e-15, "--out", "c.csv") == 2


def test_module_entry_point(work):
    proc = subprocess.run([sys.executable, "-m", "mpdr", "gradcheck", "--trials", "1", "--max-pos", "2", "--max-neg", "2",
                           "--tol", "1e-15"], capture_output=True, text=True)
    assert proc.returncode == 2
    proc = subprocess.run([sys.executable, "-m", "mpdr", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 1


# ---------------------------------------------------------------- ablate / budget

def test_ablate_grid(work, caplog):
    synth("d.txt")
    assert run("ablate", "--data", "d.txt", "--out", "ab.csv", "--epochs", 1) == 0
    out = rows("ab.csv")
    assert len(out) == 25
    assert list(out[0])[:4] == ["objective", "G", "M", "MRR@10"]
    cells = {(r["G"], r["M"]) for r in out}
    assert cells == {("8", "2"), ("8", "4"), ("16", "2"), ("16", "4"), ("16", "8")}
    assert "skipping G=8, M=8: need M < G" in caplog.text


def test_ablate_rand1_insensitive_to_m_when_positives_fit(work):
    synth("d.txt", "--positives", "1-2")
    assert run("ablate", "--data", "d.txt", "--out", "ab.csv", "--epochs", 2, "--objectives", "Rand1LH",
               "--G", 8, "--M", "2,4") == 0
    a, b = rows("ab.csv")
    assert (a["M"], b["M"]) == ("2", "4")
    assert {k: v for k, v in a.items() if k != "M"} == {k: v for k, v in b.items() if k != "M"}


def test_budget_subset_sampling():
    ids = [f"q{i}" for i in range(40)]
    half = budget_subset(ids, 0.5, 3, 2)
    assert len(half) == 20 and len(set(half)) == 20
    assert half == sorted(half, key=ids.index)
    assert half == budget_subset(ids, 0.5, 3, 2)
    assert half != budget_subset(ids, 0.5, 4, 2)
    assert len(budget_subset(ids, 1 / 3, 3, 3)) == 13


def test_budget_rows(work):
    synth("d.txt", "--positives", "4-8", queries=40, corpus=1000)
    assert run("budget", "--data", "d.txt", "--out", "b.csv", "--epochs", "1,1,1,1", "--full-epochs", 1) == 0
    out = rows("b.csv")
    assert list(out[0])[:5] == ["positive_count", "query_count_ratio", "query_count", "label_count", "epochs"]
    assert [r["positive_count"] for r in out] == ["1", "2", "3", "4", "4"]
    budgeted = [int(r["label_count"]) for r in out[:4]]
    assert max(budgeted) - min(budgeted) <= 3
    assert [int(r["query_count"]) for r in out] == [40, 20, 13, 10, 40]


def test_budget_skips_when_positives_short(work, caplog):
    synth("d.txt", "--positives", "2-8")
    assert run("budget", "--data", "d.txt", "--out", "b.csv", "--epochs", "1,1,1,1", "--full-epochs", 1) == 0
    assert [r["positive_count"] for r in rows("b.csv")] == ["1", "2"]
    assert "skipping budget setting m=3" in caplog.text


# ---------------------------------------------------------------- manifests

def test_manifest_replay_is_bitwise(work):
    synth("d.txt", "--seed", 3)
    run("train", "--data", "d.txt", "--out", "m.bin", "--epochs", 2, "--objective", "Rand1LH", "--seed", 3)
    run("eval", "--model", "m.bin", "--data", "d.txt", "--out", "e.csv")
    run("gradcheck", "--trials", 1, "--max-pos", 3, "--max-neg", 3, "--out", "g.csv")
    outputs = ["d.txt", "m.bin", "m.bin.config", "m.bin.log.csv", "e.csv", "g.csv"]
    before = {p: Path(p).read_bytes() for p in outputs}
    for manifest in ("d.txt", "m.bin", "e.csv", "g.csv"):
        Path(f"{manifest}.manifest.json").rename(f"{manifest}.saved.json")
    for p in outputs:
        Path(p).unlink()
    for manifest in ("d.txt", "m.bin", "e.csv", "g.csv"):
        assert run("replay", f"{manifest}.saved.json") == 0
    assert {p: Path(p).read_bytes() for p in outputs} == before


def test_failed_run_keeps_previous_outputs(work):
    synth("d.txt")
    before = Path("d.txt").read_bytes(), Path("d.txt.manifest.json").read_bytes()
    assert run("synth", "--out", "d.txt", "--queries", 100, "--corpus-size", 50) == 1
    assert (Path("d.txt").read_bytes(), Path("d.txt.manifest.json").read_bytes()) == before
