import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from kper.cli import main
from kper.data import load_prepared
from kper.oracle import RankingFixture, oracle_auc, oracle_psr, oracle_recall_precision
from kper.training import evaluation_model, load_checkpoint

GOLDEN = Path(__file__).parent / "golden"
INPUT = GOLDEN / "input"
PREPARED_FILES = ("train.tsv", "val.tsv", "test.tsv", "kg.tsv", "idmap.tsv", "seeds.tsv")


def prepare(out, seed=0):
    return main(["prepare", "--ratings", str(INPUT / "ratings.tsv"), "--kg", str(INPUT / "kg.tsv"),
                 "--out", str(out), "--seed", str(seed), "--seeds-per-side", "4"])


def stable_manifest(path):
    m = json.loads(Path(path).read_text())
    for v in m["inputs"].values():
        v.pop("path")
    return m


FAST = ["--d", "8", "--K", "2", "--l", "4", "--seeds-per-side", "4", "--batch", "16", "--quiet"]


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    out = tmp_path_factory.mktemp("prep")
    assert prepare(out) == 0
    return out


@pytest.fixture(scope="module")
def trained(prepared, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--prepared", str(prepared), "--out", str(out), "--max-epochs", "2"] + FAST) == 0
    return out


def test_prepare_matches_golden_and_reruns_identically(prepared, tmp_path):
    for name in PREPARED_FILES:
        assert (prepared / name).read_bytes() == (GOLDEN / "prepared" / name).read_bytes(), name
    assert stable_manifest(prepared / "manifest.json") == stable_manifest(GOLDEN / "prepared" / "manifest.json")
    assert prepare(tmp_path / "again") == 0
    for name in PREPARED_FILES + ("manifest.json",):
        assert (prepared / name).read_bytes() == (tmp_path / "again" / name).read_bytes()
    run = json.loads((prepared / "run.json").read_text())
    assert run["command"] == "prepare" and "started" in run and "finished" in run


def test_prepare_missing_input_and_parse_error(tmp_path, capsys):
    assert main(["prepare", "--ratings", str(tmp_path / "nope.tsv"), "--kg", str(INPUT / "kg.tsv"),
                 "--out", str(tmp_path / "o")]) == 1
    bad = tmp_path / "bad.tsv"
    bad.write_text("0 0 1\n0 zz 1\n")
    assert main(["prepare", "--ratings", str(bad), "--kg", str(INPUT / "kg.tsv"), "--out", str(tmp_path / "o")]) == 1
    assert "bad.tsv:2" in capsys.readouterr().err


def test_train_one_epoch_fast(prepared, tmp_path):
    t0 = time.perf_counter()
    assert main(["train", "--prepared", str(prepared), "--out", str(tmp_path), "--max-epochs", "1"] + FAST) == 0
    assert time.perf_counter() - t0 < 5
    log = (tmp_path / "train_log.tsv").read_text().splitlines()
    assert len(log) == 2 and log[1].startswith("1\t")
    assert (tmp_path / "best.ckpt").is_file() and (tmp_path / "last.ckpt").is_file()


def test_train_without_hops(prepared, tmp_path):
    assert main(["train", "--prepared", str(prepared), "--out", str(tmp_path), "--max-epochs", "1"]
                + FAST + ["--K", "0"]) == 0
    assert load_checkpoint(tmp_path / "best.ckpt").config.K == 0


def test_config_precedence(prepared, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"d": 4, "l": 2, "learning_rate": 5e-3}))
    assert main(["train", "--prepared", str(prepared), "--out", str(tmp_path / "o"), "--config", str(cfg),
                 "--l", "3", "--max-epochs", "1", "--seeds-per-side", "4", "--quiet"]) == 0
    eff = json.loads((tmp_path / "o" / "config.json").read_text())
    assert (eff["d"], eff["l"], eff["learning_rate"], eff["K"]) == (4, 3, 5e-3, 2)
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["train", "--prepared", str(prepared), "--out", str(tmp_path / "p"), "--config", str(cfg)]) == 1


def test_resume_continues(prepared, trained, tmp_path):
    assert main(["train", "--prepared", str(prepared), "--out", str(tmp_path), "--max-epochs", "1"] + FAST) == 0
    assert main(["train", "--prepared", str(prepared), "--out", str(tmp_path), "--max-epochs", "2",
                 "--resume", str(tmp_path / "last.ckpt"), "--quiet"]) == 0
    assert (tmp_path / "last.ckpt").read_bytes() == (trained / "last.ckpt").read_bytes()
    assert main(["train", "--prepared", str(prepared), "--out", str(tmp_path), "--max-epochs", "3", "--d", "4",
                 "--resume", str(tmp_path / "last.ckpt"), "--quiet"]) == 1


def report_values(path):
    out = {}
    for line in Path(path).read_text().splitlines()[1:]:
        m, k, g, v = line.split("\t")
        out[(m, int(k), g)] = float(v)
    return out


def test_evaluate_report_equals_oracle(prepared, trained, tmp_path):
    assert main(["evaluate", "--checkpoint", str(trained / "best.ckpt"), "--prepared", str(prepared),
                 "--out", str(tmp_path)]) == 0
    rep = report_values(tmp_path / "report.tsv")
    assert {k for m, k, g in rep if m == "recall"} >= {1, 5, 10, 20, 50, 100}

    g, split = load_prepared(prepared)
    model, nb = evaluation_model(load_checkpoint(trained / "best.ckpt"), g, split)
    scores = model.scorer(nb)(np.arange(g.num_users))
    pos = lambda rows: {u: {i for uu, i, y in rows.tolist() if uu == u and y == 1} for u in range(g.num_users)}
    train_pos, val_pos, test_pos = pos(split.train), pos(split.validation), pos(split.test)
    counts = np.bincount(split.train[split.train[:, 2] == 1, 1], minlength=g.num_items).tolist()
    pair = model.score_pairs(split.test[:, 0], split.test[:, 1], nb)
    fx = RankingFixture("fixture", g.num_items, {u: scores[u].tolist() for u in range(g.num_users)},
                        {u: train_pos[u] | val_pos[u] for u in range(g.num_users)}, test_pos, counts,
                        split.test[:, 2].tolist(), pair.tolist())
    for k in (1, 5, 10, 20, 50, 100):
        r, p = oracle_recall_precision(fx, k)
        assert rep[("recall", k, "all")] == float(r) and rep[("precision", k, "all")] == float(p)
    assert rep[("auc", 0, "all")] == float(oracle_auc(fx.auc_labels, fx.auc_scores))
    assert rep[("psr", 10, "all")] == oracle_psr(fx, 10, 0.1)
    assert "checkpoint_id" in (tmp_path / "report.txt").read_text()


def test_coldstart_and_baseline(prepared, trained, tmp_path):
    assert main(["coldstart-report", "--checkpoint", str(trained / "best.ckpt"), "--prepared", str(prepared),
                 "--out", str(tmp_path / "c")]) == 0
    lines = (tmp_path / "c" / "coldstart.tsv").read_text().splitlines()
    assert lines[0] == "group\tusers\ttrain_interactions\trecall@10"
    assert [x.split("\t")[0] for x in lines[1:4]] == ["warm", "normal", "cold"]
    assert sum(int(x.split("\t")[1]) for x in lines[1:4]) == 10
    assert main(["evaluate", "--baseline", "popularity", "--prepared", str(prepared), "--out", str(tmp_path / "b")]) == 0
    assert "popularity" in (tmp_path / "b" / "report.txt").read_text()


def test_missing_checkpoint_exit_code(prepared, tmp_path):
    missing = tmp_path / "absent.ckpt"
    proc = subprocess.run([sys.executable, "-m", "kper.cli", "evaluate", "--checkpoint", str(missing),
                           "--prepared", str(prepared), "--out", str(tmp_path / "o")],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and str(missing) in proc.stderr


def test_checkpoint_dimension_mismatch(trained, tmp_path):
    other = tmp_path / "other"
    # drop the last user's interactions so the id spaces differ
    rows = [l for l in (INPUT / "ratings.tsv").read_text().splitlines() if not l.startswith("9\t")]
    (tmp_path / "r.tsv").write_text("\n".join(rows) + "\n")
    assert main(["prepare", "--ratings", str(tmp_path / "r.tsv"), "--kg", str(INPUT / "kg.tsv"), "--seeds-per-side", "4",
                 "--out", str(other)]) == 0
    assert main(["evaluate", "--checkpoint", str(trained / "best.ckpt"), "--prepared", str(other),
                 "--out", str(tmp_path / "e")]) == 1


def test_verify_suite_filter_and_negative_control(capsys):
    assert main(["verify", "--suite", "gates"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 1 and out[0].startswith("PASS gates")
    assert main(["verify", "--suite", "gradients", "--corrupt-gradient"]) != 0
    assert "FAIL" in capsys.readouterr().out


def test_threads_env_is_accepted(prepared, tmp_path, monkeypatch):
    monkeypatch.setenv("KPER_THREADS", "1")
    assert main(["train", "--prepared", str(prepared), "--out", str(tmp_path), "--max-epochs", "1"] + FAST) == 0
    assert json.loads((tmp_path / "config.json").read_text())["threads"] == 1
