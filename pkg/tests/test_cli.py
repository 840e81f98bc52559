from __future__ import annotations

import contextlib
import io
import json

import numpy as np
import pytest

from probsig.cli import main
from probsig.report import sha256_file

SMALL = ["--anchors", "1-3", "--keys", "11-15"]
FAST = ["--d", "8", "--epochs", "3", "--lr", "1e-2", "--batch-size", "50", "--snapshot-epochs", "1,2"]


def run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture()
def task_run(tmp_path):
    r = tmp_path / "r"
    assert run("gen-task", "--run", r, "--task", "mod", "--n", 400, "--seed", 1, *SMALL) == 0
    return r


def test_gen_task_rows_and_checksum(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("gen-task", "--run", a, "--task", "add", "--seed", 7, "--n", 500) == 0
    assert run("gen-task", "--run", b, "--task", "add", "--seed", 7, "--n", 500) == 0
    rows = [ln for ln in (a / "dataset.csv").read_text().splitlines() if not ln.startswith("#")]
    assert len(rows) == 500
    assert sha256_file(a / "dataset.csv") == sha256_file(b / "dataset.csv")
    man = json.loads((a / "manifest.json").read_text())
    assert "dataset.csv" in man["files"] and "gen-task" in man["commands"]


def test_gen_task_mod_vocab_and_overwrite(tmp_path, capsys):
    r = tmp_path / "m"
    assert run("gen-task", "--run", r, "--task", "mod", "--n", 100) == 0
    assert len(json.loads((r / "vocab.json").read_text())) == 50
    assert run("gen-task", "--run", r, "--task", "mod", "--n", 100) == 1
    assert "--force" in capsys.readouterr().err
    assert run("gen-task", "--run", r, "--task", "mod", "--n", 100, "--force") == 0


def test_env_root_and_config_override(tmp_path, monkeypatch):
    monkeypatch.setenv("PROBSIG_OUT", str(tmp_path / "root"))
    cfg = tmp_path / "c.txt"
    cfg.write_text("task.task=add_same\ntask.n=50  # small\ntask.seed=3\n")
    assert run("gen-task", "--run", "x", "--config", cfg, "--n", 60) == 0
    out = tmp_path / "root" / "x"
    eff = (out / "config" / "gen-task.txt").read_text()
    assert "task.n=60" in eff and "task.task=add_same" in eff and "task.seed=3" in eff


def test_usage_errors_exit_1(tmp_path):
    assert run("gen-task", "--run", tmp_path / "u", "--task", "nope") == 1
    assert run("bogus") == 1
    bad = tmp_path / "bad.txt"
    bad.write_text("no equals sign\n")
    assert run("gen-task", "--run", tmp_path / "u", "--config", bad) == 1


def test_train_outputs_and_epoch_zero(task_run):
    assert run("train", "--run", task_run, *FAST) == 0
    names = sorted(p.name for p in (task_run / "checkpoints").iterdir())
    assert names == ["epoch_00000.ckpt", "epoch_00001.ckpt", "epoch_00002.ckpt", "epoch_00003.ckpt"]
    lines = (task_run / "timeline.jsonl").read_text().splitlines()
    assert len(lines) == 3 and "loss" in json.loads(lines[0])
    assert run("train", "--run", task_run, "--d", 8, "--epochs", 0) == 0
    assert [p.name for p in (task_run / "checkpoints").iterdir()] == ["epoch_00000.ckpt"]


def test_train_ffn_relu_selects_activation(task_run):
    assert run("train", "--run", task_run, "--arch", "ffn", "--activation", "relu", *FAST) == 0
    header = (task_run / "checkpoints" / "epoch_00003.ckpt").read_bytes().split(b"\n", 1)[0]
    assert json.loads(header)["activation"] == "relu"
    assert run("train", "--run", task_run, "--arch", "lin", "--activation", "relu") == 1


def test_train_missing_data_exit_2(tmp_path):
    assert run("train", "--run", tmp_path / "empty", *FAST) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # the overflow is the point
def test_train_nan_exit_3(task_run, capsys):
    code = run("train", "--run", task_run, "--d", 8, "--epochs", 5, "--lr", "1e200", "--init-exponent", -300)
    assert code == 3
    assert "non-finite" in capsys.readouterr().err


def test_lock_blocks_second_command(task_run):
    (task_run / ".lock").write_text("123")
    assert run("train", "--run", task_run, *FAST) == 2
    (task_run / ".lock").unlink()
    assert run("train", "--run", task_run, *FAST) == 0
    assert not (task_run / ".lock").exists()


def test_signatures_metrics_oracle(task_run):
    assert run("train", "--run", task_run, *FAST) == 0
    assert run("signatures", "--run", task_run) == 0
    assert (task_run / "signatures" / "phi_y_analytic.csv").exists()
    assert run("metrics", "--run", task_run, "--r-order", "--unemb", "--pca") == 0
    csv = (task_run / "metrics" / "structure_timeline.csv").read_text().splitlines()
    assert csv[0] == "epoch,r_order,mean_cos" and len(csv) == 5
    assert run("oracle", "--run", task_run, "--basis", "prop2") == 0
    rep = [json.loads(ln) for ln in (task_run / "oracle" / "prop2_epoch0.jsonl").read_text().splitlines()]
    assert all(r["cosine"] == pytest.approx(1.0) for r in rep)


def test_oracle_sign_both_emits_two_reports(tmp_path):
    r = tmp_path / "o"
    assert run("gen-task", "--run", r, "--task", "add", "--n", 300, *SMALL) == 0
    assert run("train", "--run", r, *FAST) == 0
    assert run("oracle", "--run", r, "--basis", "cor1", "--sign", "both", "--epoch", 0) == 0
    files = sorted(p.name for p in (r / "oracle").glob("cor1*.jsonl"))
    assert files == ["cor1_appendix_epoch0.jsonl", "cor1_main_epoch0.jsonl"]
    assert run("oracle", "--run", r, "--basis", "cor2") == 2  # needs the quadratic activation


def test_vocab_mismatch_names_both_manifests(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("gen-task", "--run", a, "--task", "mod", "--n", 100, *SMALL) == 0
    assert run("gen-task", "--run", b, "--task", "add", "--n", 100) == 0
    assert run("train", "--run", a, *FAST) == 0
    # point a's trained model at b's data
    (a / "provenance.json").write_text(json.dumps({"data": str(b)}))
    (a / "dataset.csv").rename(a / "moved.csv")
    err = io.StringIO()
    with contextlib.redirect_stderr(err):
        assert run("metrics", "--run", a, "--r-order") == 2
    msg = err.getvalue()
    assert str(a / "manifest.json") in msg and str(b / "manifest.json") in msg


def test_corpus_pipeline_and_report(tmp_path):
    r = tmp_path / "lm"
    assert run("gen-corpus", "--run", r, "--states", 6, "--tokens", 20000, "--seq-len", 100, "--seed", 2) == 0
    assert run("corpus-sig", "--run", r, "--top", 6) == 0
    meta = json.loads((r / "corpus" / "meta.json").read_text())
    assert meta["d_vob"] == 6 and len(meta["top"]) == 6
    assert run("train", "--run", r, "--lm", "--d", 16, "--epochs", 5, "--lr", "1e-2", "--init-exponent", 1.2) == 0
    assert run("align", "--run", r) == 0
    dec = (r / "align" / "deciles_next.csv").read_text().splitlines()
    assert dec[0].startswith("decile,mean_p_sig") and len(dec) == 11
    assert run("report", "--run", r) == 0
    index = (r / "report" / "index.md").read_text()
    for svg in r.rglob("*.svg"):
        if "report" not in svg.parts:
            assert svg.name in index


def test_report_warns_on_missing_artifact(task_run):
    assert run("train", "--run", task_run, *FAST) == 0
    assert run("metrics", "--run", task_run, "--r-order") == 0
    victim = task_run / "metrics" / "structure_timeline.csv"
    victim.unlink()
    assert run("report", "--run", task_run) == 0
    index = (task_run / "report" / "index.md").read_text()
    assert "## Warnings" in index and "metrics/structure_timeline.csv" in index


def test_reports_are_deterministic(tmp_path):
    texts = []
    for name in ("a", "b"):
        r = tmp_path / name
        assert run("gen-task", "--run", r, "--task", "mod", "--n", 200, "--seed", 4, *SMALL) == 0
        assert run("train", "--run", r, *FAST) == 0
        assert run("metrics", "--run", r, "--r-order") == 0
        assert run("report", "--run", r) == 0
        texts.append((r / "report" / "index.md").read_text().split("\n", 1)[1])  # title names the run
        ck = sha256_file(r / "checkpoints" / "epoch_00003.ckpt")
        texts.append(ck)
    assert texts[0] == texts[2]
    assert texts[1] == texts[3]


def test_report_needs_manifest(tmp_path):
    (tmp_path / "nothing").mkdir()
    assert run("report", "--run", tmp_path / "nothing") == 2


def test_cli_corpus_file_ingest(tmp_path):
    r = tmp_path / "ext"
    r.mkdir()
    seq = np.tile([0, 1, 2, 1], 50)
    corpus = tmp_path / "c.txt"
    corpus.write_text(" ".join(map(str, seq)))
    assert run("corpus-sig", "--run", r, "--corpus", corpus, "--seq-len", 20, "--top", 3) == 0
    meta = json.loads((r / "corpus" / "meta.json").read_text())
    assert meta["top"][0] == 1
    bad = tmp_path / "bad.txt"
    bad.write_text("0 1 two")
    assert run("corpus-sig", "--run", r, "--corpus", bad, "--seq-len", 2) == 2
