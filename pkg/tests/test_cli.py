import json
import subprocess
import sys

import pytest

from ceg.cli import main
from ceg.core import load_dataset


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    assert run("simulate", "--model", "self-exciting", "--mu", 0.1, "--beta", 0.1, "--T", 60, "--n-seqs", 10,
               "--seed", 7, "--out", d / "d.jsonl") == 0
    assert run("train", "--data", d / "d.jsonl", "--epochs", 2, "--L", 10, "--noise-dim", 4, "--hidden-dim", 8,
               "--seed", 1, "--out", d / "m.json", "--heldout-out", d / "held.jsonl") == 0
    return d


def test_simulate_outputs(pipeline):
    ds = load_dataset(pipeline / "d.jsonl")
    assert len(ds) == 10
    cfg = json.loads((pipeline / "d.jsonl.config.json").read_text())
    assert cfg["n_seqs"] == 10 and cfg["model"] == "self-exciting"


def test_self_correcting_accepted(tmp_path):
    assert run("simulate", "--model", "self-correcting", "--mu", 0.5, "--alpha", 0.8, "--T", 10, "--n-seqs", 2,
               "--out", tmp_path / "sc.jsonl") == 0


def test_train_outputs(pipeline):
    rows = (pipeline / "m.json.log.csv").read_text().strip().splitlines()
    assert rows[0] == "epoch,train_loss,heldout_loss,wall_seconds"
    assert len(rows) == 3
    assert len(load_dataset(pipeline / "held.jsonl")) == 2


def test_train_is_bit_reproducible(pipeline, tmp_path):
    assert run("train", "--data", pipeline / "d.jsonl", "--epochs", 2, "--L", 10, "--noise-dim", 4,
               "--hidden-dim", 8, "--seed", 1, "--out", tmp_path / "m2.json") == 0
    assert (tmp_path / "m2.json").read_bytes() == (pipeline / "m.json").read_bytes()


def test_cvae_training_stores_nets(pipeline, tmp_path):
    assert run("train", "--method", "cvae", "--data", pipeline / "d.jsonl", "--epochs", 1, "--noise-dim", 4,
               "--hidden-dim", 8, "--out", tmp_path / "c.json") == 0
    assert "cvae_parameters" in json.loads((tmp_path / "c.json").read_text())


def test_evaluate_and_threads(pipeline, tmp_path):
    outs = []
    for threads in (1, 4):
        out = tmp_path / f"r{threads}.json"
        assert run("evaluate", "--model", pipeline / "m.json", "--data", pipeline / "held.jsonl",
                   "--truth", "self-exciting", "--mu", 0.1, "--beta", 0.1, "--L", 50, "--threads", threads,
                   "--out", out) == 0
        outs.append(out)
    a, b = (json.loads(o.read_text()) for o in outs)
    assert a == b
    assert all(a[k] is not None for k in ("mre_f", "mre_lambda", "test_ll_per_event"))
    assert outs[0].with_name("r1.json.plot.csv").read_text() == outs[1].with_name("r4.json.plot.csv").read_text()


def test_generate(pipeline, tmp_path):
    texts = []
    for threads in (1, 4):
        out = tmp_path / f"g{threads}.jsonl"
        assert run("generate", "--model", pipeline / "m.json", "--T", 50, "--n-seqs", 4, "--seed", 3,
                   "--threads", threads, "--out", out) == 0
        texts.append(out.read_text())
    assert texts[0] == texts[1]
    assert len(load_dataset(tmp_path / "g1.jsonl")) == 4
    flags = json.loads((tmp_path / "g1.jsonl.truncation.json").read_text())
    assert [f["seq_id"] for f in flags] == [0, 1, 2, 3]


def test_predict_stdout(pipeline, tmp_path, capsys):
    hist = tmp_path / "h.jsonl"
    hist.write_text('{"T": 60, "events": [[1.0], [2.5]]}\n')
    assert run("predict", "--model", pipeline / "m.json", "--history", hist, "--L", 200) == 0
    doc = json.loads(capsys.readouterr().out)
    assert set(doc) == {"dt_mean", "mark_mean", "L"}
    assert doc["L"] == 200 and doc["dt_mean"] > 0 and doc["mark_mean"] == []


def test_config_file_overlay(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n_seqs": 3, "T": 20.0, "seed": 2}))
    assert run("simulate", "--config", cfg, "--n-seqs", 5, "--out", tmp_path / "o.jsonl") == 0
    resolved = json.loads((tmp_path / "o.jsonl.config.json").read_text())
    assert resolved["n_seqs"] == 5 and resolved["T"] == 20.0 and resolved["seed"] == 2
    # rerunning from the recorded config reproduces the output
    assert run("simulate", "--config", tmp_path / "o.jsonl.config.json", "--out", tmp_path / "p.jsonl") == 0
    assert (tmp_path / "p.jsonl").read_text() == (tmp_path / "o.jsonl").read_text()


def test_threads_env_default(tmp_path, monkeypatch):
    monkeypatch.setenv("CEG_THREADS", "3")
    assert run("simulate", "--T", 5, "--n-seqs", 2, "--out", tmp_path / "e.jsonl") == 0
    assert json.loads((tmp_path / "e.jsonl.config.json").read_text())["threads"] == 3


@pytest.mark.parametrize("argv, code", [
    (["simulate", "--model", "poisson", "--out", "x.jsonl"], 2),
    (["simulate", "--mu", "-1", "--out", "x.jsonl"], 2),
    (["simulate", "--n-seqs", "0", "--out", "x.jsonl"], 2),
    (["train", "--epochs", "3"], 2),
    (["frobnicate"], 2),
    (["evaluate", "--model", "missing.json", "--data", "d.jsonl", "--out", "r.json"], 3),
    (["generate", "--model", "missing.json", "--out", "g.jsonl"], 3),
])
def test_exit_codes(argv, code, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == code
    err = capsys.readouterr().err
    if argv[0] == "simulate" and "poisson" in argv:
        assert "valid models" in err
    if "missing.json" in argv:
        assert "missing.json" in err


def test_invalid_data_exit_code(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"T": 2, "events": [[1.0], [0.5]]}\n')
    assert run("train", "--data", bad, "--out", tmp_path / "m.json") == 3


def test_bound_violation_is_numeric_failure(tmp_path):
    assert run("simulate", "--mu", 1.0, "--beta", 5.0, "--T", 50, "--n-seqs", 1, "--lambda-bar", 1.5,
               "--out", tmp_path / "v.jsonl") == 4


def test_mark_dim_mismatch(pipeline, tmp_path):
    assert run("simulate", "--model", "etas", "--T", 10, "--n-seqs", 2, "--out", tmp_path / "e.jsonl") == 0
    assert run("evaluate", "--model", pipeline / "m.json", "--data", tmp_path / "e.jsonl", "--truth", "etas",
               "--out", tmp_path / "r.json") == 3


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "ceg", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "simulate" in out.stdout
