import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from sleepmodel import cli, io, simulator
from sleepmodel.neural import LstmSlm, serialize_lstm


def run(*argv):
    return cli.main([str(a) for a in argv])


def snapshot(directory: Path) -> dict[str, bytes]:
    return {str(p.relative_to(directory)): p.read_bytes()
            for p in sorted(directory.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """simulate -> train-ngram, shared by several tests."""
    root = tmp_path_factory.mktemp("pipe")
    assert run("simulate", "--records", 20, "--length", 300, "--seed", 1,
               "--out", root / "train") == 0
    assert run("simulate", "--records", 8, "--length", 300, "--seed", 2,
               "--out", root / "test") == 0
    assert run("train-ngram", "--data", root / "train", "--order", 2,
               "--out", root / "bigram.slm") == 0
    return root


def test_simulate_layout_and_determinism(tmp_path):
    args = ["simulate", "--preset", "table1", "--records", 2, "--length", 10, "--seed", 7]
    assert run(*args, "--out", tmp_path / "a") == 0
    recs = io.read_hypnograms(tmp_path / "a" / "hypnograms.hyp")
    assert [len(r) for r in recs] == [10, 10]
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert [r["id"] for r in manifest["records"]] == ["rec-0000", "rec-0001"]
    assert io.read_likelihoods(tmp_path / "a" / manifest["records"][0]["likelihoods"]).shape \
        == (10, 5)
    cfg = json.loads((tmp_path / "a" / "run_config.json").read_text())
    assert cfg["simulate"]["seed"] == 7 and cfg["simulate"]["records"] == 2

    first = snapshot(tmp_path / "a")
    assert run(*args, "--out", tmp_path / "a") == 0
    assert snapshot(tmp_path / "a") == first
    assert run(*args, "--out", tmp_path / "b") == 0
    other = snapshot(tmp_path / "b")
    assert {k: v for k, v in other.items() if k != "run_config.json"} == \
        {k: v for k, v in first.items() if k != "run_config.json"}


def test_noiseless_pipeline_is_exact(tmp_path):
    ident = tmp_path / "identity.csv"
    io.write_stochastic_matrix(ident, np.eye(5))
    assert run("simulate", "--emission", ident, "--records", 3, "--length", 50,
               "--out", tmp_path / "sim") == 0
    assert run("decode", "--corpus", tmp_path / "sim", "--greedy", "--out", tmp_path / "dec") == 0
    metrics = (tmp_path / "dec" / "metrics.csv").read_text().splitlines()
    assert metrics == ["accuracy,kappa", "1.000000,1.000000"]
    assert io.read_hypnograms(tmp_path / "dec" / "decoded.hyp") == \
        io.read_hypnograms(tmp_path / "sim" / "hypnograms.hyp")


def test_eval_uniform_is_five(pipeline, capsys):
    assert run("eval-ppl", "--model", "uniform", "--data", pipeline / "test") == 0
    last = capsys.readouterr().out.strip().splitlines()[-1]
    assert last == "ALL,2400,5.000000"


def test_eval_bigram_near_entropy_floor(tmp_path, capsys):
    assert run("simulate", "--records", 300, "--length", 960, "--seed", 5,
               "--out", tmp_path / "train") == 0
    assert run("simulate", "--records", 60, "--length", 960, "--seed", 6,
               "--out", tmp_path / "test") == 0
    assert run("train-ngram", "--data", tmp_path / "train", "--out", tmp_path / "m.slm") == 0
    capsys.readouterr()
    assert run("eval-ppl", "--model", tmp_path / "m.slm", "--data", tmp_path / "test",
               "--out", tmp_path / "ppl.csv") == 0
    total = float((tmp_path / "ppl.csv").read_text().strip().splitlines()[-1].split(",")[2])
    floor = simulator.entropy_rate_perplexity(simulator.table1_chain())
    assert abs(total / floor - 1) < 0.02
    assert (tmp_path / "ppl.csv.config.json").exists()


def test_sweep_prefers_fusion(pipeline):
    out = pipeline / "sweep.csv"
    assert run("sweep", "--model", pipeline / "bigram.slm", "--corpus", pipeline / "test",
               "--alphas", 0.0, 0.42, "--widths", 128, "--out", out) == 0
    rows = [line.split(",") for line in out.read_text().splitlines()[1:]]
    assert [r[0] for r in rows] == ["0.000000", "0.420000"]
    assert float(rows[1][3]) > float(rows[0][3])


def test_sweep_jobs_do_not_change_results(pipeline):
    a, b = pipeline / "s1.csv", pipeline / "s2.csv"
    common = ["sweep", "--model", pipeline / "bigram.slm", "--corpus", pipeline / "test",
              "--alphas", 0.2, 0.6, "--widths", 4, 16]
    assert run(*common, "--out", a) == 0
    assert run(*common, "--jobs", 2, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()


def test_decode_beam_and_likelihood_files(pipeline):
    out = pipeline / "dec"
    assert run("decode", "--model", pipeline / "bigram.slm", "--corpus", pipeline / "test",
               "--beam", "--alpha", 0.42, "--width", 32, "--out", out) == 0
    assert len(io.read_hypnograms(out / "decoded.hyp")) == 8
    lik = sorted((pipeline / "test" / "likelihoods").glob("*.csv"))[:2]
    assert run("decode", "--likelihoods", *lik, "--greedy", "--out", pipeline / "dec2") == 0
    names = [h.record_id for h in io.read_hypnograms(pipeline / "dec2" / "decoded.hyp")]
    assert names == [p.stem for p in lik]
    assert not (pipeline / "dec2" / "metrics.csv").exists()


def test_single_config_file_end_to_end(tmp_path):
    config = {
        "seed": 3,
        "simulate": {"records": 6, "length": 120, "out": str(tmp_path / "sim")},
        "train-ngram": {"data": [str(tmp_path / "sim")], "order": 3,
                        "out": str(tmp_path / "m.slm")},
        "eval-ppl": {"model": str(tmp_path / "m.slm"), "data": [str(tmp_path / "sim")],
                     "out": str(tmp_path / "ppl.csv")},
        "decode": {"model": str(tmp_path / "m.slm"), "corpus": str(tmp_path / "sim"),
                   "beam": True, "alpha": 0.42, "width": 16, "out": str(tmp_path / "dec")},
    }
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(json.dumps(config))
    outputs = {}
    for rerun in range(2):
        for cmd in ("simulate", "train-ngram", "eval-ppl", "decode"):
            assert run(cmd, "--config", cfg_path) == 0, cmd
        outputs[rerun] = snapshot(tmp_path)
    assert outputs[0] == outputs[1]
    resolved = json.loads((tmp_path / "sim" / "run_config.json").read_text())
    assert resolved["simulate"]["seed"] == 3
    assert "SLM-NGRAM v1 order=3" in (tmp_path / "m.slm").read_text()


def test_flags_override_config(tmp_path):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"simulate": {"records": 4, "length": 5}}))
    assert run("simulate", "--config", cfg_path, "--records", 2, "--out", tmp_path / "s") == 0
    assert len(io.read_hypnograms(tmp_path / "s" / "hypnograms.hyp")) == 2


def test_train_lstm_command(pipeline):
    out = pipeline / "lstm.slm"
    assert run("train-lstm", "--train", pipeline / "train", "--valid", pipeline / "test",
               "--hidden", 6, "--embed-dim", 3, "--max-epochs", 1, "--out", out) == 0
    assert out.read_text().startswith("SLM-LSTM v1")
    assert (pipeline / "lstm.slm.history.csv").read_text().startswith("epoch,valid_perplexity")
    assert run("eval-ppl", "--model", out, "--data", pipeline / "test") == 0


@pytest.mark.parametrize("argv", [
    ["bogus"],
    [],
    ["decode", "--greedy", "--beam", "--out", "x"],
    ["simulate", "--records", "many", "--out", "x"],
])
def test_usage_errors_exit_1(argv):
    with pytest.raises(SystemExit) as info:
        cli.main(argv)
    assert info.value.code == 1


def test_semantic_usage_errors_exit_1(tmp_path, pipeline):
    assert run("simulate", "--records", 0, "--out", tmp_path / "s") == 1
    assert run("simulate") == 1
    assert run("train-ngram", "--data", pipeline / "train", "--order", 12,
               "--out", tmp_path / "m") == 1
    assert run("decode", "--corpus", pipeline / "test", "--beam", "--out", tmp_path / "d") == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"simulate": {"recordz": 3}}))
    assert run("simulate", "--config", bad, "--out", tmp_path / "s") == 1


def test_data_errors_exit_2(tmp_path, pipeline, capsys):
    assert run("eval-ppl", "--model", tmp_path / "missing.slm", "--data", pipeline / "test") == 2
    broken = tmp_path / "broken.hyp"
    broken.write_text("== r\nW\nN9\n")
    assert run("eval-ppl", "--model", "uniform", "--data", broken) == 2
    assert "broken.hyp:3:" in capsys.readouterr().err
    model = tmp_path / "bad.slm"
    model.write_text("SLM-NGRAM v1 order=2 k=0.01 lambda=0.9\n∅ | 1 0 -1 0 0\n")
    assert run("eval-ppl", "--model", model, "--data", pipeline / "test") == 2
    (tmp_path / "junk.json").write_text("{not json")
    assert run("simulate", "--config", tmp_path / "junk.json", "--out", tmp_path / "s") == 2


def test_numeric_failure_exits_3(tmp_path, pipeline):
    # output bias drives P(REM) to exactly 0 after softmax underflow
    model = LstmSlm.zeros(1, 2, 2)
    model.out_b[:] = [0.0, -1e4, 0.0, 0.0, 0.0]
    path = tmp_path / "zero.slm"
    path.write_text(serialize_lstm(model))
    data = tmp_path / "rem.hyp"
    data.write_text("== r\nW\nREM\n")
    assert run("eval-ppl", "--model", path, "--data", data) == 3


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sleepmodel.cli", "eval-ppl", "--model",
                           "uniform", "--data", str(tmp_path / "nope.hyp")],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "nope.hyp" in proc.stderr
