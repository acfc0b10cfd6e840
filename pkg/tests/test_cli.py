import csv
import json
import os

import pytest

from leapexit import experiment as X
from leapexit.cli import main
from leapexit.errors import ConfigError

TINY = {
    "data": {"n_sentences": 240, "n_pairs": 40, "vocab_size": 40, "num_topics": 4, "min_len": 4, "max_len": 8},
    "teacher": {"num_layers": 4, "hidden_dim": 12, "num_heads": 2, "ff_dim": 16, "vocab_size": 40,
                "max_seq_len": 8},
    "student": {"num_layers": 4, "hidden_dim": 8, "num_heads": 2, "ff_dim": 12, "vocab_size": 40,
                "max_seq_len": 8},
    "teacher_train": {"epochs": 1, "lr": 3e-3, "batch_size": 16},
    "train": {"epochs": 1, "batch_size": 16, "betas": [0.0, 0.4], "weights": {"late_window": None}},
    "exit": {"l_min": 2},
    "thetas": [0.5, 0.9, 0.99],
    "pareto_ref_layer": 2,
    "viability": {"k": 3},
    "diagnostics": {"n_samples": 30, "overhead_iters": 2},
    "bench": {"batch_sizes": [1, 4], "warmup": 1, "iters": 2, "n_samples": 8},
}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    base = ["--config", str(cfg), "--output-dir", str(d / "out")]
    assert main(["gen-data"] + base) == 0
    assert main(["train-teacher"] + base) == 0
    assert main(["distill", "--leap"] + base) == 0
    return d / "out", base


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            X.load_config(overrides={"trian": {}})

    def test_unknown_nested_key(self):
        with pytest.raises(ConfigError):
            X.load_config(overrides={"train": {"learning_rate": 1}})

    def test_unsorted_thetas(self):
        with pytest.raises(ConfigError):
            X.load_config(overrides={"thetas": [0.9, 0.5]})

    def test_missing_key_named(self):
        with pytest.raises(ConfigError, match="exit"):
            X.require({"exit": None}, "exit")

    def test_bad_json_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["gen-data", "--config", str(bad), "--output-dir", str(tmp_path)]) == 2
        assert "error" in capsys.readouterr().err

    def test_env_overrides_output(self, tmp_path, monkeypatch):
        monkeypatch.setenv(X.OUTPUT_ENV, str(tmp_path / "env"))
        assert X.output_dir(X.load_config()) == str(tmp_path / "env")

    def test_flags_override(self):
        cfg = X.load_config(overrides={"exit": {"theta": 0.9}})
        assert X.policy(cfg).theta == 0.9 and X.policy(cfg).l_min == 6


class TestCommands:
    def test_outputs_exist(self, run_dir):
        out, _ = run_dir
        for name in ("teacher.ckpt", "leap.ckpt", "leap_log.csv", "data/test/pairs.csv", "distill.meta.json"):
            assert os.path.exists(out / name)

    def test_pareto_rows(self, run_dir):
        out, base = run_dir
        assert main(["pareto", "--checkpoint", str(out / "leap.ckpt")] + base) == 0
        r = rows(out / "pareto_leap.csv")
        assert [float(x["theta"]) for x in r] == [0.5, 0.9, 0.99]

    def test_evaluate(self, run_dir, capsys):
        out, base = run_dir
        assert main(["evaluate", "--checkpoint", str(out / "leap.ckpt")] + base) == 0
        ev = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert 1.0 <= ev["expected_layers"] <= 4.0
        assert os.path.exists(out / "exits_leap.jsonl")

    def test_evaluate_inputs(self, run_dir, tmp_path):
        out, base = run_dir
        inp = tmp_path / "in.jsonl"
        inp.write_text("\n".join(json.dumps({"tokens": [1, 2, 3], "text_id": f"q{i}"}) for i in range(3)))
        assert main(["evaluate", "--checkpoint", str(out / "leap.ckpt"), "--inputs", str(inp)] + base) == 0
        recs = [json.loads(l) for l in open(out / "exits_leap.jsonl")]
        assert [r["id"] for r in recs] == ["q0", "q1", "q2"]

    def test_diagnose_exit_code(self, run_dir):
        out, base = run_dir
        code = main(["diagnose", "--checkpoint", str(out / "leap.ckpt"), "--strategy", "none",
                     "--overhead-iters", "0"] + base)
        assert code == 1
        rep = json.load(open(out / "diagnostics_leap.json"))
        assert rep["zero_exit"]["verdict"] == "incompatible"

    def test_bench(self, run_dir):
        out, base = run_dir
        assert main(["bench", "--checkpoint", str(out / "leap.ckpt")] + base) == 0
        assert [int(r["batch_size"]) for r in rows(out / "bench.csv")] == [1, 4]

    def test_beta_sweep(self, run_dir):
        out, base = run_dir
        assert main(["beta-sweep"] + base) == 0
        assert [float(r["beta"]) for r in rows(out / "beta_sweep.csv")] == [0.0, 0.4]

    def test_missing_checkpoint(self, run_dir):
        out, base = run_dir
        assert main(["pareto", "--checkpoint", str(out / "nope.ckpt")] + base) == 2


def test_reproduce_and_plot(tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    base = ["--config", str(cfg), "--output-dir", str(tmp_path / "out")]
    assert main(["reproduce", "--with-ablation"] + base) == 0
    out = tmp_path / "out"
    summary = json.load(open(out / "summary.json"))
    assert len(summary["gates"]) == 9
    assert len(rows(out / "ablation.csv")) == 4
    assert len(rows(out / "layer_comparison.csv")) == 4
    first = open(out / "pareto_leap.csv").read()
    # a rerun reuses checkpoints and rewrites byte-identical tables
    assert main(["reproduce"] + base + ["--no-bench"]) == 0
    assert open(out / "pareto_leap.csv").read() == first
    assert main(["plot"] + base) == 0
    assert (out / "similarity_curves.svg").read_text().startswith("<svg")
