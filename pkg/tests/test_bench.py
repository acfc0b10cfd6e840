import csv

import numpy as np
import pytest

from leapexit.bench import MODES, BenchResult, _batches, bench, speedup_table, timer_resolution_ns, write_bench
from leapexit.encoder import EncoderModel
from leapexit.errors import ContractError
from leapexit.exits import ExitPolicy, infer_corpus
from leapexit.metrics import exit_distribution

from conftest import random_batch, tiny_config


@pytest.fixture(scope="module")
def model12():
    return EncoderModel(tiny_config(num_layers=12, hidden_dim=32, ff_dim=64, max_seq_len=16, residual_init=0.05))


@pytest.fixture(scope="module")
def inputs():
    return random_batch(np.random.default_rng(0), 16, max_len=16, min_len=8)


def test_timer_resolution_positive():
    assert timer_resolution_ns(20) > 0


def test_batches_cycle_and_trim(rng):
    tokens, mask = random_batch(rng, 5, max_len=6, min_len=1)
    out = _batches(tokens, mask, 4)
    assert len(out) == 2 and all(len(t) == 4 for t, _ in out)
    assert all(t.shape[1] == m.sum(axis=1).max() for t, m in out)
    with pytest.raises(ContractError):
        _batches(tokens[:0], mask[:0], 4)


def test_no_exit_speedup_near_one(model12, inputs):
    _, rows = bench(model12, *inputs, ExitPolicy(strategy="none"), batch_sizes=(1,), warmup=5, iters=40,
                    modes=("full", "early_exit"))
    assert 0.7 < rows[0]["speedup"] < 1.3
    assert rows[0]["expected_layer"] == 12


def test_half_depth_exit_speeds_up(model12, inputs):
    # near-identity blocks with a low threshold force every sample out at layer 6
    pol = ExitPolicy(theta=0.5, l_min=6)
    _, rows = bench(model12, *inputs, pol, batch_sizes=(1,), warmup=5, iters=40, modes=("full", "early_exit"))
    assert rows[0]["expected_layer"] == 6
    # theory is 12 / 6 = 2; 40 timed iterations leave about 10% noise
    assert 1.2 < rows[0]["speedup"] < 2.2
    assert rows[0]["realized_fraction"] == pytest.approx(rows[0]["speedup"] / 2.0)


def test_expected_layer_matches_metrics(model12, inputs):
    pol = ExitPolicy(theta=0.999, l_min=3)
    results, _ = bench(model12, *inputs, pol, batch_sizes=(4,), warmup=1, iters=2)
    want = exit_distribution(infer_corpus(model12, *inputs, pol), 12).expected_layers
    assert all(r.expected_exit_layer == want for r in results)
    assert [r.mode for r in results] == list(MODES)


def test_speedup_table_hand_values():
    rs = [BenchResult(1, "full", 10.0, 1.0, 1, 1, 6.0), BenchResult(1, "early_exit", 6.0, 0.5, 1, 1, 6.0),
          BenchResult(8, "full", 20.0, 1.0, 1, 1, 6.0)]
    rows = speedup_table(rs, 12)
    assert len(rows) == 1
    r = rows[0]
    assert r["speedup"] == pytest.approx(10 / 6)
    assert r["layer_reduction"] == pytest.approx(2.0)
    assert r["realized_fraction"] == pytest.approx(10 / 12)
    assert np.isnan(r["monitored_ms"])


def test_write_bench(tmp_path):
    rs = [BenchResult(1, "full", 10.0, 1.0, 1, 1, 6.0), BenchResult(1, "early_exit", 6.0, 0.5, 1, 1, 6.0)]
    write_bench(rs, speedup_table(rs, 12), tmp_path / "raw.csv", tmp_path / "table.csv")
    assert len(list(csv.DictReader(open(tmp_path / "raw.csv")))) == 2
    assert list(csv.DictReader(open(tmp_path / "table.csv")))[0]["speedup"] == "1.666667"
