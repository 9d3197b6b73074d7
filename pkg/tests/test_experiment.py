import math
import time

import numpy as np
import pytest

from hhefl import experiment as ex
from hhefl.bfv.params import BfvParams
from hhefl.errors import ConfigurationError, ParameterError, ProtocolError
from hhefl.experiment import (
    CSV_HEADER,
    ExperimentConfig,
    MetricsSink,
    RoundRecord,
    bench_hesd,
    linear_fit,
    load_config,
    measure_upload,
    parse_config,
    read_metrics,
    run_experiment,
    write_metrics,
)
from hhefl.pasta import PASTA4
from hhefl.protocol import Client, tpa_setup

BASE = dict(
    clients=3,
    train_clients=3,
    eval_clients=3,
    rounds=2,
    epochs=2,
    batch_size=16,
    learning_rate=0.05,
    samples=600,
    features=16,
    pasta="pasta-4",
    bfv="toy-1024x14",
    seed=5,
    timeout=60.0,
)


def config(mode="plain", **kw):
    return ExperimentConfig(mode=mode, **{**BASE, **kw})


@pytest.fixture(scope="module")
def bundle():
    return tpa_setup(3, BfvParams.preset("toy-1024x14"), PASTA4, seed=5, rotations=True)


# ---------------------------------------------------------------------------
# configuration


def test_parse_config_reads_keys_and_comments():
    cfg = parse_config(
        """
        # a comment
        mode = hhe
        clients = 6      # trailing comment
        learning_rate = 0.01
        pasta = pasta-4
        drop = 2:1, 3:0
        """
    )
    assert cfg.mode == "hhe" and cfg.clients == 6
    assert cfg.learning_rate == 0.01 and cfg.variant is PASTA4
    assert cfg.drop == ((2, 1), (3, 0))


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("clients = 4", "'mode' is required"),
        ("mode = hhe\nwidgets = 3", ":2: unknown key"),
        ("mode = hhe\nclients = many", ":2: bad value"),
        ("mode = hhe\njust words", ":2: expected"),
        ("mode = fancy", "mode must be one of"),
        ("mode = plain\npasta = pasta-9", "pasta-9"),
        ("mode = plain\ntrain_clients = 20", "more clients"),
    ],
)
def test_parse_config_errors(text, fragment):
    with pytest.raises((ConfigurationError, ParameterError), match=fragment):
        parse_config(text)


def test_constraint_is_checked_at_load():
    # 12 clients over 60000 samples with batch 8 gives 500 batches per client
    with pytest.raises(ConfigurationError, match="258"):
        parse_config("mode = hhe\nsamples = 60000\nbatch_size = 8\ntrain_clients = 4")


def test_seed_from_environment(tmp_path, monkeypatch):
    path = tmp_path / "run.cfg"
    path.write_text("mode = plain\nseed = 3\n")
    assert load_config(path).seed == 3
    monkeypatch.setenv("HHEFL_SEED", "77")
    assert load_config(path).seed == 77
    assert load_config(path, {"seed": 9}).seed == 9


# ---------------------------------------------------------------------------
# metrics


def test_metrics_csv_roundtrip(tmp_path):
    sink = MetricsSink()
    sink.add(1, 0, "train", bytes_up=10, t_train_ms=1.5)
    sink.add(1, 0, "train", bytes_up=5, t_hesd_ms=2.0)
    sink.add(1, -1, "global", accuracy=0.5, loss=1.25)
    sink.add(1, 2, "eval", bytes_down=7, accuracy=0.75, loss=0.5)
    rows = sink.records()
    assert [(r.phase, r.client_id) for r in rows] == [("train", 0), ("eval", 2), ("global", -1)]
    assert rows[0].bytes_up == 15 and rows[0].t_hesd_ms == 2.0
    path = write_metrics(rows, tmp_path / "out" / "metrics.csv")
    assert path.read_text().splitlines()[0] == ",".join(CSV_HEADER)
    back = read_metrics(path)
    assert back[1] == rows[1] and back[2] == rows[2]
    assert math.isnan(back[0].accuracy)


def test_metrics_rejects_foreign_csv(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ProtocolError):
        read_metrics(path)
    with pytest.raises(ParameterError):
        RoundRecord(1, 0, "train", bytes_up=-1)


def test_zero_rounds_returns_initial_model(tmp_path):
    result = run_experiment(config(rounds=0), out_dir=tmp_path)
    assert result.metrics == [] and result.records == []
    assert [w.shape for w in result.weights] == [(16, 10), (10,)]


# ---------------------------------------------------------------------------
# full runs


def _accuracy(result):
    return [(m.accuracy, m.loss) for m in result.metrics]


@pytest.fixture(scope="module")
def plain_run():
    return run_experiment(config("plain"))


def test_plain_run_records(plain_run, tmp_path):
    assert len(plain_run.metrics) == 2 and plain_run.dropped == []
    phases = {(r.round, r.phase) for r in plain_run.records}
    assert phases == {(r, p) for r in (1, 2) for p in ("train", "eval", "global")}
    train = [r for r in plain_run.records if r.phase == "train"]
    assert len(train) == 6 and all(r.bytes_up > 0 and r.bytes_down > 0 for r in train)
    assert 0.0 <= plain_run.final.accuracy <= 1.0


@pytest.mark.parametrize("mode", ["bfv", "hhe"])
def test_encrypted_modes_match_plain(plain_run, bundle, mode):
    result = run_experiment(config(mode), bundle=bundle)
    assert _accuracy(result) == _accuracy(plain_run)
    for a, b in zip(result.weights, plain_run.weights):
        np.testing.assert_array_equal(a, b)
    if mode == "hhe":
        assert all(r.t_hesd_ms > 0 for r in result.records if r.phase == "train")


def test_tcp_matches_inprocess(plain_run):
    result = run_experiment(config("plain", transport="tcp"))
    assert _accuracy(result) == _accuracy(plain_run)
    up = lambda res: sorted((r.round, r.client_id, r.bytes_up) for r in res.records if r.phase == "train")
    assert up(result) == up(plain_run)


def test_killed_client_is_dropped_for_good():
    result = run_experiment(config("plain", rounds=3, drop=((2, 1),)))
    assert result.dropped == [(2, 1)]
    assert len(result.metrics) == 3
    eval_clients = {r.round: set() for r in result.records}
    for r in result.records:
        if r.phase == "eval":
            eval_clients[r.round].add(r.client_id)
    assert eval_clients[1] == {0, 1, 2}
    assert eval_clients[3] == {0, 2}


def test_slow_client_misses_one_round_only(monkeypatch):
    original = Client.training_phase

    def sluggish(self, weights, round_index):
        if self.client_id == 0 and round_index == 1:
            time.sleep(3.0)
        return original(self, weights, round_index)

    monkeypatch.setattr(Client, "training_phase", sluggish)
    result = run_experiment(config("plain", rounds=3, timeout=2.0))
    assert set(result.dropped) == {(1, 0)}
    assert len(result.metrics) == 3
    late_evals = {r.round for r in result.records if r.phase == "eval" and r.client_id == 0}
    assert {2, 3} <= late_evals


def test_run_writes_metrics(tmp_path):
    run_experiment(config("plain", rounds=1), out_dir=tmp_path)
    rows = read_metrics(tmp_path / "metrics.csv")
    assert {r.phase for r in rows} == {"train", "eval", "global"}


def test_audit_sees_every_message():
    seen = []
    run_experiment(config("plain", rounds=1), audit=seen.append)
    kinds = [m.type.name for m in seen]
    assert kinds.count("KEYS") == 3
    assert kinds.count("UPDATE") == 3 and kinds.count("EVAL_REPORT") == 3


# ---------------------------------------------------------------------------
# benchmarks


@pytest.mark.parametrize("mode", ["plain", "bfv", "hhe"])
def test_measure_upload(bundle, mode):
    cfg = config(mode)
    ds = ex.load_dataset(cfg)
    client = ex.build_clients(cfg, bundle, ds)[0]
    init = ex.init_model(ex.model_sizes(cfg, ds), seed=0)
    update = client.training_phase(init, 1)
    sizes = measure_upload(update)
    p = 16 * 10 + 10
    t = PASTA4.t
    if mode == "plain":
        assert sizes.weights == 4 * t * -(-p // t) and sizes.key == 0
    elif mode == "hhe":
        assert sizes.weights == -(-p // t) * (8 + 8 * t)
        assert sizes.key > 0
    assert sizes.total > sizes.weights + sizes.key


def test_linear_fit():
    slope, intercept, r2 = linear_fit([1, 2, 3, 4], [3, 5, 7, 9])
    assert slope == pytest.approx(2) and intercept == pytest.approx(1) and r2 == pytest.approx(1)
    assert linear_fit([1, 2], [4, 4])[2] == 1.0


def test_bench_hesd_small():
    table = bench_hesd(PASTA4, [128, 256, 512], BfvParams.preset("toy-1024x14"), seed=1)
    assert [(r.params, r.chunks) for r in table.rows] == [(128, 4), (256, 8), (512, 16)]
    assert all(r.total_s > 0 for r in table.rows)
    assert table.slope_s_per_param > 0 and 0 <= table.r2 <= 1
    with pytest.raises(ParameterError):
        bench_hesd(PASTA4, [64, 32], BfvParams.preset("toy-1024x14"))
