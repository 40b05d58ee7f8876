import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

import ExperimentApp
from sim_data import dataset as ds
from transfer import experiment, net
from transfer.experiment import (
    AVG, ORACLE, ReportRow, bar_data, cmd_eval, cmd_generate, cmd_oracle_eval, cmd_report, cmd_train,
    load_experiment_config, parse_experiment_config, summarize_rows,
)
from transfer.train import Regime
from utils.config import parse_flat, read_flat_file
from utils.errors import ConfigError, EmptyInputError

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

SMOKE = """
experiment.seed = 7
experiment.output_dir = {out}
experiment.name = smoke
experiment.regimes = SimOnly, SimPlusRealMMD, SimPlusRealPairwise

scene.clutter_count_range = 1, 2

dataset.scenes = 6
dataset.actions_per_scene = 4
dataset.pairs = 8
dataset.test_scenes = 3
dataset.test_actions_per_scene = 4

train.epochs = 2
train.batch_size = 4
train.max_steps_per_epoch = 2

architecture.dense = 8, 8
architecture.hook_width = 16

controller.num_candidates = 40
controller.iterations = 2
controller.trials = 2
"""


def write_config(tmp_path, out="run", extra=""):
    path = tmp_path / "smoke.cfg"
    path.write_text(SMOKE.format(out=tmp_path / out) + extra, encoding="utf-8")
    return path


@pytest.fixture
def smoke_config(tmp_path):
    return load_experiment_config(write_config(tmp_path))


@pytest.fixture
def generated(smoke_config):
    cmd_generate(smoke_config)
    return smoke_config


def make_row(regime, test_loss, distance, success, seed=1):
    return ReportRow(regime=regime, test_loss=test_loss, mean_capped_distance=distance, success_rate=success,
                     seed=seed, dataset_fingerprint="abc").to_frame()


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

def test_smoke_config_loads(smoke_config, tmp_path):
    assert smoke_config.seed == 7
    assert smoke_config.output_dir == tmp_path / "run"
    assert smoke_config.regimes == [Regime.SIM_ONLY, Regime.SIM_PLUS_REAL_MMD, Regime.SIM_PLUS_REAL_PAIRWISE]
    assert smoke_config.architecture.dense == (8, 8)
    assert smoke_config.dataset.pairs == 8


def test_flat_round_trip(smoke_config):
    assert parse_experiment_config(smoke_config.to_flat()) == smoke_config


def test_overrides_replace_seed_and_output(tmp_path):
    config = load_experiment_config(write_config(tmp_path), seed=11, output_dir=tmp_path / "other")
    assert config.seed == 11
    assert config.output_dir == tmp_path / "other"


@pytest.mark.parametrize("extra, key", [
    ("scene.bogus = 1\n", "scene.bogus"),
    ("train.seed = 3\n", "train.seed"),
    ("train.regime = SimOnly\n", "train.regime"),
    ("robot.speed = 2\n", "robot.speed"),
    ("dataset.workers = many\n", "dataset.workers"),
])
def test_bad_config_keys_are_named(tmp_path, extra, key):
    with pytest.raises(ConfigError) as excinfo:
        load_experiment_config(write_config(tmp_path, extra=extra))
    assert key in str(excinfo.value)


def test_missing_seed_is_rejected():
    with pytest.raises(ConfigError, match="experiment.seed"):
        parse_experiment_config(parse_flat("experiment.output_dir = out\n"))


def test_train_config_derives_seed_from_master(smoke_config):
    a = smoke_config.train_config(Regime.SIM_ONLY)
    b = smoke_config.train_config(Regime.SIM_PLUS_REAL_PAIRWISE)
    assert a.seed == b.seed
    assert a.seed != smoke_config.with_overrides(seed=8).train_config(Regime.SIM_ONLY).seed
    assert b.regime is Regime.SIM_PLUS_REAL_PAIRWISE


def test_shipped_configs_parse():
    for name in ("desk.cfg", "smoke.cfg", "ablation.cfg"):
        config = parse_experiment_config(read_flat_file(CONFIG_DIR / name))
        assert config.seed >= 0


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def test_generate_writes_every_dataset(generated):
    source = ds.load(generated.data_path("source"))
    paired = ds.load(generated.data_path("paired"))
    paired_clutter = ds.load(generated.data_path("paired_clutter"))
    test = ds.load(generated.data_path("test"))
    assert len(source) == 6 * 4
    assert len(paired) == paired.num_pairs == 8
    assert len(paired_clutter) == 8
    assert len(test) == 3 * 4
    assert (test.domains == ds.TARGET).all()
    # Same states and actions; only the target clutter differs
    np.testing.assert_array_equal(paired.labels, paired_clutter.labels)
    assert parse_experiment_config(read_flat_file(generated.path("config.cfg"))) == generated


def test_generate_is_reproducible(generated, tmp_path):
    again = generated.with_overrides(output_dir=tmp_path / "again")
    cmd_generate(again)
    for name in experiment.DATA_FILES:
        assert generated.data_path(name).read_bytes() == again.data_path(name).read_bytes()


def test_train_and_eval_write_their_outputs(generated):
    result = cmd_train(generated, Regime.SIM_PLUS_REAL_PAIRWISE)
    assert result["checkpoint"].exists()
    history = pd.read_csv(result["history"])
    assert len(history) == generated.train.epochs
    params, arch = net.load_checkpoint(result["checkpoint"])
    assert arch == generated.architecture

    row = cmd_eval(generated, Regime.SIM_PLUS_REAL_PAIRWISE)
    assert row.regime == "SimPlusRealPairwise"
    assert row.seed == 7
    assert row.test_loss >= 0.0
    assert 0.0 <= row.mean_capped_distance <= generated.controller.distance_cap
    assert len(row.dataset_fingerprint) == 16
    assert generated.path("rows", "SimPlusRealPairwise.csv").exists()
    trajectories = pd.read_csv(generated.path("logs", "SimPlusRealPairwise_trajectories.csv"))
    assert len(trajectories) == generated.controller.trials * (generated.controller.iterations + 1)
    report = json.loads(generated.path("reports", "SimPlusRealPairwise.json").read_text())
    assert report["controller_metrics"]["Trials"] == generated.controller.trials


def test_oracle_eval_has_zero_test_loss(generated):
    row = cmd_oracle_eval(generated)
    assert row.regime == ORACLE
    assert row.test_loss == 0.0


def test_summary_of_one_row_repeats_it_as_average():
    summary = summarize_rows(make_row("SimOnly", 0.02, 0.01, 0.5))
    assert summary["regime"].tolist() == ["SimOnly", AVG]
    avg = summary.iloc[-1]
    assert avg["test_loss"] == 0.02
    assert avg["mean_capped_distance"] == 0.01
    assert avg["success_rate"] == 0.5


def test_summary_orders_regimes_and_skips_oracle_in_average():
    rows = pd.concat([
        make_row(ORACLE, 0.0, 0.001, 1.0),
        make_row("SimPlusRealPairwise", 0.01, 0.012, 0.5),
        make_row("SimOnly", 0.03, 0.02, 0.0),
    ], ignore_index=True)
    summary = summarize_rows(rows)
    assert summary["regime"].tolist() == ["SimOnly", "SimPlusRealPairwise", ORACLE, AVG]
    avg = summary.iloc[-1]
    assert avg["test_loss"] == pytest.approx(0.02)
    assert avg["mean_capped_distance"] == pytest.approx(0.016)
    assert avg["success_rate"] == pytest.approx(0.25)


def test_empty_report_raises(tmp_path):
    with pytest.raises(EmptyInputError):
        summarize_rows(pd.DataFrame(columns=["regime", "test_loss"]))
    with pytest.raises(EmptyInputError):
        experiment.collect_rows(tmp_path)


def test_bar_data_averages_over_seeds():
    rows = pd.concat([
        make_row("SimOnly", 0.02, 0.01, 0.5, seed=1),
        make_row("SimOnly", 0.04, 0.03, 1.0, seed=2),
    ], ignore_index=True)
    bars = bar_data(rows)
    loss = bars[(bars["metric"] == "test_loss") & (bars["regime"] == "SimOnly")].iloc[0]
    assert loss["value"] == pytest.approx(0.03)
    assert loss["count"] == 2
    assert loss["stderr"] == pytest.approx(np.std([0.02, 0.04], ddof=1) / np.sqrt(2))
    assert set(bars["metric"]) == set(experiment.REPORT_METRICS)


def test_report_writes_summary_bars_and_charts(tmp_path):
    rows = pd.concat([make_row("SimOnly", 0.02, 0.01, 0.5), make_row(ORACLE, 0.0, 0.0, 1.0)], ignore_index=True)
    history = pd.DataFrame({"epoch": [1, 2], "total": [0.05, 0.03], "test_loss": [0.06, 0.04]})
    experiment.write_csv(history, tmp_path / "logs" / "SimOnly_history.csv")
    paths = cmd_report(rows, tmp_path, with_charts=True)
    assert pd.read_csv(paths["summary"])["regime"].tolist() == ["SimOnly", ORACLE, AVG]
    assert ORACLE not in pd.read_csv(paths["bars"])["regime"].tolist()
    assert paths["chart_test_loss"].read_text(encoding="utf-8").lstrip().startswith("<html")
    assert paths["chart_history"].exists()


def test_pipeline_is_deterministic(tmp_path):
    config = load_experiment_config(write_config(tmp_path))
    first = experiment.pipeline(config.with_overrides(output_dir=tmp_path / "a"))
    second = experiment.pipeline(config.with_overrides(output_dir=tmp_path / "b"))
    assert first["summary"].read_bytes() == second["summary"].read_bytes()
    summary = pd.read_csv(first["summary"])
    assert summary["regime"].tolist() == ["SimOnly", "SimPlusRealMMD", "SimPlusRealPairwise", ORACLE, AVG]


def test_report_after_pipeline_finds_rows_of_every_seed(tmp_path):
    cfg = write_config(tmp_path)
    assert ExperimentApp.main(["pipeline", "--config", str(cfg), "--seeds", "7", "8", "--quiet"]) == 0
    first = pd.read_csv(tmp_path / "run" / "summary.csv")
    (tmp_path / "run" / "summary.csv").unlink()
    assert ExperimentApp.main(["report", "--config", str(cfg), "--quiet"]) == 0
    again = pd.read_csv(tmp_path / "run" / "summary.csv")
    assert again["regime"].tolist() == first["regime"].tolist()
    np.testing.assert_allclose(again["test_loss"], first["test_loss"], rtol=1e-9)
    assert len(experiment.collect_rows(tmp_path / "run")) == 2 * 4


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------

def test_cli_generate_then_train(tmp_path):
    cfg = str(write_config(tmp_path))
    assert ExperimentApp.main(["generate", "--config", cfg, "--quiet"]) == 0
    assert ExperimentApp.main(["train", "--config", cfg, "--regime", "SimOnly", "--quiet"]) == 0
    assert (tmp_path / "run" / "checkpoints" / "SimOnly.psnn").exists()


def test_cli_reports_errors_with_exit_code_one(tmp_path):
    cfg = str(write_config(tmp_path))
    assert ExperimentApp.main(["eval", "--config", cfg, "--regime", "SimOnly", "--quiet"]) == 1
    bad = str(write_config(tmp_path, extra="scene.bogus = 1\n"))
    assert ExperimentApp.main(["generate", "--config", bad, "--quiet"]) == 1


def test_cli_rejects_unknown_regime(tmp_path):
    with pytest.raises(SystemExit):
        ExperimentApp.main(["train", "--config", str(write_config(tmp_path)), "--regime", "Nope"])


def test_cli_corrupt_dataset_exits_with_code_one(tmp_path):
    cfg = str(write_config(tmp_path))
    assert ExperimentApp.main(["generate", "--config", cfg, "--quiet"]) == 0
    source = tmp_path / "run" / "data" / "source.psds"
    buf = bytearray(source.read_bytes())
    buf[10] = 0xFF
    source.write_bytes(bytes(buf))
    assert ExperimentApp.main(["train", "--config", cfg, "--regime", "SimOnly", "--quiet"]) == 1


def test_cli_generate_dumps_pgm_images(tmp_path):
    cfg = str(write_config(tmp_path))
    assert ExperimentApp.main(["generate", "--config", cfg, "--dump-pgm", "2", "--quiet"]) == 0
    dumps = sorted(p.name for p in (tmp_path / "run" / "pgm").glob("*.pgm"))
    assert dumps == sorted(f"{name}_{i:04d}.pgm" for name in experiment.DATA_FILES for i in range(2))
    test = ds.load(tmp_path / "run" / "data" / "test.psds")
    raw = (tmp_path / "run" / "pgm" / "test_0000.pgm").read_bytes()
    size = test.images.shape[1]
    assert raw.startswith(f"P5\n{size} {size}\n65535\n".encode("ascii"))
    pixels = np.frombuffer(raw[-2 * size * size:], dtype=">u2").reshape(size, size)
    np.testing.assert_array_equal(pixels, np.clip(np.round(test.images[0] * 1000.0), 0, 65535))
