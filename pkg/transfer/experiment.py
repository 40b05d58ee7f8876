"""
Experiment runner: generate datasets, train regimes, evaluate checkpoints
and emit CSV/JSON reports. Everything derives from one master seed.

Output layout under experiment.output_dir:
    data/        source, paired, paired_clutter and test datasets
    checkpoints/ one .psnn per regime
    logs/        per-epoch histories and controller trajectories
    rows/        one ReportRow CSV per evaluated regime
    reports/     rounded JSON metrics per evaluated regime
    pgm/         first images of each dataset (generate --dump-pgm N)
    summary.csv, bars.csv, charts/
"""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from sim_data import dataset as ds
from sim_data.depthscene import Camera, DomainModel, SceneConfig, save_pgm
from transfer import charts, metrics, net
from transfer.control import ControllerConfig, Environment, NetworkPredictor, OraclePredictor, evaluate
from transfer.train import Regime, TrainConfig, TrainingData, evaluate_test_loss, train
from utils.config import build_section, dump_flat, group_sections, read_flat_file, section_to_flat
from utils.errors import ConfigError, DatasetIOError, EmptyInputError
from utils.seeding import derive_seed

logger = logging.getLogger(__name__)

ORACLE = "Oracle"
AVG = "AVG"
AVG_HOLDOUT = "AVG (holdout only)"
REPORT_ORDER = [r.value for r in Regime] + [ORACLE]
FLOAT_FORMAT = "%.10g"
REPORT_METRICS = ("test_loss", "mean_capped_distance", "success_rate")

DATA_FILES = {
    "source": "source.psds",
    "paired": "paired.psds",
    "paired_clutter": "paired_clutter.psds",
    "test": "test.psds",
}

# Which dataset files each regime trains on
REGIME_DATA = {
    Regime.REAL_ONLY_NO_CLUTTER: {"paired": "paired"},
    Regime.REAL_ONLY_CLUTTER: {"paired": "paired_clutter"},
    Regime.SIM_ONLY: {"source": "source"},
    Regime.SIM_PLUS_REAL_MMD: {"source": "source", "unlabeled_target": "paired_clutter"},
    Regime.SIM_PLUS_REAL_NO_PAIRWISE: {"source": "source", "paired": "paired"},
    Regime.SIM_PLUS_REAL_PAIRWISE: {"source": "source", "paired": "paired"},
}

# Set per run from experiment.seed and experiment.regimes, never read from a file
DERIVED_TRAIN_KEYS = ("train.seed", "train.regime")

ABLATION_PAIRINGS = [(True, False), (True, True), (False, False), (False, True)]
ABLATION_REGIMES = [Regime.SIM_PLUS_REAL_NO_PAIRWISE, Regime.SIM_PLUS_REAL_PAIRWISE]


@dataclass(frozen=True)
class ExperimentSection:
    seed: int
    output_dir: str
    name: str = "experiment"
    regimes: tuple[str, ...] = tuple(r.value for r in Regime)

    def __post_init__(self):
        for regime in self.regimes:
            Regime(regime)


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection
    scene: SceneConfig = field(default_factory=SceneConfig)
    camera: Camera = field(default_factory=Camera)
    source_domain: DomainModel = field(default_factory=DomainModel)
    target_domain: DomainModel = field(default_factory=DomainModel.default_target)
    dataset: ds.DatasetConfig = field(default_factory=ds.DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    architecture: net.Architecture = field(default_factory=net.Architecture)
    controller: ControllerConfig = field(default_factory=ControllerConfig)

    SECTIONS = {
        "experiment": ExperimentSection, "scene": SceneConfig, "camera": Camera,
        "source_domain": DomainModel, "target_domain": DomainModel, "dataset": ds.DatasetConfig,
        "train": TrainConfig, "architecture": net.Architecture, "controller": ControllerConfig,
    }

    @property
    def seed(self) -> int:
        return self.experiment.seed

    @property
    def output_dir(self) -> Path:
        return Path(self.experiment.output_dir)

    @property
    def regimes(self) -> list:
        return [Regime(r) for r in self.experiment.regimes]

    def path(self, *parts) -> Path:
        return self.output_dir.joinpath(*parts)

    def data_path(self, name: str) -> Path:
        return self.path("data", DATA_FILES[name])

    def generation_config(self, **dataset_changes) -> ds.GenerationConfig:
        return ds.GenerationConfig(
            dataset=replace(self.dataset, **dataset_changes),
            scene=self.scene, camera=self.camera,
            source_domain=self.source_domain, target_domain=self.target_domain,
        )

    def test_scene(self) -> SceneConfig:
        # Test bottles cover the training classes plus the held-out ones
        if self.scene.holdout_classes:
            return self.scene.for_classes(self.scene.bottle_classes + self.scene.holdout_classes)
        return self.scene

    def train_config(self, regime: Regime) -> TrainConfig:
        # One init seed for every regime, batch order differs by regime
        return replace(self.train, regime=Regime(regime), seed=derive_seed(self.seed, "train"))

    def environment(self) -> Environment:
        return Environment(scene=self.test_scene(), camera=self.camera, domain=self.target_domain, with_clutter=True)

    def with_overrides(self, seed=None, output_dir=None) -> "ExperimentConfig":
        changes = {}
        if seed is not None:
            changes["seed"] = int(seed)
        if output_dir is not None:
            changes["output_dir"] = str(output_dir)
        return replace(self, experiment=replace(self.experiment, **changes)) if changes else self

    def to_flat(self) -> dict:
        flat = {}
        for section in self.SECTIONS:
            flat.update(section_to_flat(getattr(self, section), section))
        for key in DERIVED_TRAIN_KEYS:
            flat.pop(key)
        return flat


def parse_experiment_config(flat: dict) -> ExperimentConfig:
    sections = group_sections(flat)
    for name in sections:
        if name not in ExperimentConfig.SECTIONS:
            raise ConfigError(f"unknown config section '{name}' (key '{name}.{next(iter(sections[name]))}')")
    for key in DERIVED_TRAIN_KEYS:
        if key in flat:
            raise ConfigError(f"unknown config key '{key}': set through experiment.seed and experiment.regimes")
    kwargs = {}
    for name, cls in ExperimentConfig.SECTIONS.items():
        required = ("seed", "output_dir") if name == "experiment" else ()
        kwargs[name] = build_section(cls, sections.get(name, {}), name, required=required)
    return ExperimentConfig(**kwargs)


def load_experiment_config(path, seed=None, output_dir=None) -> ExperimentConfig:
    config = parse_experiment_config(read_flat_file(path)).with_overrides(seed, output_dir)
    logger.info("Loaded config %s (seed %d, output %s)", path, config.seed, config.output_dir)
    return config


# ---------------------------------------------------------------------------
# Small IO helpers
# ---------------------------------------------------------------------------

def write_csv(frame: pd.DataFrame, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def read_csv(path: Path) -> pd.DataFrame:
    try:
        return pd.read_csv(path)
    except OSError as e:
        raise DatasetIOError(f"cannot read {path}: {e}") from e


def write_json(payload: dict, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=4) + "\n", encoding="utf-8")


def file_fingerprint(*paths) -> str:
    digest = hashlib.sha256()
    for path in paths:
        try:
            digest.update(Path(path).read_bytes())
        except OSError as e:
            raise DatasetIOError(f"cannot fingerprint {path}: {e}") from e
    return digest.hexdigest()[:16]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def dump_pgm_images(dataset: ds.Dataset, name: str, count: int, out_dir: Path) -> list:
    """Write the first `count` images of a dataset as 16-bit PGM files."""
    paths = []
    for i in range(min(count, len(dataset.images))):
        path = out_dir / f"{name}_{i:04d}.pgm"
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            save_pgm(dataset.images[i], path)
        except OSError as e:
            raise DatasetIOError(f"cannot write {path}: {e}") from e
        paths.append(path)
    return paths


def cmd_generate(config: ExperimentConfig, dump_pgm: int = 0) -> dict:
    """
    Write the source, paired (both target clutter settings) and test
    datasets; with dump_pgm > 0 also dump that many images of each.
    """
    seed = config.seed
    jobs = {
        "source": (ds.generate_source_dataset, config.generation_config(), derive_seed(seed, "source")),
        "paired": (ds.generate_paired_dataset, config.generation_config(), derive_seed(seed, "paired")),
        "paired_clutter": (ds.generate_paired_dataset, config.generation_config(target_clutter=True),
                           derive_seed(seed, "paired")),
        "test": (ds.generate_target_dataset, replace(config.generation_config(), scene=config.test_scene()),
                 derive_seed(seed, "test")),
    }
    paths = {}
    for name, (generate, gen_config, sub_seed) in jobs.items():
        paths[name] = config.data_path(name)
        data = generate(gen_config, sub_seed)
        ds.save(data, paths[name])
        if dump_pgm:
            dump_pgm_images(data, name, dump_pgm, config.path("pgm"))
    config.path("config.cfg").parent.mkdir(parents=True, exist_ok=True)
    config.path("config.cfg").write_text(dump_flat(config.to_flat()), encoding="utf-8")
    return paths


def training_data(config: ExperimentConfig, regime: Regime) -> TrainingData:
    loaded = {role: ds.load(config.data_path(name)) for role, name in REGIME_DATA[Regime(regime)].items()}
    return TrainingData(test_sets={"test": ds.load(config.data_path("test"))}, **loaded)


def cmd_train(config: ExperimentConfig, regime) -> dict:
    """Train one regime; writes its checkpoint and per-epoch history CSV."""
    regime = Regime(regime)
    report = train(config.train_config(regime), training_data(config, regime), config.architecture)
    checkpoint = config.path("checkpoints", f"{regime.value}.psnn")
    history = config.path("logs", f"{regime.value}_history.csv")
    net.save_checkpoint(report.params, report.arch, checkpoint)
    write_csv(report.history, history)
    return {"report": report, "checkpoint": checkpoint, "history": history}


@dataclass
class ReportRow:
    regime: str
    test_loss: float
    mean_capped_distance: float
    success_rate: float
    seed: int
    dataset_fingerprint: str
    stderr_capped_distance: float = 0.0
    test_loss_holdout: float = float("nan")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(self)])


def _holdout_rows(config: ExperimentConfig, test: ds.Dataset) -> np.ndarray:
    holdout = np.asarray(config.scene.holdout_classes, dtype=np.float64)
    return np.flatnonzero(np.isin(test.categories, holdout))


def _finish_eval(config: ExperimentConfig, name: str, test_loss: float, holdout_loss: float, summary,
                 fingerprint: str) -> ReportRow:
    row = ReportRow(
        regime=name,
        test_loss=test_loss,
        mean_capped_distance=summary.mean_capped_distance,
        success_rate=summary.success_rate,
        seed=config.seed,
        dataset_fingerprint=fingerprint,
        stderr_capped_distance=summary.stderr_capped_distance,
        test_loss_holdout=holdout_loss,
    )
    write_csv(row.to_frame(), config.path("rows", f"{name}.csv"))
    write_csv(summary.trajectory_frame(), config.path("logs", f"{name}_trajectories.csv"))
    payload = {"regime": name, "seed": config.seed, "test_loss": round(test_loss, 6),
               "controller_metrics": metrics.get_all_metrics(summary.trial_frame(), config.controller.distance_cap)}
    write_json(payload, config.path("reports", f"{name}.json"))
    return row


def cmd_eval(config: ExperimentConfig, regime, checkpoint=None) -> ReportRow:
    """Test loss and closed-loop controller metrics of one trained regime."""
    regime = Regime(regime)
    checkpoint = Path(checkpoint) if checkpoint else config.path("checkpoints", f"{regime.value}.psnn")
    params, arch = net.load_checkpoint(checkpoint)
    test = ds.load(config.data_path("test"))
    test_loss = evaluate_test_loss(params, test, arch)
    holdout = _holdout_rows(config, test)
    holdout_loss = evaluate_test_loss(params, test, arch, holdout) if len(holdout) else float("nan")
    summary = evaluate(NetworkPredictor(params, arch), config.environment(), config.controller,
                       derive_seed(config.seed, "eval"))
    used = [config.data_path(name) for name in sorted(set(REGIME_DATA[regime].values()) | {"test"})]
    return _finish_eval(config, regime.value, test_loss, holdout_loss, summary, file_fingerprint(*used))


def cmd_oracle_eval(config: ExperimentConfig) -> ReportRow:
    """Controller driven by the true distance function (upper bound)."""
    summary = evaluate(OraclePredictor(), config.environment(), config.controller, derive_seed(config.seed, "eval"))
    test_path = config.data_path("test")
    fingerprint = file_fingerprint(test_path) if test_path.exists() else ""
    return _finish_eval(config, ORACLE, 0.0, float("nan"), summary, fingerprint)


def _order_key(regime: str) -> int:
    return REPORT_ORDER.index(regime) if regime in REPORT_ORDER else len(REPORT_ORDER)


def summarize_rows(rows: pd.DataFrame) -> pd.DataFrame:
    """Rows in regime order (then seed), followed by an AVG row over the non-oracle rows."""
    if rows is None or len(rows) == 0:
        raise EmptyInputError("report needs at least one evaluated row")
    rows = rows.copy()
    rows["_order"] = rows["regime"].map(_order_key)
    rows = rows.sort_values(["_order", "regime", "seed"], kind="mergesort").drop(columns="_order")
    numeric = rows.select_dtypes(include="number").columns.drop("seed", errors="ignore")
    measured = rows[rows["regime"] != ORACLE]
    if measured.empty:
        measured = rows
    avg = {col: measured[col].mean() for col in numeric}
    avg.update({"regime": AVG, "seed": -1, "dataset_fingerprint": ""})
    return pd.concat([rows, pd.DataFrame([avg])], ignore_index=True)[list(rows.columns)]


def bar_data(rows: pd.DataFrame) -> pd.DataFrame:
    """Long-format bar-chart data: per regime mean (and std error) over seeds, plus AVG."""
    records = []
    for metric in REPORT_METRICS:
        per_regime = rows.groupby("regime", sort=False)[metric]
        regimes = sorted(per_regime.groups, key=lambda r: (_order_key(r), r))
        for regime in regimes:
            values = per_regime.get_group(regime)
            stderr = values.std(ddof=1) / np.sqrt(len(values)) if len(values) > 1 else 0.0
            records.append({"metric": metric, "regime": regime, "group": "regime",
                            "value": values.mean(), "stderr": stderr, "count": len(values)})
        records.append({"metric": metric, "regime": AVG, "group": AVG,
                        "value": rows[metric].mean(), "stderr": 0.0, "count": len(rows)})
    return pd.DataFrame(records)


def cmd_report(rows: pd.DataFrame, output_dir, with_charts: bool = False) -> dict:
    """Write summary.csv and bars.csv (and optional HTML charts)."""
    output_dir = Path(output_dir)
    summary = summarize_rows(rows)
    measured = rows[rows["regime"] != ORACLE] if (rows["regime"] != ORACLE).any() else rows
    bars = bar_data(measured)
    paths = {"summary": output_dir / "summary.csv", "bars": output_dir / "bars.csv"}
    write_csv(summary, paths["summary"])
    write_csv(bars, paths["bars"])
    if with_charts:
        for metric in REPORT_METRICS:
            path = output_dir / "charts" / f"{metric}.html"
            path.parent.mkdir(parents=True, exist_ok=True)
            charts.plot_metric_bars(bars, metric).write_html(str(path))
            paths[f"chart_{metric}"] = path
        # First history found per regime (lowest seed directory)
        histories = {}
        for path in sorted(output_dir.glob("**/logs/*_history.csv")):
            histories.setdefault(path.stem.removesuffix("_history"), read_csv(path))
        if histories:
            paths["chart_history"] = output_dir / "charts" / "loss_history.html"
            paths["chart_history"].parent.mkdir(parents=True, exist_ok=True)
            charts.plot_loss_history(histories).write_html(str(paths["chart_history"]))
    logger.info("Report over %d rows written to %s", len(rows), output_dir)
    return paths


def collect_rows(output_dir) -> pd.DataFrame:
    # Rows of a multi-seed pipeline live under seed_N/rows
    paths = sorted(Path(output_dir).glob("**/rows/*.csv"))
    if not paths:
        raise EmptyInputError(f"no evaluated rows under {output_dir}")
    return pd.concat([read_csv(p) for p in paths], ignore_index=True)


def run_seed(config: ExperimentConfig) -> pd.DataFrame:
    """generate -> train every configured regime -> eval -> oracle for one master seed."""
    cmd_generate(config)
    rows = []
    for regime in config.regimes:
        cmd_train(config, regime)
        rows.append(cmd_eval(config, regime).to_frame())
    rows.append(cmd_oracle_eval(config).to_frame())
    return pd.concat(rows, ignore_index=True)


def pipeline(config: ExperimentConfig, seeds=None, with_charts: bool = False) -> dict:
    """Full pipeline for one or more master seeds; one combined report."""
    seeds = list(seeds) if seeds else [config.seed]
    rows = []
    for seed in seeds:
        seed_config = config.with_overrides(seed=seed, output_dir=config.output_dir / f"seed_{seed}")
        rows.append(run_seed(seed_config))
        logger.info("Pipeline finished seed %d", seed)
    return cmd_report(pd.concat(rows, ignore_index=True), config.output_dir, with_charts)


def category_losses(params: dict, arch: net.Architecture, test: ds.Dataset, holdout) -> dict:
    """Test loss per bottle category, plus AVG and AVG over held-out categories."""
    losses = {}
    for category in np.unique(test.categories):
        rows = np.flatnonzero(test.categories == category)
        losses[f"{category:g}"] = evaluate_test_loss(params, test, arch, rows)
    losses[AVG] = evaluate_test_loss(params, test, arch)
    holdout_rows = np.flatnonzero(np.isin(test.categories, np.asarray(holdout, dtype=np.float64)))
    losses[AVG_HOLDOUT] = evaluate_test_loss(params, test, arch, holdout_rows) if len(holdout_rows) else float("nan")
    return losses


def ablation(config: ExperimentConfig, with_charts: bool = False) -> dict:
    """
    Clutter-pairing ablation: for each (source clutter, target clutter)
    pairing, train with and without the pairwise loss and report test loss
    per bottle category and the generalization gap.
    """
    seed = config.seed
    source = ds.generate_source_dataset(config.generation_config(), derive_seed(seed, "source"))
    test = ds.generate_target_dataset(replace(config.generation_config(), scene=config.test_scene()),
                                      derive_seed(seed, "test"))
    loss_records, gap_records = [], []
    for source_clutter, target_clutter in ABLATION_PAIRINGS:
        setup = f"sim {'with' if source_clutter else 'no'} clutter / real {'with' if target_clutter else 'no'} clutter"
        paired = ds.generate_paired_dataset(
            config.generation_config(source_clutter=source_clutter, target_clutter=target_clutter),
            derive_seed(seed, "paired"))
        for regime in ABLATION_REGIMES:
            data = TrainingData(source=source, paired=paired, test_sets={"test": test})
            report = train(config.train_config(regime), data, config.architecture)
            label = f"{setup} ({regime.value})"
            for category, loss in category_losses(report.params, report.arch, test,
                                                  config.scene.holdout_classes).items():
                loss_records.append({"setup": label, "regime": regime.value, "source_clutter": source_clutter,
                                     "target_clutter": target_clutter, "category": category, "test_loss": loss})
            gap = report.generalization_gap("test")
            gap_records.append({"setup": label, "regime": regime.value, "source_clutter": source_clutter,
                                "target_clutter": target_clutter, "target_train_loss": report.target_train_loss,
                                "test_loss": report.test_losses["test"], "generalization_gap": gap})
            logger.info("Ablation %s: test loss %.5f, gap %.5f", label, report.test_losses["test"], gap)

    paths = {"losses": config.path("ablation_losses.csv"), "gaps": config.path("ablation_gaps.csv")}
    losses = pd.DataFrame(loss_records)
    write_csv(losses, paths["losses"])
    write_csv(pd.DataFrame(gap_records), paths["gaps"])
    if with_charts:
        paths["chart"] = config.path("charts", "ablation.html")
        paths["chart"].parent.mkdir(parents=True, exist_ok=True)
        charts.plot_category_losses(losses).write_html(str(paths["chart"]))
    return paths
