"""
Minibatch Adam training for the six transfer regimes, plus held-out L1
test-loss evaluation.
"""
import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from sim_data.dataset import Dataset
from transfer import net
from transfer.losses import KernelConfig, LossMode, LossWeights, TrainBatch, composite_loss
from utils.errors import DivergenceError, EmptyInputError, RegimeMismatchError, ShapeError
from utils.seeding import make_rng

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "task_source", "task_target", "alignment", "total", "test_loss",
                   "raw_task_source", "raw_task_target", "raw_alignment", "steps"]
TRAIN_LOSS_ROWS = 1024


class Regime(str, enum.Enum):
    REAL_ONLY_NO_CLUTTER = "RealOnlyNoClutter"
    REAL_ONLY_CLUTTER = "RealOnlyClutter"
    SIM_ONLY = "SimOnly"
    SIM_PLUS_REAL_MMD = "SimPlusRealMMD"
    SIM_PLUS_REAL_NO_PAIRWISE = "SimPlusRealNoPairwise"
    SIM_PLUS_REAL_PAIRWISE = "SimPlusRealPairwise"


@dataclass(frozen=True)
class RegimeSpec:
    mode: LossMode
    uses_source: bool
    uses_target: bool
    uses_unlabeled_target: bool = False


REGIMES = {
    Regime.REAL_ONLY_NO_CLUTTER: RegimeSpec(LossMode.TASK, False, True),
    Regime.REAL_ONLY_CLUTTER: RegimeSpec(LossMode.TASK, False, True),
    Regime.SIM_ONLY: RegimeSpec(LossMode.TASK, True, False),
    Regime.SIM_PLUS_REAL_MMD: RegimeSpec(LossMode.MMD, True, False, uses_unlabeled_target=True),
    Regime.SIM_PLUS_REAL_NO_PAIRWISE: RegimeSpec(LossMode.TASK, True, True),
    Regime.SIM_PLUS_REAL_PAIRWISE: RegimeSpec(LossMode.PAIRWISE, True, True),
}


@dataclass(frozen=True)
class AdamHyper:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls(net.zeros_like_params(params), net.zeros_like_params(params), 0)


def adam_step(params: dict, grads: dict, state: AdamState, hyper: AdamHyper = AdamHyper()):
    """Bias-corrected Adam update. Returns (new params, new state); inputs are not modified."""
    if set(grads) != set(params):
        raise ShapeError(f"gradient names {sorted(grads)} do not match parameters {sorted(params)}")
    step = state.step + 1
    correction1 = 1.0 - hyper.beta1 ** step
    correction2 = 1.0 - hyper.beta2 ** step
    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        g = grads[name]
        if g.shape != value.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {value.shape}")
        m = hyper.beta1 * state.m[name] + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * state.v[name] + (1.0 - hyper.beta2) * g * g
        new_params[name] = value - hyper.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + hyper.eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, step)


@dataclass(frozen=True)
class TrainConfig:
    regime: Regime = Regime.SIM_ONLY
    epochs: int = 30
    batch_size: int = 64
    max_steps_per_epoch: int = 0   # 0 = full pass over the primary stream
    epoch_test_rows: int = 256     # per-epoch test loss rows; 0 = whole set
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    real_weight: float = 0.1
    gamma_pairwise: float = 0.1
    gamma_mmd: float = 0.05
    kernel: str = "rbf"
    bandwidth: str = "median"
    seed: int = 0

    def __post_init__(self):
        if min(self.epochs, self.max_steps_per_epoch, self.epoch_test_rows) < 0:
            raise ValueError("epochs, max_steps_per_epoch and epoch_test_rows must be >= 0")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if min(self.real_weight, self.gamma_pairwise, self.gamma_mmd) < 0:
            raise ValueError("loss weights must be >= 0")
        Regime(self.regime)

    @property
    def spec(self) -> RegimeSpec:
        return REGIMES[Regime(self.regime)]

    @property
    def adam(self) -> AdamHyper:
        return AdamHyper(self.learning_rate, self.beta1, self.beta2, self.eps)

    @property
    def kernel_config(self) -> KernelConfig:
        return KernelConfig(kind=self.kernel, bandwidth=self.bandwidth)

    @property
    def loss_weights(self) -> LossWeights:
        regime = Regime(self.regime)
        if regime in (Regime.REAL_ONLY_NO_CLUTTER, Regime.REAL_ONLY_CLUTTER):
            return LossWeights(alpha=0.0, beta=1.0, gamma=0.0)
        if regime is Regime.SIM_ONLY:
            return LossWeights(alpha=1.0, beta=0.0, gamma=0.0)
        if regime is Regime.SIM_PLUS_REAL_MMD:
            return LossWeights(alpha=1.0, beta=0.0, gamma=self.gamma_mmd)
        if regime is Regime.SIM_PLUS_REAL_NO_PAIRWISE:
            return LossWeights(alpha=1.0, beta=self.real_weight, gamma=0.0)
        return LossWeights(alpha=1.0, beta=self.real_weight, gamma=self.gamma_pairwise)


@dataclass
class TrainingData:
    """
    source: labeled source rows. paired: labeled target rows, row i paired with pair i.
    unlabeled_target: target images for the MMD term (labels unused).
    test_sets: named held-out sets evaluated after every epoch.
    """
    source: Optional[Dataset] = None
    paired: Optional[Dataset] = None
    unlabeled_target: Optional[Dataset] = None
    test_sets: dict = field(default_factory=dict)


@dataclass
class TrainReport:
    regime: Regime
    history: pd.DataFrame
    params: dict
    arch: net.Architecture
    test_losses: dict
    initial_train_loss: float
    final_train_loss: float
    target_train_loss: Optional[float] = None

    def generalization_gap(self, test_set: str = "test") -> float:
        """Target test loss minus target training task loss; NaN without labeled target data."""
        if self.target_train_loss is None or test_set not in self.test_losses:
            return float("nan")
        return self.test_losses[test_set] - self.target_train_loss


def _usable(ds: Optional[Dataset]) -> bool:
    return ds is not None and len(ds) > 0


def check_data(regime: Regime, data: TrainingData):
    spec = REGIMES[Regime(regime)]
    if spec.uses_source and not _usable(data.source):
        raise RegimeMismatchError(f"{regime.value} needs a labeled source dataset")
    if spec.uses_target and not _usable(data.paired):
        raise RegimeMismatchError(f"{regime.value} needs a labeled target (paired) dataset")
    if spec.mode is LossMode.PAIRWISE and data.paired.num_pairs != len(data.paired):
        raise RegimeMismatchError(
            f"{regime.value} needs one pair per target row, got {data.paired.num_pairs} pairs "
            f"for {len(data.paired)} rows")
    if spec.uses_unlabeled_target and not _usable(data.unlabeled_target):
        raise RegimeMismatchError(f"{regime.value} needs unlabeled target images")


class CyclingSampler:
    """Endless shuffled index stream; reshuffles every time the pool is exhausted."""

    def __init__(self, size: int, rng: np.random.Generator):
        self.size = size
        self.rng = rng
        self.order = rng.permutation(size)
        self.pos = 0

    def take(self, count: int) -> np.ndarray:
        out = []
        while count > 0:
            if self.pos == self.size:
                self.order = self.rng.permutation(self.size)
                self.pos = 0
            chunk = self.order[self.pos:self.pos + count]
            self.pos += len(chunk)
            count -= len(chunk)
            out.append(chunk)
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def _target_rows(ds: Dataset, rows, with_pairs: bool) -> dict:
    batch = {
        "target_images": ds.sample_images(rows),
        "target_actions": ds.actions[rows],
        "target_labels": ds.labels[rows],
    }
    if with_pairs:
        batch["pair_source_images"] = ds.pair_source_images(rows)
    return batch


def _source_rows(ds: Dataset, rows) -> dict:
    return {
        "source_images": ds.sample_images(rows),
        "source_actions": ds.actions[rows],
        "source_labels": ds.labels[rows],
    }


def _epoch_batches(config: TrainConfig, data: TrainingData, rng: np.random.Generator, samplers: dict):
    """Yield the TrainBatch objects of one epoch."""
    spec = config.spec
    if spec.uses_source:
        primary = data.source
        per_step = config.batch_size // 2 if spec.uses_target else config.batch_size
    else:
        primary = data.paired
        per_step = config.batch_size
    order = rng.permutation(len(primary))
    steps = math.ceil(len(order) / per_step)
    if config.max_steps_per_epoch:
        steps = min(steps, config.max_steps_per_epoch)

    for step in range(steps):
        rows = order[step * per_step:(step + 1) * per_step]
        if spec.mode is LossMode.MMD:
            rows = rows[:len(rows) - len(rows) % 2]
            if len(rows) == 0:
                continue
        if not spec.uses_source:
            yield TrainBatch(**_target_rows(primary, rows, False))
            continue
        fields = _source_rows(primary, rows)
        if spec.uses_target:
            target_rows = samplers["target"].take(len(rows))
            fields.update(_target_rows(data.paired, target_rows, spec.mode is LossMode.PAIRWISE))
        if spec.uses_unlabeled_target:
            pool = data.unlabeled_target
            fields["mmd_target_images"] = pool.sample_images(samplers["unlabeled"].take(len(rows)))
        yield TrainBatch(**fields)


def evaluate_test_loss(params: dict, test_set: Dataset, arch: net.Architecture = net.Architecture(),
                       rows=None) -> float:
    """Mean absolute error of the predicted distances over the set (or the given rows of it)."""
    if test_set is None or len(test_set) == 0:
        raise EmptyInputError("cannot evaluate the test loss of an empty set")
    rows = np.arange(len(test_set)) if rows is None else np.asarray(rows)
    preds = net.predict(params, arch, test_set.sample_images(rows), test_set.actions[rows])
    return float(np.mean(np.abs(preds - test_set.labels[rows])))


def sampled_loss(params: dict, ds: Dataset, arch: net.Architecture, max_rows: int = TRAIN_LOSS_ROWS) -> float:
    # Evenly spaced rows keep the estimate deterministic on big sets; max_rows=0 uses every row
    rows = None
    if 0 < max_rows < len(ds):
        rows = np.unique(np.linspace(0, len(ds) - 1, max_rows).round().astype(np.int64))
    return evaluate_test_loss(params, ds, arch, rows)


def train(config: TrainConfig, data: TrainingData, arch: net.Architecture = net.Architecture(),
          init: Optional[dict] = None) -> TrainReport:
    """
    Train one regime. Deterministic per (config, data): parameters come
    from make_rng(seed, "init") unless given, batch order from
    make_rng(seed, "batches", regime).
    """
    regime = Regime(config.regime)
    spec = config.spec
    check_data(regime, data)
    weights = config.loss_weights
    kernel = config.kernel_config
    primary = data.source if spec.uses_source else data.paired

    params = init if init is not None else net.init_params(make_rng(config.seed, "init"), arch)
    net.check_params(params, arch)
    rng = make_rng(config.seed, "batches", regime.value)
    samplers = {}
    if spec.uses_source and spec.uses_target:
        half = config.batch_size // 2
        if len(data.paired) < half:
            logger.warning("Target pool (%d rows) is smaller than the half batch (%d); rows repeat within a step",
                           len(data.paired), half)
        samplers["target"] = CyclingSampler(len(data.paired), rng)
    if spec.uses_unlabeled_target:
        samplers["unlabeled"] = CyclingSampler(len(data.unlabeled_target), rng)

    initial_loss = sampled_loss(params, primary, arch)
    logger.info("Training %s: %d epochs, batch %d, weights %s, initial train loss %.5f",
                regime.value, config.epochs, config.batch_size, weights, initial_loss)

    state = AdamState.zeros(params)
    hyper = config.adam
    first_test = next(iter(data.test_sets.values()), None)
    records = []
    for epoch in range(1, config.epochs + 1):
        sums = np.zeros(7)
        steps = 0
        for batch in _epoch_batches(config, data, rng, samplers):
            total, grads, terms = composite_loss(spec.mode, batch, params, arch, weights, kernel)
            if not np.isfinite(total):
                raise DivergenceError(
                    f"non-finite loss in {regime.value} at epoch {epoch}, step {steps + 1}",
                    epoch=epoch, step=steps + 1,
                    terms={"task_source": terms.task_source, "task_target": terms.task_target,
                           "alignment": terms.alignment},
                )
            params, state = adam_step(params, grads, state, hyper)
            sums += (terms.weighted_task_source, terms.weighted_task_target, terms.weighted_alignment, total,
                     terms.task_source, terms.task_target, terms.alignment)
            steps += 1
            logger.debug("epoch %d step %d: total %.6f", epoch, steps, total)

        means = sums / max(steps, 1)
        test_loss = (sampled_loss(params, first_test, arch, config.epoch_test_rows)
                     if _usable(first_test) else float("nan"))
        records.append({
            "epoch": epoch, "task_source": means[0], "task_target": means[1], "alignment": means[2],
            "total": means[3], "test_loss": test_loss, "raw_task_source": means[4],
            "raw_task_target": means[5], "raw_alignment": means[6], "steps": steps,
        })
        logger.info("%s epoch %d/%d: total %.5f (source %.5f, target %.5f, alignment %.5f), test %.5f",
                    regime.value, epoch, config.epochs, means[3], means[0], means[1], means[2], test_loss)

    history = pd.DataFrame(records, columns=HISTORY_COLUMNS)
    test_losses = {name: evaluate_test_loss(params, ds, arch) for name, ds in data.test_sets.items() if _usable(ds)}
    report = TrainReport(
        regime=regime,
        history=history,
        params=params,
        arch=arch,
        test_losses=test_losses,
        initial_train_loss=initial_loss,
        final_train_loss=sampled_loss(params, primary, arch),
        target_train_loss=sampled_loss(params, data.paired, arch) if _usable(data.paired) else None,
    )
    logger.info("Finished %s: train loss %.5f -> %.5f, test losses %s",
                regime.value, report.initial_train_loss, report.final_train_loss, test_losses)
    return report
