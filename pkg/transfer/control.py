"""
Closed-loop cap-on-bottle controller and trial evaluator.

Each iteration: render a target-domain image of the current state, score
num_candidates random planar displacements with a distance predictor, move
by the best one, then descend by `descent`.
"""
import logging
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from sim_data.dataset import distance_to_goal
from sim_data.depthscene import Camera, DomainModel, RobotState, SceneConfig, apply_domain, render_depth, sample_scene
from transfer import metrics, net
from utils.seeding import spawn_seeds

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ControllerConfig:
    num_candidates: int = 1000
    iterations: int = 5
    descent: float = 0.01
    init_half_width: float = 0.05
    init_height: float = 0.05
    candidate_bound: float = 0.03
    success_threshold: float = 0.01
    distance_cap: float = 0.03
    trials: int = 20
    workers: int = 1

    def __post_init__(self):
        positive = ("num_candidates", "iterations", "init_half_width", "candidate_bound",
                    "success_threshold", "distance_cap", "trials", "workers")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"controller {name} must be > 0, got {getattr(self, name)}")
        if self.descent < 0 or self.init_height < 0:
            raise ValueError("descent and init_height must be >= 0")
        if self.success_threshold > self.distance_cap:
            raise ValueError(
                f"success threshold {self.success_threshold} exceeds the distance cap {self.distance_cap}")


@dataclass(frozen=True)
class Environment:
    """Where trials run: scene distribution, sensor and domain."""
    scene: SceneConfig = field(default_factory=SceneConfig)
    camera: Camera = field(default_factory=Camera)
    domain: DomainModel = field(default_factory=DomainModel.default_target)
    with_clutter: bool = True


class Predictor(ABC):
    """Distance-to-goal predictor scored on a batch of candidate actions."""
    name = "predictor"

    @abstractmethod
    def predict(self, image: np.ndarray, actions: np.ndarray, scene=None, state=None) -> np.ndarray:
        ...


class NetworkPredictor(Predictor):
    name = "network"

    def __init__(self, params: dict, arch: net.Architecture = net.Architecture()):
        net.check_params(params, arch)
        self.params = params
        self.arch = arch

    def predict(self, image, actions, scene=None, state=None):
        return net.predict_candidates(self.params, self.arch, image, actions)


class OraclePredictor(Predictor):
    """Ground-truth planar distance; ignores the image."""
    name = "oracle"

    def predict(self, image, actions, scene=None, state=None):
        if scene is None or state is None:
            raise ValueError("the oracle predictor needs the true scene and robot state")
        return np.atleast_1d(distance_to_goal(state, actions, scene))


class ConstantPredictor(Predictor):
    name = "constant"

    def __init__(self, value: float = 0.0):
        self.value = float(value)

    def predict(self, image, actions, scene=None, state=None):
        return np.full(len(actions), self.value)


@dataclass
class TrialResult:
    raw_distance: float
    capped_distance: float
    success: bool
    trajectory: np.ndarray          # (iterations + 1, 3) hand positions
    predicted: np.ndarray           # predicted distance of each chosen action
    true_distance: np.ndarray       # true distance after each chosen action
    category: float = 0.0


@dataclass
class EvalSummary:
    mean_capped_distance: float
    success_rate: float
    stderr_capped_distance: float
    trials: list
    config: ControllerConfig
    predictor: str = ""

    def trial_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "trial": np.arange(len(self.trials)),
            "raw_distance": [t.raw_distance for t in self.trials],
            "capped_distance": [t.capped_distance for t in self.trials],
            "success": [t.success for t in self.trials],
            "category": [t.category for t in self.trials],
        })

    def trajectory_frame(self) -> pd.DataFrame:
        rows = []
        for i, trial in enumerate(self.trials):
            for step, (x, y, z) in enumerate(trial.trajectory):
                chose = step < len(trial.predicted)
                rows.append({
                    "trial": i, "step": step, "x": x, "y": y, "z": z,
                    "predicted": trial.predicted[step] if chose else np.nan,
                    "true_distance": trial.true_distance[step] if chose else np.nan,
                })
        return pd.DataFrame(rows, columns=["trial", "step", "x", "y", "z", "predicted", "true_distance"])


def sample_candidates(config: ControllerConfig, rng: np.random.Generator) -> np.ndarray:
    bound = config.candidate_bound
    return rng.uniform(-bound, bound, size=(config.num_candidates, 2))


def choose_candidate(predictor: Predictor, image, config: ControllerConfig, rng: np.random.Generator,
                     scene=None, state=None):
    """Returns (action, predicted distance). Ties go to the lowest candidate index."""
    candidates = sample_candidates(config, rng)
    predictions = np.asarray(predictor.predict(image, candidates, scene, state), dtype=np.float64)
    best = int(np.argmin(predictions))
    return candidates[best], float(predictions[best])


def select_action(predictor: Predictor, image, config: ControllerConfig, rng: np.random.Generator,
                  scene=None, state=None) -> np.ndarray:
    return choose_candidate(predictor, image, config, rng, scene, state)[0]


def initial_state(scene, config: ControllerConfig, rng: np.random.Generator, cap_radius: float) -> RobotState:
    w = config.init_half_width
    opening = scene.opening_position
    hand = opening.offset(float(rng.uniform(-w, w)), float(rng.uniform(-w, w)), config.init_height)
    return RobotState(hand, cap_radius)


def run_trial(predictor: Predictor, env: Environment, config: ControllerConfig,
              rng: np.random.Generator) -> TrialResult:
    scene, _ = sample_scene(env.scene, rng)
    if not env.with_clutter:
        scene = scene.without_clutter()
    state = initial_state(scene, config, rng, env.scene.cap_radius)

    positions = [state.hand_position.as_array()]
    predicted, true_distance = [], []
    for step in range(config.iterations):
        image = apply_domain(render_depth(scene, state, env.camera), env.domain, rng)
        action, guess = choose_candidate(predictor, image, config, rng, scene, state)
        predicted.append(guess)
        true_distance.append(distance_to_goal(state, action, scene))
        state = state.moved(float(action[0]), float(action[1]), -config.descent)
        positions.append(state.hand_position.as_array())
        logger.debug("step %d: action (%.4f, %.4f), predicted %.4f, true %.4f",
                     step, action[0], action[1], guess, true_distance[-1])

    raw = distance_to_goal(state, np.zeros(2), scene)
    return TrialResult(
        raw_distance=raw,
        capped_distance=min(raw, config.distance_cap),
        success=raw <= config.success_threshold,
        trajectory=np.stack(positions),
        predicted=np.asarray(predicted),
        true_distance=np.asarray(true_distance),
        category=scene.category,
    )


def evaluate(predictor: Predictor, env: Environment, config: ControllerConfig, seed: int) -> EvalSummary:
    """Run config.trials independent trials, each seeded from a spawned child of `seed`."""
    seeds = spawn_seeds(seed, config.trials)

    def job(seed_seq):
        return run_trial(predictor, env, config, np.random.default_rng(seed_seq))

    if config.workers > 1 and config.trials > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as executor:
            trials = list(executor.map(job, seeds))
    else:
        trials = [job(s) for s in seeds]

    summary = EvalSummary(trials=trials, config=config, predictor=predictor.name, mean_capped_distance=0.0,
                          success_rate=0.0, stderr_capped_distance=0.0)
    frame = summary.trial_frame()
    summary.mean_capped_distance = metrics.mean_capped_distance(frame, config.distance_cap)
    summary.success_rate = metrics.success_rate(frame)
    summary.stderr_capped_distance = metrics.capped_distance_stderr(frame)
    logger.info("Evaluated %s predictor over %d trials: mean capped distance %.4f m, success rate %.2f",
                predictor.name, config.trials, summary.mean_capped_distance, summary.success_rate)
    return summary
