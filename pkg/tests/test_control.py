import numpy as np
import pandas as pd
import pytest

from sim_data.dataset import distance_to_goal
from sim_data.depthscene import DomainModel, RobotState, SceneConfig, sample_scene
from transfer import metrics, net
from transfer.control import (
    ConstantPredictor, ControllerConfig, Environment, NetworkPredictor, OraclePredictor, Predictor,
    choose_candidate, evaluate, initial_state, run_trial, sample_candidates, select_action,
)


class NormPredictor(Predictor):
    name = "norm"

    def predict(self, image, actions, scene=None, state=None):
        return np.linalg.norm(actions, axis=1)


class ShiftedPredictor(Predictor):
    def __init__(self, inner, shift):
        self.inner = inner
        self.shift = shift

    def predict(self, image, actions, scene=None, state=None):
        return self.inner.predict(image, actions, scene, state) + self.shift


@pytest.fixture
def scene_and_state():
    scene, _ = sample_scene(SceneConfig(), np.random.default_rng(3))
    state = RobotState(scene.opening_position.offset(0.02, 0.0, 0.05))
    return scene, state


@pytest.fixture
def clean_env():
    return Environment(domain=DomainModel.identity(), with_clutter=False)


def test_oracle_moves_toward_the_opening(scene_and_state):
    scene, state = scene_and_state
    action = select_action(OraclePredictor(), None, ControllerConfig(), np.random.default_rng(0), scene, state)
    assert np.hypot(action[0] + 0.02, action[1]) < 0.005


def test_norm_predictor_picks_the_smallest_displacement():
    action = select_action(NormPredictor(), None, ControllerConfig(), np.random.default_rng(1))
    assert np.linalg.norm(action) < 0.003


def test_constant_predictor_picks_the_first_candidate():
    config = ControllerConfig(num_candidates=50)
    action, predicted = choose_candidate(ConstantPredictor(0.01), None, config, np.random.default_rng(2))
    first = sample_candidates(config, np.random.default_rng(2))[0]
    np.testing.assert_array_equal(action, first)
    assert predicted == 0.01


def test_single_candidate_is_always_chosen():
    config = ControllerConfig(num_candidates=1)
    action = select_action(NormPredictor(), None, config, np.random.default_rng(4))
    np.testing.assert_array_equal(action, sample_candidates(config, np.random.default_rng(4))[0])


def test_constant_shift_does_not_change_the_choice(scene_and_state):
    scene, state = scene_and_state
    config = ControllerConfig(num_candidates=200)
    plain = select_action(OraclePredictor(), None, config, np.random.default_rng(5), scene, state)
    shifted = select_action(ShiftedPredictor(OraclePredictor(), 0.5), None, config, np.random.default_rng(5),
                            scene, state)
    np.testing.assert_array_equal(plain, shifted)


def test_candidates_are_uniform_and_centered():
    config = ControllerConfig(num_candidates=1_000_000)
    candidates = sample_candidates(config, np.random.default_rng(6))
    assert candidates.shape == (1_000_000, 2)
    assert np.abs(candidates).max() <= config.candidate_bound
    assert np.abs(candidates.mean(axis=0)).max() < 3e-3 * config.candidate_bound


def test_network_predictor_scores_candidates_like_predict(tiny_arch, tiny_params):
    rng = np.random.default_rng(7)
    image = rng.uniform(0.2, 0.6, size=(tiny_arch.image_size, tiny_arch.image_size))
    predictor = NetworkPredictor(tiny_params, tiny_arch)
    config = ControllerConfig(num_candidates=30)
    action, predicted = choose_candidate(predictor, image, config, np.random.default_rng(8))
    candidates = sample_candidates(config, np.random.default_rng(8))
    expected = net.predict(tiny_params, tiny_arch, np.repeat(image[None], 30, axis=0), candidates)
    assert predicted == pytest.approx(expected.min(), rel=1e-10)
    np.testing.assert_array_equal(action, candidates[int(np.argmin(expected))])


def test_oracle_requires_scene_and_state():
    with pytest.raises(ValueError):
        OraclePredictor().predict(None, np.zeros((3, 2)))


def test_controller_config_validation():
    with pytest.raises(ValueError):
        ControllerConfig(success_threshold=0.05)
    with pytest.raises(ValueError):
        ControllerConfig(num_candidates=0)
    with pytest.raises(ValueError):
        ControllerConfig(descent=-0.01)


def test_initial_state_is_inside_the_start_box():
    scene, _ = sample_scene(SceneConfig(), np.random.default_rng(9))
    config = ControllerConfig()
    rng = np.random.default_rng(10)
    for _ in range(50):
        state = initial_state(scene, config, rng, 0.02)
        hand, opening = state.hand_position, scene.opening_position
        assert abs(hand.x - opening.x) <= config.init_half_width
        assert abs(hand.y - opening.y) <= config.init_half_width
        assert hand.z == pytest.approx(opening.z + config.init_height)


def test_oracle_trial_succeeds_on_a_clean_domain(clean_env):
    config = ControllerConfig(trials=1)
    trial = run_trial(OraclePredictor(), clean_env, config, np.random.default_rng(11))
    assert trial.success
    assert trial.raw_distance < 0.005
    assert trial.capped_distance == trial.raw_distance
    assert trial.trajectory.shape == (config.iterations + 1, 3)
    assert len(trial.predicted) == len(trial.true_distance) == config.iterations
    np.testing.assert_allclose(trial.predicted, trial.true_distance, rtol=1e-12)
    # Each iteration descends by exactly `descent`
    np.testing.assert_allclose(np.diff(trial.trajectory[:, 2]), -config.descent, atol=1e-12)


def test_standing_still_keeps_the_initial_distance(clean_env):
    config = ControllerConfig(num_candidates=1, candidate_bound=1e-12, iterations=2)
    trial = run_trial(ConstantPredictor(), clean_env, config, np.random.default_rng(12))
    start = trial.trajectory[0]
    expected = np.hypot(*(trial.trajectory[-1][:2] - start[:2]))
    assert expected < 1e-11
    assert trial.capped_distance == min(trial.raw_distance, config.distance_cap)
    assert trial.success == (trial.raw_distance <= config.success_threshold)


def test_oracle_success_rate_on_clean_source_domain():
    env = Environment(domain=DomainModel.identity())
    summary = evaluate(OraclePredictor(), env, ControllerConfig(trials=20), seed=13)
    assert summary.success_rate >= 0.95
    assert summary.predictor == "oracle"
    assert len(summary.trial_frame()) == 20


def test_oracle_distance_never_grows_beyond_candidate_spacing(clean_env):
    config = ControllerConfig(trials=1)
    for seed in range(3):
        trial = run_trial(OraclePredictor(), clean_env, config, np.random.default_rng(100 + seed))
        # Candidates 1000 in a 6 cm square are spaced about 2 mm apart
        assert (np.diff(trial.true_distance) <= 0.003).all()


def test_evaluate_is_deterministic_and_worker_independent():
    env = Environment()
    config = ControllerConfig(trials=3, num_candidates=100, iterations=2)
    first = evaluate(OraclePredictor(), env, config, seed=14)
    second = evaluate(OraclePredictor(), env, ControllerConfig(trials=3, num_candidates=100, iterations=2,
                                                                  workers=3), seed=14)
    pd.testing.assert_frame_equal(first.trial_frame(), second.trial_frame())
    pd.testing.assert_frame_equal(first.trajectory_frame(), second.trajectory_frame())


def test_trajectory_frame_layout(clean_env):
    config = ControllerConfig(trials=2, num_candidates=20, iterations=3)
    frame = evaluate(ConstantPredictor(), clean_env, config, seed=15).trajectory_frame()
    assert list(frame.columns) == ["trial", "step", "x", "y", "z", "predicted", "true_distance"]
    assert len(frame) == 2 * (config.iterations + 1)
    last = frame[frame["step"] == config.iterations]
    assert last["predicted"].isna().all() and last["true_distance"].isna().all()
    assert frame[frame["step"] < config.iterations]["predicted"].notna().all()


def test_true_distance_matches_the_move(scene_and_state):
    scene, state = scene_and_state
    action = np.array([-0.01, 0.005])
    assert distance_to_goal(state, action, scene) == pytest.approx(np.hypot(0.01, 0.005))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def trial_table(raw, threshold=0.01, cap=0.03):
    raw = np.asarray(raw, dtype=np.float64)
    return pd.DataFrame({
        "raw_distance": raw,
        "capped_distance": np.minimum(raw, cap),
        "success": raw <= threshold,
    })


def test_all_capped_trials_average_to_the_cap_exactly():
    table = trial_table([0.031, 0.2, 0.05, 1.0])
    assert metrics.mean_capped_distance(table, 0.03) == 0.03
    assert metrics.success_rate(table) == 0.0


def test_success_is_inclusive_at_the_threshold():
    table = trial_table([0.01, 0.0100001, 0.0])
    assert table["success"].tolist() == [True, False, True]
    assert metrics.success_rate(table) == pytest.approx(2 / 3)


def test_stderr_and_raw_statistics():
    table = trial_table([0.0, 0.01, 0.02, 0.05])
    capped = np.array([0.0, 0.01, 0.02, 0.03])
    assert metrics.capped_distance_stderr(table) == pytest.approx(capped.std(ddof=1) / 2)
    assert metrics.capped_distance_stderr(table.iloc[:1]) == 0.0
    assert metrics.mean_raw_distance(table) == pytest.approx(0.02)
    assert metrics.median_raw_distance(table) == pytest.approx(0.015)


def test_get_all_metrics_reports_rounded_centimeters():
    report = metrics.get_all_metrics(trial_table([0.0, 0.01, 0.02, 0.05]))
    assert report["Trials"] == 4
    assert report["Mean Capped Distance (cm)"] == 1.5
    assert report["Success Rate (%)"] == 50.0
    assert report["Median Raw Distance (cm)"] == 1.5
