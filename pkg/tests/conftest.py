import numpy as np
import pytest

from sim_data.dataset import DatasetConfig, GenerationConfig
from sim_data.depthscene import Camera, DomainModel, SceneConfig
from transfer import net


TINY_ARCH = net.Architecture(
    image_size=24,
    conv1_channels=2, conv1_kernel=5,
    conv2_channels=3, conv2_kernel=3,
    conv3_channels=4, conv3_kernel=3,
    dense=(5, 5),
    hook_width=6,
    hook_pool=4,
)


@pytest.fixture
def tiny_arch():
    return TINY_ARCH


@pytest.fixture
def tiny_params(tiny_arch):
    params = net.init_params(np.random.default_rng(0), tiny_arch)
    # Non-zero biases so every bias gradient is exercised
    rng = np.random.default_rng(1)
    for name in params:
        if name.endswith(".b"):
            params[name] = rng.normal(0.0, 0.1, size=params[name].shape)
    return params


@pytest.fixture
def tiny_batch(tiny_arch):
    rng = np.random.default_rng(2)
    images = rng.uniform(0.2, 0.6, size=(4, tiny_arch.image_size, tiny_arch.image_size))
    actions = rng.uniform(-0.03, 0.03, size=(4, 2))
    labels = rng.uniform(0.0, 0.06, size=4)
    return images, actions, labels


@pytest.fixture
def tiny_generation():
    return GenerationConfig(
        dataset=DatasetConfig(scenes=3, actions_per_scene=4, pairs=5, test_scenes=2, test_actions_per_scene=3),
        scene=SceneConfig(clutter_count_range=(1, 2)),
        camera=Camera(),
        source_domain=DomainModel(),
        target_domain=DomainModel.default_target(),
    )


def numerical_gradient(f, params: dict, name: str, index, eps: float = 1e-5) -> float:
    """Central difference of scalar f(params) wrt one coordinate."""
    original = params[name][index]
    params[name][index] = original + eps
    plus = f(params)
    params[name][index] = original - eps
    minus = f(params)
    params[name][index] = original
    return (plus - minus) / (2 * eps)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)


def sampled_coordinates(params: dict, per_tensor: int, rng: np.random.Generator):
    for name, value in params.items():
        flat = rng.choice(value.size, size=min(per_tensor, value.size), replace=False)
        for i in flat:
            yield name, np.unravel_index(int(i), value.shape)


@pytest.fixture
def fd_check():
    """Assert analytic grads match central differences on sampled coordinates."""
    def check(f, params, grads, per_tensor=6, tol=1e-4, seed=0):
        rng = np.random.default_rng(seed)
        worst = 0.0
        for name, index in sampled_coordinates(params, per_tensor, rng):
            numeric = numerical_gradient(f, params, name, index)
            err = relative_error(float(grads[name][index]), numeric)
            worst = max(worst, err)
            assert err < tol, f"{name}{index}: analytic {grads[name][index]} vs numeric {numeric}"
        return worst
    return check
