import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from handfield.hand_model import toy_hand
from handfield.synth import SceneRecipe, generate_dataset

settings.register_profile("handfield", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("handfield")


@pytest.fixture(scope="session")
def template():
    return toy_hand()


@pytest.fixture(scope="session")
def tiny_recipe():
    # 2 cameras, 3 poses, 32x24 pixels: enough for end-to-end checks in seconds
    return SceneRecipe(n_cameras=2, width=32, height=24, focal=42.5, n_train=2, n_heldout=1,
                       perturbations=[[1, 1.3, 0.05]])


@pytest.fixture(scope="session")
def tiny_dataset(tiny_recipe, template):
    return generate_dataset(tiny_recipe, template)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def acceptance_lines():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
