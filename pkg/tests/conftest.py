"""
Shared pytest setup - stochesp
Puts src on the Python path the same way run.py does and provides small fixtures.
"""
import os
import sys
from pathlib import Path

# POT would otherwise import an installed TensorFlow, whose absl log handler closes
# pytest's captured stderr when the CLI reconfigures logging
os.environ.setdefault("POT_BACKEND_DISABLE_TENSORFLOW", "1")

import numpy as np
import pytest

project_root = Path(__file__).parent.parent
src_path = project_root / "src"
if str(src_path) not in sys.path:
    sys.path.insert(0, str(src_path))

from services.input_service import CausalFilter, HiddenSampler, generate_inputs  # noqa: E402
from services.sequence_space import make_weights  # noqa: E402
from services.state_models import GarchModel, LinearTestModel  # noqa: E402


@pytest.fixture
def project_dir() -> Path:
    return project_root


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(12345))


@pytest.fixture
def linear_model():
    return LinearTestModel(a=0.5)


@pytest.fixture
def garch_model():
    return GarchModel(omega=0.05, alpha=0.1, beta=0.85)


@pytest.fixture
def normal_sampler():
    return HiddenSampler(dist="std_normal", dim=1, seed=7)


@pytest.fixture
def small_weights():
    return make_weights(1.5, 35)


@pytest.fixture
def linear_inputs(normal_sampler, small_weights):
    return generate_inputs(normal_sampler, CausalFilter.identity(1), 2048, small_weights.horizon, threads=1)
