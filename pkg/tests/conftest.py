import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from dilie.features import init_random_weights, load_extractor

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def weights_path(tmp_path_factory):
    """A seeded, untrained VGG19 weight file shared by the whole session."""
    env = os.environ.get("DILIE_WEIGHTS")
    if env and os.path.exists(env):
        return env
    return str(init_random_weights(tmp_path_factory.mktemp("weights") / "vgg19.safetensors", seed=0))


@pytest.fixture(scope="session")
def ext(weights_path):
    return load_extractor(weights_path)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# ---------------------------------------------------------------- acceptance reporting

ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    """``criterion(name, ok, detail)`` records one acceptance line and asserts it."""
    def record(name: str, ok: bool, detail: str):
        ACCEPTANCE.append((name, bool(ok), detail))
        assert ok, f"{name}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
