import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dsnet.model import NetworkConfig, build_dsnet

settings.register_profile("dsnet", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("dsnet")

TOY = dict(growth=4, initial_channels=8, block_units=(1, 1, 1, 1, 1), bottleneck_width=8, decoder_channels=8)


def toy_config(variant="fast", num_classes=3, **overrides):
    return NetworkConfig(variant=variant, num_classes=num_classes, **{**TOY, **overrides})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_fast():
    return build_dsnet(toy_config("fast"), seed=3)


@pytest.fixture
def toy_accurate():
    return build_dsnet(toy_config("accurate"), seed=3)


@pytest.fixture(scope="session")
def canonical_fast():
    return build_dsnet(NetworkConfig(variant="fast", num_classes=19), seed=0)


@pytest.fixture(scope="session")
def canonical_accurate():
    return build_dsnet(NetworkConfig(variant="accurate", num_classes=11), seed=0)


# criterion number -> (passed, one-line summary); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, line = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {line}")
