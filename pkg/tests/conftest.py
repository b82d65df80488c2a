import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")

TINY_INI = """\
[run]
seed = 3

[corpus]
num_base = 3
num_novel = 2
per_class = 8
k = 2
image_size = 32
canvas_size = 64
det_per_class = 6
test_per_class = 4

[bovw]
K = 8
D = 8
channels = 8,8,8,8
epochs = 2
milestones = 1
batch_size = 8

[detector]
M = 16
S = 2
channels = 8,8,8
hidden = 16
epochs_base = 2
milestones_base = 1
epochs_novel = 2
milestones_novel =
batch_size = 4
"""


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_ini(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY_INI)
    return p


@pytest.fixture
def tiny_cfg():
    from bovw_distill.config import parse_config

    return parse_config(TINY_INI)


# -- acceptance summary -------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def record():
    """``record(n, passed, detail)`` stores the outcome of acceptance criterion ``n``."""

    def _record(n: int, passed: bool, detail: str) -> None:
        ACCEPTANCE[n] = (bool(passed), detail)
        print(f"criterion {n}: {'PASS' if passed else 'FAIL'} ({detail})")

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'} ({detail})")
