import numpy as np
import pytest

from selfscore.mri import CoilSensitivities, gen_mask
from selfscore.numerics import RandomStream
from selfscore.phantom import PhantomSpec, build_dataset


@pytest.fixture
def stream():
    return RandomStream(1234, 0)


def random_maps(c, h, w, stream):
    maps = stream.gaussian((c, h, w), complex=True)
    maps /= np.sqrt(np.sum(np.abs(maps) ** 2, axis=0, keepdims=True))
    return CoilSensitivities(maps.astype(np.complex64))


@pytest.fixture
def small_records():
    """Four 16x16 two-coil records; cheap enough for training smoke tests."""
    return build_dataset(4, PhantomSpec(16, 16, n_ellipses=3), n_coils=2, acs=2, seed=11)


@pytest.fixture
def full_mask():
    return gen_mask("full", 16, 1)


TINY_CONFIG = """\
# Smallest settings that still exercise every pipeline stage.
[data]
n_train = 3
n_test = 2
height = 16
width = 16
n_coils = 2
acs = 2
[bcnn]
recursions = 2
layers = 3
filters = 4
epochs = 1
lr = 1e-3
gamma2 = 0.1
n_centers = 2
[score]
filters = 4
blocks = 1
n_levels = 4
sigma_max = 2.0
epochs = 1
batch_size = 4
[sampler]
step_scale = 1.0
n_steps = 2
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_CONFIG)
    return path


# Lines recorded by the acceptance suite, echoed in the terminal summary so
# they show up even when output capture is on.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
