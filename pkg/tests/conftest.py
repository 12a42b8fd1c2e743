import tempfile

import numpy as np
import pytest

from rainbowssd.config import BoxLayout, FusionMode, PyramidConfig, RunConfig, SHAPE_CLASSES
from rainbowssd.tensor import default_dtype, set_default_dtype


@pytest.fixture
def restore_dtype():
    """Restore the default float dtype after tests that switch it"""
    prev = default_dtype()
    yield
    set_default_dtype(prev)


@pytest.fixture
def rng():
    """Seeded numpy generator"""
    return np.random.default_rng(1234)


@pytest.fixture
def tmp_dir():
    """Pytest fixture yielding a temporary directory path"""
    with tempfile.TemporaryDirectory() as tmp_dir:
        yield tmp_dir


@pytest.fixture
def tiny_pyramid():
    """Four-level 24 pixel ladder small enough for gradient checks"""
    return PyramidConfig(levels=((6, 32), (3, 64), (2, 32), (1, 16)), input_size=24, channel_scale="1/8")


@pytest.fixture
def tiny_config(tiny_pyramid):
    """Rainbow run config over the tiny ladder with a shared 4-box classifier"""
    return RunConfig(
        pyramid=tiny_pyramid,
        fusion=FusionMode.RAINBOW,
        layout=BoxLayout.shared(4, tiny_pyramid.num_levels),
        classes=SHAPE_CLASSES,
        name="tiny",
    )
