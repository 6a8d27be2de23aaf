"""Shared fixtures: one demo bundle per session, at two sizes.

The small bundle keeps unit tests fast; the full bundle is what the
acceptance checks run on (1000 test images, as the trend experiment
requires).
"""

import numpy as np
import pytest

from quantlab import demo


@pytest.fixture(scope="session")
def demo_small():
    return demo.build_demo(seed=0, calib_size=32, test_size=60)


@pytest.fixture(scope="session")
def demo_full():
    return demo.build_demo(seed=0, calib_size=128, test_size=1000)


@pytest.fixture()
def rng():
    return np.random.default_rng(0xBEEF)
