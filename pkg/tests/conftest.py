import numpy as np
import pytest

from qmop import init_projector_params, synth_bundle
from qmop.linalg import seeded_fill

# tiny default geometry used across the suite
TINY = dict(grid_h=4, grid_w=4, c_vis=8, c_txt=6, d_llm=8,
            m_tokens=4, stride=2)


@pytest.fixture
def tiny_bundle():
    return synth_bundle(7, TINY["grid_h"], TINY["grid_w"],
                        TINY["c_vis"], TINY["c_txt"])


@pytest.fixture
def tiny_params():
    return init_projector_params(
        TINY["grid_h"], TINY["grid_w"], TINY["c_vis"], TINY["c_txt"],
        TINY["d_llm"], TINY["m_tokens"], TINY["stride"], seed=0,
    )


@pytest.fixture
def tiny_target():
    return seeded_fill(99, TINY["m_tokens"], TINY["d_llm"])
