import numpy as np
import pytest
from hypothesis import assume, strategies as st
from hypothesis.extra import numpy as hnp

from wsmooth import GridImage, LocalFlowPlan

# Keep test-wide rng construction in one place so seeds stay greppable.


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def _finite_floats(lo, hi):
    return st.floats(min_value=lo, max_value=hi, allow_nan=False, allow_infinity=False)


@st.composite
def grid_shapes(draw, min_side=1, max_side=4):
    return (draw(st.integers(min_side, max_side)), draw(st.integers(min_side, max_side)))


@st.composite
def grid_images(draw, shape=None, min_side=1, max_side=4):
    if shape is None:
        shape = draw(grid_shapes(min_side, max_side))
    vals = draw(hnp.arrays(np.float64, shape, elements=_finite_floats(0.0, 1.0)))
    assume(vals.sum() > 1e-3)
    return GridImage(vals / vals.sum())


@st.composite
def flow_plans(draw, shape=None, min_side=1, max_side=4, max_mag=1.0):
    if shape is None:
        shape = draw(grid_shapes(min_side, max_side))
    n, m = shape
    vert = draw(hnp.arrays(np.float64, (n - 1, m), elements=_finite_floats(-max_mag, max_mag)))
    horiz = draw(hnp.arrays(np.float64, (n, m - 1), elements=_finite_floats(-max_mag, max_mag)))
    return LocalFlowPlan(vert, horiz)


@st.composite
def image_flow_pairs(draw, min_side=1, max_side=4):
    shape = draw(grid_shapes(min_side, max_side))
    return draw(grid_images(shape=shape)), draw(flow_plans(shape=shape))


@st.composite
def image_pairs(draw, min_side=1, max_side=4):
    shape = draw(grid_shapes(min_side, max_side))
    return draw(grid_images(shape=shape)), draw(grid_images(shape=shape))
