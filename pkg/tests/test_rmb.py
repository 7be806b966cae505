import numpy as np
import pytest

from casdyf.layers import ParamStore, init_params
from casdyf.rmb import RMB, ResidualBlock, ResidualDenseBlock, make_refiner, rmb_stack
from casdyf.tensor import Tensor, default_dtype


def make(dilations=(1, 3, 5), count=1, channels=4, seed=0, parallel=False):
    store = ParamStore(np.float64)
    blocks = [RMB(store, f"r{j}", channels, dilations, parallel) for j in range(count)]
    init_params(store, seed)
    return store, blocks


def support(blocks, size=64, c=4, seed=0):
    """Output positions changed by perturbing the centre input pixel."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, c, size, size))
    x2 = x.copy()
    x2[0, :, size // 2, size // 2] += 1.0
    a = rmb_stack(blocks, Tensor(x, dtype=np.float64)).data
    b = rmb_stack(blocks, Tensor(x2, dtype=np.float64)).data
    ys, xs = np.nonzero(np.abs(a - b).max(axis=(0, 1)) > 0)
    return ys - size // 2, xs - size // 2


@pytest.mark.parametrize("dil,radius", [((1, 3, 5), 9), ((1, 1, 1), 3), ((2, 2, 2), 6)])
def test_single_block_footprint(dil, radius):
    _, blocks = make(dil)
    dy, dx = support(blocks)
    assert np.abs(dy).max() <= radius and np.abs(dx).max() <= radius
    assert np.abs(dy).max() == radius  # the bound is attained


def test_two_block_footprint():
    _, blocks = make(count=2)
    dy, dx = support(blocks, size=80)
    assert max(np.abs(dy).max(), np.abs(dx).max()) <= 18


def test_zero_weights_are_identity(rng):
    store, blocks = make(count=2)
    store.fill_(0.0)
    x = rng.standard_normal((1, 4, 12, 12))
    np.testing.assert_array_equal(rmb_stack(blocks, Tensor(x, dtype=np.float64)).data, x)
    np.testing.assert_array_equal(rmb_stack([], Tensor(x, dtype=np.float64)).data, x)


def test_shape_preserved(rng):
    _, (blk,) = make(channels=8)
    assert blk(Tensor(rng.standard_normal((1, 8, 32, 32)), dtype=np.float64)).shape == (1, 8, 32, 32)


def test_small_input_warns_once(rng):
    _, (blk,) = make()
    x = Tensor(rng.standard_normal((1, 4, 12, 12)), dtype=np.float64)
    with pytest.warns(UserWarning, match="footprint"):
        blk(x)
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        blk(x)


def test_needs_three_dilations():
    with pytest.raises(ValueError):
        RMB(ParamStore(), "r", 4, (1, 3))


@pytest.mark.parametrize("kind,cls", [("rmb", RMB), ("rb", ResidualBlock), ("rdb", ResidualDenseBlock)])
def test_refiner_factory_and_identity(kind, cls, rng):
    store = ParamStore(np.float64)
    blk = make_refiner(store, "b", kind, 4)
    assert isinstance(blk, cls)
    x = rng.standard_normal((1, 4, 16, 16))
    assert blk(Tensor(x, dtype=np.float64)).shape == x.shape
    store.fill_(0.0)
    np.testing.assert_array_equal(blk(Tensor(x, dtype=np.float64)).data, x)
