import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from casdyf import ops
from casdyf.fusion import GlobalFusion, LocalFusion, local_fuse, neighbor_triple
from casdyf.layers import ParamStore, init_params
from casdyf.tensor import Tensor

EXPECTED_TRIPLES = {
    3: [(1, 2, 3)] * 3,
    4: [(1, 2, 3), (1, 2, 3), (2, 3, 4), (2, 3, 4)],
    5: [(1, 2, 3), (1, 2, 3), (2, 3, 4), (3, 4, 5), (3, 4, 5)],
    6: [(1, 2, 3), (1, 2, 3), (2, 3, 4), (3, 4, 5), (4, 5, 6), (4, 5, 6)],
}


@pytest.mark.parametrize("n", sorted(EXPECTED_TRIPLES))
def test_neighbor_table(n):
    assert [neighbor_triple(i, n) for i in range(1, n + 1)] == EXPECTED_TRIPLES[n]


def test_neighbor_clamps_below_three():
    assert [neighbor_triple(i, 2) for i in (1, 2)] == [(1, 2, 2), (1, 1, 2)]
    assert neighbor_triple(1, 1) == (1, 1, 1)
    with pytest.raises(IndexError):
        neighbor_triple(0, 4)
    with pytest.raises(IndexError):
        neighbor_triple(5, 4)


def _branches(rng, n=4, c=2, h=2, w=2, scale=1.0):
    return [Tensor(rng.standard_normal((1, c, h, w)) * scale, dtype=np.float64) for _ in range(n)]


def test_local_zero_gates_pass_through(rng):
    store = ParamStore(np.float64)
    lfb = LocalFusion(store, "l", 2)
    init_params(store, 0)
    br = _branches(rng)
    out = lfb(br, 3, force_gates=Tensor(np.zeros((1, 6, 1, 1))))
    np.testing.assert_array_equal(out.data, br[2].data)


def test_local_unit_gates_with_averaging_merge(rng):
    store = ParamStore(np.float64)
    lfb = LocalFusion(store, "l", 2)
    w = np.zeros((2, 6, 1, 1))
    for o in range(2):
        w[o, [o, 2 + o, 4 + o], 0, 0] = 1.0 / 3.0
    lfb.merge.weight.data[...] = w
    br = _branches(rng)
    for i in range(1, 5):
        out = lfb(br, i, force_gates=Tensor(np.ones((1, 6, 1, 1))))
        triple = neighbor_triple(i, 4)
        expected = br[i - 1].data + np.mean([br[j - 1].data for j in triple], axis=0)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_global_zero_gates_and_exit_is_concat(rng):
    store = ParamStore(np.float64)
    gf = GlobalFusion(store, "g", 8)
    init_params(store, 0)
    br = _branches(rng, c=2, h=5, w=5)
    zero = Tensor(np.zeros((1, 8, 1, 1)))
    out = gf(br, force_gates=[zero, zero, zero])
    np.testing.assert_array_equal(out.data, np.concatenate([b.data for b in br], axis=1))
    out = gf(br)  # exit conv starts at zero
    np.testing.assert_array_equal(out.data, np.concatenate([b.data for b in br], axis=1))


def test_global_shape(rng):
    store = ParamStore(np.float64)
    gf = GlobalFusion(store, "g", 32)
    init_params(store, 0)
    assert gf(_branches(rng, c=8, h=6, w=6)).shape == (1, 32, 6, 6)


def test_global_rejects_inconsistent_branches(rng):
    store = ParamStore(np.float64)
    gf = GlobalFusion(store, "g", 4)
    br = [Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 4, 5)))]
    with pytest.raises(ValueError, match="branch 2"):
        gf(br)
    with pytest.raises(ValueError, match="total channels"):
        gf([Tensor(np.zeros((1, 2, 4, 4)))] * 3)


def test_channel_gate_on_constant_planes():
    store = ParamStore(np.float64)
    gf = GlobalFusion(store, "g", 2)  # hidden width 4
    gf.entry.weight.data[...] = np.eye(2)[:, :, None, None]
    gf.exit.weight.data[...] = np.eye(2)[:, :, None, None]
    gf.ca1.weight.data[...] = np.array([[1, 0], [0, 1], [1, 1], [-1, 0]], float)[:, :, None, None]
    gf.ca2.weight.data[...] = np.array([[0.5, 0, 0, 1], [0, 0, -1 / 3, 0]], float)[:, :, None, None]
    x = np.empty((1, 2, 3, 3))
    x[0, 0], x[0, 1] = 1.0, 2.0
    # GAP -> (1, 2); relu(W1 v) = (1, 2, 3, 0); W2 h = (0.5, -1)
    g = 1.0 / (1.0 + np.exp(-np.array([0.5, -1.0])))
    got = gf.channel_gate(Tensor(x, dtype=np.float64)).data
    np.testing.assert_allclose(got.ravel(), g, atol=1e-12)
    zero = Tensor(np.zeros((1, 2, 1, 1)))
    out = gf([Tensor(x, dtype=np.float64)], force_gates=[Tensor(got), zero, zero]).data
    np.testing.assert_allclose(out[0, 0], 1.0 * (1 + g[0]), atol=1e-12)
    np.testing.assert_allclose(out[0, 1], 2.0 * (1 + g[1]), atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1.0, 10.0, 1e3]))
def test_gates_in_open_unit_interval_and_finite(seed, scale):
    rng = np.random.default_rng(seed)
    store = ParamStore(np.float64)
    lfbs = [LocalFusion(store, f"l{i}", 2) for i in range(4)]
    gf = GlobalFusion(store, "g", 8)
    init_params(store, seed)
    br = _branches(rng, h=6, w=6, scale=scale)
    for lfb, i in zip(lfbs, range(1, 5)):
        stacked = ops.concat([br[j - 1] for j in neighbor_triple(i, 4)], axis=1)
        g = lfb.gates(stacked).data
        assert ((g > 0) & (g < 1)).all() or scale > 10  # saturation may round to 0/1 at huge inputs
        assert ((g >= 0) & (g <= 1)).all()
    fused = local_fuse(lfbs, br)
    e = gf.entry(ops.concat(fused, axis=1))
    for g in (gf.channel_gate(e), gf.spatial_gate(e), gf.pixel_gate(e)):
        assert ((g.data >= 0) & (g.data <= 1)).all()
    assert np.isfinite(gf(fused).data).all()


def test_moderate_inputs_give_strict_gates(rng):
    store = ParamStore(np.float64)
    gf = GlobalFusion(store, "g", 8)
    init_params(store, 3)
    e = gf.entry(Tensor(rng.standard_normal((2, 8, 6, 6)), dtype=np.float64))
    for g in (gf.channel_gate(e), gf.spatial_gate(e), gf.pixel_gate(e)):
        assert ((g.data > 0) & (g.data < 1)).all()


def test_zero_parameters_identity(rng):
    store = ParamStore(np.float64)
    lfbs = [LocalFusion(store, f"l{i}", 2) for i in range(4)]
    gf = GlobalFusion(store, "g", 8)
    init_params(store, 0)
    store.fill_(0.0)
    br = _branches(rng, h=4, w=4)
    out = gf(local_fuse(lfbs, br))
    np.testing.assert_array_equal(out.data, np.concatenate([b.data for b in br], axis=1))
