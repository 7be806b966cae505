import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from casdyf import ops
from casdyf.dfs import Cascade, CascadeConfig, DFSLevel, DynamicFilterUnit
from casdyf.layers import ParamStore, init_params
from casdyf.tensor import Tensor


def build(cls, *args, seed=0, training=True, **kw):
    store = ParamStore()
    mod = cls(store, "m", *args, **kw)
    init_params(store, seed)
    store.training = training
    return store, mod


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 2, 3]))
def test_kernel_tap_groups_sum_to_one(seed, n):
    rng = np.random.default_rng(seed)
    _, unit = build(DynamicFilterUnit, 4, seed=seed, training=n > 1)
    k = unit.generate_kernel(Tensor(rng.standard_normal((n, 4, 5, 5)) * 10)).data
    assert k.shape == (n, 4, 3, 3)
    np.testing.assert_allclose(k.sum(axis=(2, 3)), 1.0, atol=1e-6)


def test_identical_samples_give_identical_kernels(rng):
    _, unit = build(DynamicFilterUnit, 3, training=False)
    x = rng.standard_normal((1, 3, 6, 6))
    k = unit.generate_kernel(Tensor(np.concatenate([x, x]))).data
    np.testing.assert_array_equal(k[0], k[1])


def test_forced_logits_give_delta_kernel():
    _, unit = build(DynamicFilterUnit, 2)
    logits = np.full((1, 18, 1, 1), -10.0)
    logits[0, [4, 13]] = 10.0  # centre tap of each channel's 3x3 group
    k = unit.kernels_from_logits(Tensor(logits)).data
    assert (k[:, :, 1, 1] > 0.999).all()


def test_split_step_constant_input_routes_dc_to_branch():
    cfg = CascadeConfig(32, 4)
    store, level = build(DFSLevel, cfg, 1, training=False)
    x = Tensor(np.full((1, 32, 6, 6), 0.7))
    y = level.filter(x)
    assert np.abs((x - y).data).max() < 1e-6
    f, rest = level.split_step(x)
    assert f.shape == (1, 8, 6, 6) and rest.shape == (1, 24, 6, 6)
    bias = store.params["m.w_next.bias"].data
    np.testing.assert_allclose(rest.data, np.broadcast_to(bias[None, :, None, None], rest.shape), atol=1e-5)


def test_split_step_is_pure(rng):
    _, level = build(DFSLevel, CascadeConfig(8, 4), 1, training=False)
    x = rng.standard_normal((1, 8, 5, 5))
    a = [t.data for t in level.split_step(Tensor(x))]
    b = [t.data for t in level.split_step(Tensor(x) + Tensor(np.zeros_like(x)))]
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)


def test_channel_trace_32_4(rng):
    cfg = CascadeConfig(32, 4)
    assert [cfg.level_channels(i) for i in range(1, 5)] == [32, 24, 16, 8]
    _, cas = build(Cascade, cfg)
    widths = []
    x = Tensor(rng.standard_normal((2, 32, 8, 8)))
    for level in cas.levels:
        widths.append(x.shape[1])
        _, x = level.split_step(x)
    widths.append(x.shape[1])
    assert widths == [32, 24, 16, 8]
    assert [b.shape[1] for b in cas(Tensor(rng.standard_normal((2, 32, 8, 8))))] == [8, 8, 8, 8]


def test_single_branch_is_identity(rng):
    _, cas = build(Cascade, CascadeConfig(8, 1))
    assert cas.levels == [] and cas.refiners == []
    x = Tensor(rng.standard_normal((1, 8, 4, 4)))
    (out,) = cas(x)
    np.testing.assert_array_equal(out.data, x.data)


@pytest.mark.parametrize("c,n", [(8, 2), (12, 3), (32, 4), (30, 5), (24, 6)])
@pytest.mark.parametrize("strategy", ["dynamic", "fixed-conv", "split"])
def test_branch_channels_sum_to_c(c, n, strategy, rng):
    cfg = CascadeConfig(c, n, strategy=strategy, rmb_count=0)
    _, cas = build(Cascade, cfg)
    out = cas(Tensor(rng.standard_normal((2, c, 4, 4))))
    assert len(out) == n and sum(b.shape[1] for b in out) == c


def test_resolution_strategy_branches(rng):
    _, cas = build(Cascade, CascadeConfig(8, 4, strategy="resolution", rmb_count=0))
    out = cas(Tensor(rng.standard_normal((1, 8, 16, 16))))
    assert [b.shape for b in out] == [(1, 2, 16, 16)] * 4
    with pytest.raises(ValueError, match="divisible by 8"):
        cas(Tensor(rng.standard_normal((1, 8, 12, 12))))


def test_split_strategy_has_no_dfs_parameters():
    s_split, _ = build(Cascade, CascadeConfig(32, 4, strategy="split"))
    s_dyn, _ = build(Cascade, CascadeConfig(32, 4))
    assert not any(".dfs" in k for k in s_split.params)
    assert s_split.num_parameters() < s_dyn.num_parameters()


def test_refiners_skip_last_branch_unless_enabled():
    _, cas = build(Cascade, CascadeConfig(8, 4, rmb_count=2))
    assert len(cas.refiners) == 3 and all(len(r) == 2 for r in cas.refiners)
    _, cas = build(Cascade, CascadeConfig(8, 4, rmb_count=2, rmb_last_branch=True))
    assert len(cas.refiners) == 4


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        CascadeConfig(10, 4)
    with pytest.raises(ValueError, match="strategy"):
        CascadeConfig(8, 4, strategy="magic")
