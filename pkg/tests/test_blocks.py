import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from swidernet.blocks import (
    BlockParams,
    BlockPlan,
    BNParams,
    ContextParams,
    SacParams,
    SeParams,
    drop_path,
    global_context,
    random_block_params,
    residual_block,
    sac,
    se_module,
    switch_map,
    zero_block_params,
)
from swidernet.checks import CASES, run_check
from swidernet.tensor import ConvKernel, ShapeMismatchError, Tensor, conv2d


def _sac_params(rng, c=3, rate=1, switch_bias=0.0, switch_scale=1.0):
    return SacParams(
        conv=ConvKernel(rng.standard_normal((c, c, 3, 3)), rate=rate),
        switch=ConvKernel(rng.standard_normal((1, c, 1, 1)) * switch_scale, bias=np.array([switch_bias])),
        pre_context=ContextParams(rng.standard_normal((c, c)), rng.standard_normal(c)),
        post_context=ContextParams(rng.standard_normal((c, c)), rng.standard_normal(c)),
    )


@pytest.mark.parametrize("rate", [1, 2])
@pytest.mark.parametrize("forced,branch", [(-1e4, 1), (1e4, 3)])
def test_sac_with_forced_switch_is_single_rate(rng, rate, forced, branch):
    p = _sac_params(rng, rate=rate, switch_bias=forced, switch_scale=0.0)
    x = rng.standard_normal((2, 3, 9, 9))
    xc = global_context(x, p.pre_context)
    ref = global_context(conv2d(xc, p.conv.with_rate(rate * branch)), p.post_context).data
    assert np.max(np.abs(sac(x, p).data - ref)) < 1e-6


def test_switch_in_unit_interval(rng):
    p = _sac_params(rng)
    s = switch_map(rng.standard_normal((1, 3, 8, 8)) * 5, p).data
    assert s.shape == (1, 1, 8, 8) and s.min() >= 0 and s.max() <= 1


def test_sac_rejects_wrong_channels(rng):
    with pytest.raises(ShapeMismatchError):
        sac(rng.standard_normal((1, 4, 5, 5)), _sac_params(rng))
    with pytest.raises(ShapeMismatchError):
        SacParams(ConvKernel(np.zeros((3, 3, 3, 3))), ConvKernel(np.zeros((2, 3, 1, 1))),
                  ContextParams(np.zeros((3, 3))), ContextParams(np.zeros((3, 3))))


def test_se_zero_weight_halves_exactly(rng):
    x = rng.standard_normal((2, 5, 4, 4)).astype(np.float32)
    out = se_module(x, SeParams(np.zeros((5, 5), np.float32))).data
    np.testing.assert_array_equal(out, x * np.float32(0.5))


def test_se_gate_formula(rng):
    x = rng.standard_normal((1, 4, 3, 3))
    w = rng.standard_normal((4, 4))
    z = w @ x.mean(axis=(2, 3))[0]
    gate = np.clip(z + 3, 0, 6) / 6
    np.testing.assert_allclose(se_module(x, SeParams(w)).data, x * gate.reshape(1, 4, 1, 1))
    with pytest.raises(ShapeMismatchError):
        se_module(x, SeParams(np.zeros((3, 3))))


def test_drop_path_inference_is_bit_identity(rng):
    x = rng.standard_normal((3, 2, 4, 4)).astype(np.float32)
    out = drop_path(x, 0.8, "inference")
    assert out.data.tobytes() == x.tobytes()
    t = Tensor(x)
    assert drop_path(t, 0.5, "inference") is t


def test_drop_path_train_scaling():
    x = np.ones((4000, 1, 1, 1))
    out = drop_path(x, 0.8, "train", np.random.default_rng(1)).data.ravel()
    assert set(np.unique(out)) <= {0.0, 1.25}
    assert abs(out.mean() - 1.0) < 0.05
    with pytest.raises(ValueError):
        drop_path(x, 0.8, "train")
    with pytest.raises(ValueError):
        drop_path(x, 0.0, "train", np.random.default_rng(0))
    with pytest.raises(ValueError):
        drop_path(x, 0.8, "eval")


def test_drop_path_seeded_determinism():
    x = np.ones((50, 1, 1, 1))
    a = drop_path(x, 0.5, "train", np.random.default_rng(7)).data
    b = drop_path(x, 0.5, "train", np.random.default_rng(7)).data
    np.testing.assert_array_equal(a, b)


def test_zero_branch_block_is_identity(rng):
    plan = BlockPlan("basic", 4, (4, 4), use_se=True)
    x = rng.standard_normal((1, 4, 6, 6)).astype(np.float32)
    out = residual_block(x, plan, zero_block_params(plan)).data
    np.testing.assert_array_equal(out, x)


def test_block_manual_composition(rng):
    """Pre-activation order spelled out by hand for a projected basic block."""
    plan = BlockPlan("basic", 3, (5, 5), stride=2)
    p = random_block_params(plan, rng, np.float64)
    p.norms = [BNParams(rng.uniform(.5, 2, c), rng.standard_normal(c), rng.standard_normal(c), rng.uniform(.5, 2, c))
               for c in (3, 5)]
    x = rng.standard_normal((1, 3, 7, 7))

    def bn_relu(v, bn):
        r = lambda a: a.reshape(1, -1, 1, 1)  # noqa: E731
        return np.maximum(r(bn.gamma) * (v - r(bn.mean)) / np.sqrt(r(bn.var) + bn.eps) + r(bn.beta), 0)

    pre = bn_relu(x, p.norms[0])
    h = conv2d(pre, p.convs[0]).data
    h = conv2d(bn_relu(h, p.norms[1]), p.convs[1]).data
    ref = conv2d(pre, p.projection).data + h
    np.testing.assert_allclose(residual_block(x, plan, p).data, ref, atol=1e-12)


@given(kind=st.sampled_from(["basic", "bottleneck"]), cin=st.integers(1, 6), cout=st.integers(1, 6),
       stride=st.sampled_from([1, 2]), rate=st.integers(1, 3), se=st.booleans(), use_sac=st.booleans(),
       size=st.integers(3, 9), seed=st.integers(0, 10))
def test_block_shape_law(kind, cin, cout, stride, rate, se, use_sac, size, seed):
    widths = (cout, cout) if kind == "basic" else (cout, cout, cout + 1)
    plan = BlockPlan(kind, cin, widths, stride=stride, rate=rate, use_se=se, use_sac=use_sac)
    p = random_block_params(plan, np.random.default_rng(seed))
    x = np.random.default_rng(seed).standard_normal((1, cin, size, size)).astype(np.float32)
    out = residual_block(x, plan, p).data
    assert out.shape == (1, widths[-1], -(-size // stride), -(-size // stride))
    assert np.isfinite(out).all()
    assert plan.has_projection == (cin != widths[-1] or stride != 1)


def test_block_plan_validation():
    with pytest.raises(ValueError):
        BlockPlan("basic", 3, (4,))
    with pytest.raises(ValueError):
        BlockPlan("conv", 3, (4,), use_se=True)
    with pytest.raises(ValueError):
        BlockPlan("mystery", 3, (4,))
    assert BlockPlan("bottleneck", 4, (2, 2, 8), stride=2).conv_strides == (1, 2, 1)
    assert BlockPlan("basic", 4, (2, 8), stride=2).conv_strides == (2, 1)


def test_block_rejects_channel_mismatch(rng):
    plan = BlockPlan("basic", 4, (4, 4))
    with pytest.raises(ShapeMismatchError):
        residual_block(rng.standard_normal((1, 3, 5, 5)), plan, zero_block_params(plan))


@pytest.mark.parametrize("name", ["sac", "basic_block", "bottleneck_block", "se_module"])
def test_gradcheck_blocks(name):
    for seed in range(2):
        assert run_check(name, seed).passed


def test_gradcheck_registry_covers_all_ops():
    assert {"conv2d", "avg_pool", "global_avg_pool", "fully_connected", "se_module", "sac",
            "basic_block", "bottleneck_block"} <= set(CASES)


def test_block_params_have_no_surprises(rng):
    plan = BlockPlan("bottleneck", 4, (2, 2, 8), use_se=True, use_sac=True)
    p = random_block_params(plan, rng)
    assert isinstance(p, BlockParams)
    assert p.sac.conv is p.convs[1]
    assert p.se.weight.shape == (8, 8)
