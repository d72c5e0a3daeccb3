import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import tiny_head
from swidernet.arch import (
    ArchSpec,
    PlanFormatError,
    build_plan,
    count_layers,
    forward,
    instantiate,
    parse_plan,
    round8,
    round_half_even,
    round_half_up,
    serialize_plan,
    stage_sizes,
)
from swidernet.cost import cost_report
from swidernet.panoptic import semantic_prediction
from swidernet.search import enumerate_space
from swidernet.tensor import DegenerateShapeError, ShapeMismatchError

STAGES = ("conv1", "conv2", "conv3", "conv4", "conv5", "conv6")
WIDTHS = st.sampled_from([0.25, 0.35, 0.5, 0.75, 1, 1.5, 2])


def counts(plan):
    return [len(s.blocks) for s in plan.stages]


def channels(plan):
    return [s.out_channels for s in plan.stages]


def test_baseline_skeleton():
    plan = build_plan(ArchSpec(1, 1, 1))
    assert [s.name for s in plan.stages] == list(STAGES)
    assert channels(plan) == [64, 128, 256, 512, 1024, 2048]
    assert counts(plan) == [3, 2, 3, 6, 3, 3]
    assert [s.kind for s in plan.stages] == ["stem", "basic", "basic", "basic", "basic", "bottleneck"]
    assert plan.stage("conv6").blocks[0].widths == (512, 1024, 2048)
    assert [s.stride for s in plan.stages] == [2, 1, 2, 2, 2, 1]
    assert plan.stage("conv6").unit_rate == 2


def test_width_rounding_example():
    plan = build_plan(ArchSpec(0.25, 0.35, 1))
    assert channels(plan)[:3] == [16, 32, 88]


def test_depth_doubling():
    assert counts(build_plan(ArchSpec(1, 1, 2)))[2:] == [6, 12, 6, 6]


@pytest.mark.parametrize("spec,layers", [((1, 1, 1), 40), ((1, 1, 3), 106), ((0.25, 0.35, 0.75), 31)])
def test_layer_count_examples(spec, layers):
    assert count_layers(build_plan(ArchSpec(*spec))) == layers


@given(w1=WIDTHS, w2=WIDTHS, l=st.integers(1, 6), se=st.booleans(), sac=st.booleans())
def test_layer_formula(w1, w2, l, se, sac):
    assert count_layers(build_plan(ArchSpec(w1, w2, l, use_se=se, use_sac=sac))) == 7 + 33 * l


def test_rounding_helpers():
    assert [round8(x) for x in (0, 3.9, 4, 11.99, 12, 89.6, 1024)] == [8, 8, 8, 8, 16, 88, 1024]
    assert [round_half_up(x) for x in (0.5, 1.5, 2.25, 4.5, 16.5)] == [1, 2, 2, 5, 17]
    assert [round_half_even(x) for x in (0.5, 1.5, 2.25, 4.5, 16.5)] == [0, 2, 2, 4, 16]


def test_half_even_depth_rounding():
    up = build_plan(ArchSpec(1, 1, 5.5))
    even = build_plan(ArchSpec(1, 1, 5.5, depth_rounding="half_even"))
    assert counts(up)[2:] == [17, 33, 17, 17]
    assert counts(even)[2:] == [16, 33, 16, 16]
    assert counts(build_plan(ArchSpec(1, 1, 0.35, depth_rounding="half_even")))[2:] == [1, 2, 1, 1]


@given(w1=WIDTHS, w2=WIDTHS, l=st.sampled_from([0.35, 0.75, 1, 2, 4.5]), dw=WIDTHS, dl=st.sampled_from([0, 0.5, 1]))
def test_monotone_in_multipliers(w1, w2, l, dw, dl):
    base = build_plan(ArchSpec(w1, w2, l))
    wider1 = build_plan(ArchSpec(w1 + dw, w2, l))
    wider2 = build_plan(ArchSpec(w1, w2 + dw, l))
    deeper = build_plan(ArchSpec(w1, w2, l + dl))
    assert all(a <= b for a, b in zip(channels(base)[:2], channels(wider1)[:2]))
    assert all(a <= b for a, b in zip(channels(base)[2:], channels(wider2)[2:]))
    assert all(a <= b for a, b in zip(counts(base), counts(deeper)))


@given(w1=st.floats(0.01, 4), w2=st.floats(0.01, 4), l=st.floats(0.01, 6))
def test_plan_invariants(w1, w2, l):
    plan = build_plan(ArchSpec(w1, w2, l))
    for s in plan.stages:
        assert len(s.blocks) >= 1
        for b in s.blocks:
            assert all(c > 0 and c % 8 == 0 for c in b.widths)
    assert build_plan(ArchSpec(w1, w2, l)) == plan


@pytest.mark.parametrize("bad", [(0, 1, 1), (1, -1, 1), (1, 1, 0), (float("nan"), 1, 1)])
def test_rejects_nonpositive(bad):
    with pytest.raises(ValueError):
        ArchSpec(*bad)


def test_flags_place_modules():
    plan = build_plan(ArchSpec(1, 1, 2))
    for s in plan.stages[1:]:
        assert all(b.use_se for b in s.blocks)
        assert all(b.use_sac == (s.name == "conv6") for b in s.blocks)
    assert not any(b.use_se for b in plan.stage("conv1").blocks)
    plain = build_plan(ArchSpec(1, 1, 1, use_se=False, use_sac=False))
    assert not any(b.use_se or b.use_sac for _, _, b in plain.residual_blocks)


def test_multigrid_rates():
    plan = build_plan(ArchSpec(1, 1, 2, use_sac=False, use_multigrid=True))
    conv6 = plan.stage("conv6")
    assert conv6.multigrid == (1, 2, 4, 1, 2, 4)
    assert [b.rate for b in conv6.blocks] == [2, 4, 8, 2, 4, 8]
    assert all(b.rate == 2 for b in build_plan(ArchSpec(1, 1, 1)).stage("conv6").blocks)


def test_stage_sizes_output_stride():
    sizes = stage_sizes(build_plan(ArchSpec(0.25, 0.25, 0.35)), 65, 65)
    assert [sizes[s][0] for s in STAGES] == [33, 33, 17, 9, 5, 5]
    os32 = build_plan(ArchSpec(0.25, 0.25, 0.35, output_stride=32))
    assert [stage_sizes(os32, 65, 65)[s][0] for s in STAGES] == [33, 33, 17, 9, 5, 3]
    assert os32.head.aspp_rates == (3, 6, 9)
    assert stage_sizes(build_plan(ArchSpec(1, 1, 1)), 641, 641)["conv6"] == (41, 41)


def test_wr41_plain_plan_has_no_extra_entries():
    spec = ArchSpec(0.25, 0.25, 1, use_se=False, use_sac=False, num_classes=3)
    net = instantiate(build_plan(spec), 0)
    assert not any("/se/" in k or k.endswith("/se/weight") or "/sac/" in k for k in net.params)
    decorated = instantiate(build_plan(replace(spec, use_se=True, use_sac=True)), 0)
    assert any(k.endswith("/se/weight") for k in decorated.params)
    assert any("/sac/switch" in k for k in decorated.params)


def test_instantiate_deterministic_and_seeded():
    plan = build_plan(ArchSpec(0.25, 0.25, 0.35, num_classes=5))
    a, b, c = instantiate(plan, 3), instantiate(plan, 3), instantiate(plan, 4)
    assert a.params.keys() == b.params.keys() == c.params.keys()
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    assert all(a.params[k].shape == c.params[k].shape for k in a.params)
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params if k.endswith("weight"))
    assert all(np.all(v == 1) for k, v in a.params.items() if k.endswith("gamma"))
    assert all(np.all(v == 0) for k, v in a.buffers.items() if k.endswith("mean"))


def test_he_fan_out_scale():
    net = instantiate(build_plan(ArchSpec(1, 1, 0.35, num_classes=5)), 0)
    w = net.params["backbone/conv5/unit0/conv1/weight"]
    assert w.std() == pytest.approx(np.sqrt(2 / (w.shape[0] * 9)), rel=0.02)


@pytest.mark.parametrize("spec", [ArchSpec(0.25, 0.25, 0.35, num_classes=5),
                                  ArchSpec(0.25, 0.5, 0.75, sep_conv_head=True, use_multigrid=True),
                                  ArchSpec(0.5, 0.35, 1, use_se=False, output_stride=32, num_classes=7)])
def test_param_count_matches_cost_model(spec):
    plan = build_plan(spec)
    assert instantiate(plan, 0).num_parameters() == cost_report(plan, 65, 65).total_params


def test_forward_contract():
    net = instantiate(build_plan(ArchSpec(0.25, 0.25, 0.35, num_classes=5)), 0)
    x = np.random.default_rng(0).standard_normal((1, 3, 65, 65))
    out = forward(net, x)
    assert out.semantic_logits.shape == (1, 5, 65, 65)
    assert out.center_heatmap.shape == (1, 1, 65, 65)
    assert out.offsets.shape == (1, 2, 65, 65)
    assert out.center_heatmap.min() >= 0 and out.center_heatmap.max() <= 1
    assert all(np.isfinite(a).all() for a in (out.semantic_logits, out.center_heatmap, out.offsets))


def test_forward_non_square_and_train_mode():
    net = instantiate(tiny_head(build_plan(ArchSpec(0.25, 0.25, 0.35, num_classes=3))), 1)
    x = np.random.default_rng(1).standard_normal((2, 3, 40, 57))
    a = forward(net, x, "train", np.random.default_rng(5))
    b = forward(net, x, "train", np.random.default_rng(5))
    assert a.semantic_logits.shape == (2, 3, 40, 57)
    np.testing.assert_array_equal(a.offsets, b.offsets)


def test_forward_all_zero_weights_ties_to_class_zero():
    net = instantiate(build_plan(ArchSpec(0.25, 0.25, 0.35, num_classes=4)), 0)
    for k in net.params:
        if not k.endswith(("gamma", "beta")):
            net.params[k] = np.zeros_like(net.params[k])
    out = forward(net, np.ones((1, 3, 33, 33)))
    assert np.ptp(out.semantic_logits) == 0
    assert (semantic_prediction(out.semantic_logits) == 0).all()


def test_forward_errors():
    net = instantiate(tiny_head(build_plan(ArchSpec(0.25, 0.25, 0.35, num_classes=2))), 0)
    with pytest.raises(DegenerateShapeError):
        forward(net, np.zeros((1, 3, 32, 65)))
    with pytest.raises(ShapeMismatchError):
        forward(net, np.zeros((1, 4, 65, 65)))


@pytest.mark.slow
def test_forward_shape_law_over_both_spaces():
    """Every searched spec keeps the output contract; widths are shrunk, depth and flags are not."""
    x = np.random.default_rng(0).standard_normal((1, 3, 65, 65))
    for spec in enumerate_space("fast") + enumerate_space("strong"):
        small = replace(spec, w1=min(spec.w1, 0.125), w2=min(spec.w2, 0.03125), num_classes=3)
        plan = tiny_head(build_plan(small))
        assert count_layers(plan) == count_layers(build_plan(spec))
        out = forward(instantiate(plan, 0), x)
        assert out.semantic_logits.shape == (1, 3, 65, 65)
        assert out.center_heatmap.shape == (1, 1, 65, 65) and out.offsets.shape == (1, 2, 65, 65)


def test_roundtrip_fast_space():
    for spec in enumerate_space("fast"):
        plan = build_plan(spec)
        text = serialize_plan(plan)
        assert parse_plan(text) == plan
        assert serialize_plan(parse_plan(text)) == text


def test_serialization_is_byte_stable():
    spec = ArchSpec(1, 1.5, 2, use_multigrid=True)
    assert serialize_plan(build_plan(spec)) == serialize_plan(build_plan(spec))
    doc = json.loads(serialize_plan(build_plan(spec)))
    assert list(doc) == ["version", "spec", "stages", "head"]
    assert doc["spec"]["flags"] == {"use_se": True, "use_sac": True, "use_multigrid": True, "sep_conv_head": False}


def test_truncated_plan_names_missing_section():
    text = serialize_plan(build_plan(ArchSpec(0.25, 0.25, 0.35)))
    with pytest.raises(PlanFormatError, match="head"):
        parse_plan(text[: text.index('"head"')])
    with pytest.raises(PlanFormatError, match="stages"):
        parse_plan(text[: text.index('"stages"')])


def test_parse_rejects_unknown_and_version():
    doc = json.loads(serialize_plan(build_plan(ArchSpec(0.25, 0.25, 0.35))))
    bad = dict(doc, extra=1)
    with pytest.raises(PlanFormatError, match="unknown"):
        parse_plan(json.dumps(bad))
    doc2 = json.loads(json.dumps(doc))
    doc2["stages"][0]["blocks"][0]["color"] = "red"
    with pytest.raises(PlanFormatError, match="unknown"):
        parse_plan(json.dumps(doc2))
    with pytest.raises(PlanFormatError, match="version"):
        parse_plan(json.dumps(dict(doc, version=99)))
    with pytest.raises(PlanFormatError):
        parse_plan("[1, 2]")
