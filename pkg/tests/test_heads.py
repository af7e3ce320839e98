import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from splatavatar.diffcore import grad_check, grad_check_params
from splatavatar.gaussians import GaussianSet
from splatavatar.geometry.mesh import BODY, HAND, HEAD
from splatavatar.heads import (
    ConstraintRanges,
    GaussianHead,
    ShapeMLP,
    constrain,
    predict_shape,
    predict_shape_from_text,
    regress_gaussians,
    shape_input,
    unconstrain,
)

R = ConstraintRanges()


def _zero_out(mlp):
    torch.nn.init.zeros_(mlp.fc2.weight)
    torch.nn.init.zeros_(mlp.fc2.bias)
    return mlp


# ---------------------------------------------------------------- ranges


def test_default_ranges_respect_region_ordering():
    for region in (HEAD, HAND):
        assert R.disp_bound(region) <= R.disp_bound(BODY)
        assert R.scale_bound(region) <= R.scale_bound(BODY)


@pytest.mark.parametrize(
    "kwargs",
    [dict(disp_head=0.05), dict(disp_hand=0.05), dict(scale_head=0.03), dict(scale_hand=0.03), dict(s_min=0.0), dict(s_min=0.02)],
)
def test_invalid_ranges(kwargs):
    with pytest.raises(ValueError):
        ConstraintRanges(**kwargs)


def test_unknown_region_label():
    with pytest.raises(ValueError):
        constrain(torch.zeros(2, 9), [0, 3], R)
    with pytest.raises(ValueError):
        constrain(torch.zeros(2, 9), [-1, 0], R)


# ---------------------------------------------------------------- constrain


def test_zero_raw_gives_midpoints():
    disp, scale, color = constrain(torch.zeros(3, 9, dtype=torch.float64), [BODY, HEAD, HAND], R)
    assert torch.all(color == 0.5)
    assert torch.all(disp == 0)
    for i, region in enumerate((BODY, HEAD, HAND)):
        mid = (R.s_min + R.scale_bound(region)) / 2
        torch.testing.assert_close(scale[i], torch.full((3,), mid, dtype=torch.float64))


def test_quarter_turn_reaches_region_bound():
    raw = torch.zeros(2, 9, dtype=torch.float64)
    raw[:, 0:3] = math.pi / 2
    disp, _, _ = constrain(raw, [HEAD, BODY], R)
    torch.testing.assert_close(disp[0], torch.full((3,), R.disp_head, dtype=torch.float64))
    torch.testing.assert_close(disp[1], torch.full((3,), R.disp_body, dtype=torch.float64))
    assert disp[0, 0] < disp[1, 0]


@given(
    st.lists(st.floats(-1e4, 1e4), min_size=9, max_size=9),
    st.sampled_from([BODY, HEAD, HAND]),
)
def test_bounds_hold_for_any_raw(values, region):
    raw = torch.tensor([values], dtype=torch.float64)
    disp, scale, color = constrain(raw, [region], R)
    assert torch.all(disp.abs() <= R.disp_bound(region))
    assert torch.all(scale >= R.s_min) and torch.all(scale <= R.scale_bound(region))
    assert torch.all(color >= 0) and torch.all(color <= 1)


@given(st.floats(-math.pi / 2 + 0.1, math.pi / 2 - 0.1), st.sampled_from([BODY, HEAD, HAND]))
def test_gradients_do_not_vanish_inside_bounds(x, region):
    raw = torch.full((1, 9), x, dtype=torch.float64, requires_grad=True)
    disp, scale, _ = constrain(raw, [region], R)
    (gd,) = torch.autograd.grad(disp.sum(), raw, retain_graph=True)
    (gs,) = torch.autograd.grad(scale.sum(), raw)
    assert torch.all(gd[0, 0:3].abs() > 0.05 * R.disp_bound(region))
    # scales span [s_min, bound]; the sinusoid's amplitude is half that width
    half_width = (R.scale_bound(region) - R.s_min) / 2
    assert torch.all(gs[0, 3:6].abs() > 0.05 * half_width)


def test_unconstrain_round_trip():
    g = torch.Generator().manual_seed(0)
    raw = (torch.rand(20, 9, generator=g, dtype=torch.float64) - 0.5) * 2.8
    regions = torch.randint(0, 3, (20,), generator=g)
    disp, scale, color = constrain(raw, regions, R)
    back = unconstrain(disp, scale, color, regions, R, margin=0.0)
    torch.testing.assert_close(back, raw, atol=1e-9, rtol=0)


# ---------------------------------------------------------------- regression


def _regressed(n=16, f=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    head = GaussianHead(f).double()
    feats = torch.randn(n, f, generator=g, dtype=torch.float64) * 10
    regions = torch.randint(0, 3, (n,), generator=g)
    anchors = torch.randn(n, 3, generator=g, dtype=torch.float64)
    rot = torch.eye(3, dtype=torch.float64).expand(n, 3, 3)
    return head, feats, regions, anchors, rot


def test_regress_gaussians_bounds_and_type():
    head, feats, regions, anchors, rot = _regressed()
    gs = regress_gaussians(feats, regions, R, head, anchors, rot)
    assert isinstance(gs, GaussianSet) and len(gs) == 16
    assert gs.opacity == 1.0
    disp_b, scale_b = R.per_point(regions, torch.float64)
    assert torch.all(gs.displacement.abs() <= disp_b)
    assert torch.all(gs.scale >= R.s_min) and torch.all(gs.scale <= scale_b)
    assert torch.all((gs.color >= 0) & (gs.color <= 1))
    torch.testing.assert_close(gs.positions, anchors + gs.displacement)
    assert gs.params().shape == (16, 9)


def test_head_has_no_opacity_or_rotation_parameters():
    names = [n for n, _ in GaussianHead(8).named_parameters()]
    assert names == ["linear.weight", "linear.bias"]


def test_regress_gaussians_gradients():
    head, feats, regions, anchors, rot = _regressed()
    feats = feats / 10

    def total(f):
        g = regress_gaussians(f, regions, R, head, anchors, rot)
        return g.displacement.sum() + g.scale.sum() + g.color.sum()

    assert grad_check(total, feats).ok(1e-3)
    reps = grad_check_params(lambda: total(feats), head)
    assert all(r.ok(1e-3) for r in reps.values()), reps


# ---------------------------------------------------------------- shape model


def test_shape_input_length_at_large_scale():
    grid = torch.zeros(64, 64, 2048)
    assert shape_input(grid).shape == (6144,)
    assert ShapeMLP(6144).fc1.in_features == 6144


def test_shape_input_constant_grid():
    grid = torch.full((2, 3, 4, 5), 0.7, dtype=torch.float64)
    v = shape_input(grid)
    assert v.shape == (2, 5 + 12)
    torch.testing.assert_close(v, torch.full_like(v, 0.7))


def test_shape_input_averages_against_numpy():
    rng = np.random.default_rng(0)
    grid = rng.normal(size=(3, 4, 6))
    v = shape_input(torch.tensor(grid)).numpy()
    np.testing.assert_allclose(v[:6], grid.mean(axis=(0, 1)), atol=1e-12)
    np.testing.assert_allclose(v[6:], grid.mean(axis=2).reshape(-1), atol=1e-12)


def test_zero_features_zero_output_layer_give_zero_beta():
    mlp = _zero_out(ShapeMLP(6 + 4, hidden=8))
    assert torch.all(predict_shape(torch.zeros(2, 2, 6), mlp) == 0)
    mlp = _zero_out(ShapeMLP(34, hidden=8))
    assert torch.all(predict_shape_from_text(torch.zeros(34), mlp) == 0)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        predict_shape(torch.zeros(2, 2, 6), ShapeMLP(11))


def test_text_shape_prediction_is_deterministic_and_distinct():
    torch.manual_seed(1)
    mlp = ShapeMLP(34, n_shape=10)
    a = torch.zeros(34)
    a[[0, 3, 5]] = 1
    b = torch.zeros(34)
    b[[1, 4, 6]] = 1
    ba, bb = predict_shape_from_text(a, mlp), predict_shape_from_text(b, mlp)
    assert ba.shape == (10,)
    assert torch.equal(ba, predict_shape_from_text(a, mlp))
    assert not torch.allclose(ba, bb)


def test_shape_gradients():
    torch.manual_seed(2)
    mlp = ShapeMLP(5 + 6, hidden=7).double()
    grid = torch.randn(2, 3, 5, dtype=torch.float64)
    w = torch.randn(10, dtype=torch.float64)
    assert grad_check(lambda g: (predict_shape(g, mlp) * w).sum(), grid).ok(1e-3)
    text = ShapeMLP(34, hidden=7).double()
    enc = torch.rand(34, dtype=torch.float64)
    assert grad_check(lambda e: (predict_shape_from_text(e, text) * w).sum(), enc).ok(1e-3)
    reps = grad_check_params(lambda: (predict_shape(grid, mlp) * w).sum(), mlp)
    assert all(r.ok(1e-3) for r in reps.values()), reps
