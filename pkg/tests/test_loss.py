import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lsnet.errors import ConfigError, ContractError
from lsnet.loss import (
    PROB_CLAMP, LossConfig, classification_loss, endpoint_error_d, focal_loss, focal_loss_from_logits,
    multitask_loss, multitask_loss_from_logits, regression_loss, smooth_l1, swap_endpoints,
    wing_constant, wing_loss,
)

prob = st.floats(1e-6, 1 - 1e-6)
label = st.sampled_from([1, -1])
vec4 = st.lists(st.floats(-5, 5), min_size=4, max_size=4).map(np.array)


def test_focal_examples():
    assert focal_loss(1 - 1e-12, 1) < 1e-12
    assert abs(focal_loss(0.5, 1, 0.0, 0.5) - 0.5 * math.log(2)) < 1e-15
    assert abs(focal_loss(0.9, 1, 2.0, 0.25) - (-0.25 * 0.01 * math.log(0.9))) < 1e-15
    assert abs(focal_loss(0.9, 1, 2.0, 0.25) - 2.6341e-4) < 1e-8
    # negatives use 1 - p and 1 - alpha
    assert abs(focal_loss(0.1, -1, 2.0, 0.25) - (-0.75 * 0.01 * math.log(0.9))) < 1e-15


def test_focal_clamp():
    assert math.isfinite(focal_loss(0.0, 1)) and math.isfinite(focal_loss(1.0, -1))
    assert abs(focal_loss(0.0, 1, 0.0, 1.0) + math.log(PROB_CLAMP)) < 1e-12


@settings(max_examples=300)
@given(prob, label)
def test_focal_half_cross_entropy(p, y):
    ce = -math.log(p if y == 1 else 1 - p)
    assert abs(focal_loss(p, y, 0.0, 0.5) - 0.5 * ce) <= 1e-12 * max(1.0, ce)


@settings(max_examples=200)
@given(st.floats(-20, 20), label)
def test_focal_from_logits_matches_probabilities(z, y):
    logits = torch.tensor([0.0, z], dtype=torch.float64)
    p = float(torch.softmax(logits, 0)[1])
    a = float(focal_loss_from_logits(logits, torch.tensor(y)))
    assert abs(a - focal_loss(p, y)) <= 1e-9 * max(1.0, abs(a))


@settings(max_examples=200)
@given(prob, prob, label)
def test_focal_monotone_in_pt(a, b, y):
    if abs(a - b) < 1e-9:
        return
    lo, hi = sorted((a, b))
    # p_t = p for positives, 1 - p for negatives
    fa, fb = (focal_loss(lo, y), focal_loss(hi, y))
    assert (fa > fb) if y == 1 else (fa < fb)


def test_wing_examples():
    c = wing_constant(10, 2)
    assert abs(c - (10 - 10 * math.log(6))) < 1e-15
    assert wing_loss(0.0) == 0.0
    assert abs(wing_loss(10.0) - 10 * math.log(6)) < 1e-12
    assert abs(wing_loss(20.0) - 27.917594692280550) < 1e-9
    # both branches agree at the knee
    log_branch = 10 * math.log1p(10 / 2)
    lin_branch = 10 - c
    assert abs(log_branch - lin_branch) <= 1e-12 * abs(log_branch)
    below = wing_loss(10 - 1e-9)
    assert abs(below - wing_loss(10.0)) < 1e-8


@settings(max_examples=200)
@given(st.floats(0, 50), st.floats(0, 50))
def test_wing_monotone(a, b):
    if abs(a - b) < 1e-9:
        return
    lo, hi = sorted((a, b))
    assert wing_loss(lo) < wing_loss(hi)


def test_endpoint_error_examples():
    t = np.array([0.1, 0.2, 0.7, 0.9])
    assert endpoint_error_d(t, t) == 0
    assert endpoint_error_d(swap_endpoints(t), t) == 0
    assert endpoint_error_d(np.zeros(4), np.ones(4)) == 4


@settings(max_examples=200)
@given(vec4, vec4)
def test_endpoint_error_symmetric(e, t):
    d = endpoint_error_d(e, t)
    assert abs(d - endpoint_error_d(swap_endpoints(e), t)) < 1e-12
    assert abs(d - endpoint_error_d(e, swap_endpoints(t))) < 1e-12
    assert d == min(np.abs(t - e).sum(), np.abs(t - e[[2, 3, 0, 1]]).sum())


def test_smooth_l1():
    assert smooth_l1(0.5) == 0.125 and smooth_l1(2.0) == 1.5
    assert abs(smooth_l1(1.0 - 1e-12) - smooth_l1(1.0)) < 1e-11


def test_l2_uses_swap_min_order():
    e = torch.tensor([[0.9, 0.9, 0.0, 0.0]], dtype=torch.float64)
    t = torch.tensor([[0.0, 0.0, 1.0, 1.0]], dtype=torch.float64)
    got = regression_loss(e, t, LossConfig(reg_variant="l2"))
    assert abs(float(got[0]) - 0.02) < 1e-12  # swapped order, squared: 2 * 0.1^2


@pytest.mark.parametrize("variant", ["wing", "l1", "l2", "smooth_l1"])
def test_reg_term_invariant_to_target_order(variant, rng):
    cfg = LossConfig(reg_variant=variant)
    e = torch.from_numpy(rng.uniform(size=(20, 4)))
    t = torch.from_numpy(rng.uniform(size=(20, 4)))
    a = regression_loss(e, t, cfg)
    b = regression_loss(e, swap_endpoints(t), cfg)
    assert torch.allclose(a, b, atol=1e-15)


def _lattice(rng, n=5, pos_frac=0.3):
    labels = np.where(rng.uniform(size=(n, n)) < pos_frac, 1, -1)
    return (torch.from_numpy(rng.uniform(0.01, 0.99, size=(n, n))), torch.from_numpy(labels),
            torch.from_numpy(rng.uniform(size=(n, n, 4))), torch.from_numpy(rng.uniform(size=(n, n, 4))))


def test_multitask_reduction(rng):
    p, y, e, t = _lattice(rng)
    cfg = LossConfig()
    rep = multitask_loss(p, y, e, t, cfg)
    cls = focal_loss(p.numpy(), y.numpy())
    pos = y.numpy() > 0
    e, t = e.numpy(), t.numpy()
    d = np.minimum(np.abs(t - e).sum(-1), np.abs(t - e[..., [2, 3, 0, 1]]).sum(-1))
    reg = wing_loss(d[pos]).mean()
    assert abs(float(rep.cls_term) - cls.mean()) < 1e-12
    assert abs(float(rep.reg_term) - reg) < 1e-12
    assert abs(float(rep.total) - (cls.mean() + reg)) < 1e-12
    assert rep.positive_cell_count == pos.sum()


def test_multitask_examples(rng):
    p, y, e, t = _lattice(rng)
    rep = multitask_loss(p, y, e, t, LossConfig(lam=0.0))
    assert float(rep.total) == float(rep.cls_term)
    neg = -torch.ones_like(y)
    rep = multitask_loss(p, neg, e * 100, t, LossConfig())
    assert float(rep.reg_term) == 0.0 and rep.positive_cell_count == 0
    # one positive with a perfect prediction
    y1 = -torch.ones_like(y)
    y1[2, 2] = 1
    p1 = torch.full_like(p, 0.2)
    p1[2, 2] = 1 - PROB_CLAMP
    rep = multitask_loss(p1, y1, t.clone(), t, LossConfig())
    negs = focal_loss(0.2, -1) * (y.numel() - 1)
    assert abs(float(rep.total) - negs / y.numel()) < 1e-6


def test_cross_entropy_variant(rng):
    p, y, e, t = _lattice(rng)
    got = classification_loss(p, y, LossConfig(cls_variant="cross_entropy"))
    ce = -np.log(np.where(y.numpy() > 0, p.numpy(), 1 - p.numpy()))
    assert np.allclose(got.numpy(), ce, atol=1e-12)


def test_cell_mask_excludes_cells(rng):
    p, y, e, t = _lattice(rng)
    mask = torch.zeros(5, 5, dtype=torch.bool)
    mask[::2, ::2] = True
    rep = multitask_loss(p, y, e, t, LossConfig(), cell_mask=mask)
    sub = multitask_loss(p[::2, ::2], y[::2, ::2], e[::2, ::2], t[::2, ::2], LossConfig())
    assert abs(float(rep.total) - float(sub.total)) < 1e-12
    with pytest.raises(ContractError):
        multitask_loss(p, y, e, t, LossConfig(), cell_mask=torch.zeros(5, 5, dtype=torch.bool))


def test_logits_and_probability_paths_agree(rng):
    logits = torch.from_numpy(rng.normal(size=(2, 5, 5, 2)))
    y = torch.from_numpy(np.where(rng.uniform(size=(2, 5, 5)) < 0.4, 1, -1))
    e = torch.from_numpy(rng.uniform(size=(2, 5, 5, 4)))
    t = torch.from_numpy(rng.uniform(size=(2, 5, 5, 4)))
    for cls_variant in ("focal", "cross_entropy"):
        cfg = LossConfig(cls_variant=cls_variant)
        a = multitask_loss_from_logits(logits, y, e, t, cfg)
        b = multitask_loss(torch.softmax(logits, -1)[..., 1], y, e, t, cfg)
        assert abs(float(a.total) - float(b.total)) < 1e-10


def test_shape_mismatch():
    with pytest.raises(ContractError):
        multitask_loss(torch.zeros(3, 3), torch.ones(3, 3), torch.zeros(3, 3, 4), torch.zeros(3, 4, 4), LossConfig())
    with pytest.raises(ContractError):
        multitask_loss_from_logits(torch.zeros(3, 3, 3), torch.ones(3, 3), torch.zeros(3, 3, 4),
                                   torch.zeros(3, 3, 4), LossConfig())


@pytest.mark.parametrize("kw", [dict(lam=-1), dict(gamma=-0.1), dict(alpha=1.5), dict(wing_w=0),
                                dict(wing_eps=-2), dict(cls_variant="hinge"), dict(reg_variant="l3")])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        LossConfig(**kw)


def test_wing_constant_tracks_config():
    cfg = LossConfig(wing_w=5, wing_eps=1)
    assert cfg.wing_c == wing_constant(5, 1)


def test_gradcheck_small():
    torch.manual_seed(0)
    logits = torch.randn(1, 3, 3, 2, dtype=torch.float64, requires_grad=True)
    reg = (torch.rand(1, 3, 3, 4, dtype=torch.float64) * 30).requires_grad_()
    y = torch.tensor([[[1, -1, 1], [-1, 1, -1], [1, 1, -1]]])
    t = torch.rand(1, 3, 3, 4, dtype=torch.float64) * 30

    def f(a, b):
        return multitask_loss_from_logits(a, y, b, t, LossConfig()).total

    assert torch.autograd.gradcheck(f, (logits, reg), eps=1e-6, atol=1e-5)
