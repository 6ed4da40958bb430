import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cityfields.losses import (LOSS_NAMES, ConfigError, LossWeights, binary_entropy, dynamic_ratio,
                               factorization_losses, flow_regularizers, reconstruction_losses, total_loss,
                               warping_losses)

D = torch.float64


def _h(x):
    return 0.0 if x in (0.0, 1.0) else -(x * math.log(x) + (1 - x) * math.log(1 - x))


def test_entropy_endpoints_and_midpoint():
    x = torch.tensor([0.0, 0.5, 1.0], dtype=D, requires_grad=True)
    h = binary_entropy(x)
    assert h[0] == 0 and h[2] == 0
    assert abs(float(h[1].detach()) - math.log(2)) < 1e-12
    h.sum().backward()
    assert torch.isfinite(x.grad).all()


def test_skewed_entropy_values():
    r = torch.tensor([0.3], dtype=D)
    assert abs(float(binary_entropy(r ** 1.75)) - 0.370) < 1e-3
    assert abs(float(binary_entropy(r)) - 0.611) < 1e-3
    for v in (0.1, 0.2, 0.3, 0.4):
        t = torch.tensor(v, dtype=D)
        assert binary_entropy(t ** 1.75) < binary_entropy(t)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-6, 1 - 1e-6))
def test_entropy_matches_scalar_formula(x):
    assert abs(float(binary_entropy(torch.tensor(x, dtype=D))) - _h(x)) < 1e-12
    assert float(binary_entropy(torch.tensor(x, dtype=D) ** 1.75)) > 0


def test_reconstruction_examples():
    target = torch.tensor([[0.2, 0.3, 0.4]], dtype=D)
    zero = reconstruction_losses(target, target, target, target, None, torch.ones(1, dtype=D),
                                 torch.ones(1, dtype=D), torch.ones(1, dtype=torch.bool),
                                 [(torch.ones(1, 2, dtype=D), torch.ones(1, 2, dtype=D), torch.ones(1, dtype=torch.bool))])
    assert all(float(t) == 0 for t in zero)
    l_c, *_ = reconstruction_losses(target + torch.tensor([0.1, 0, 0], dtype=D), target)
    assert abs(float(l_c) - 0.01) < 1e-12


def test_reconstruction_matches_straight_line_recomputation():
    rng = np.random.default_rng(0)
    n = 6
    c, ct = rng.random((n, 3)), rng.random((n, 3))
    f, ft = rng.random((n, 5)), rng.random((n, 5))
    fm = rng.random(n) < 0.7
    d, dt = rng.random(n) * 5, rng.random(n) * 5
    dm = rng.random(n) < 0.5
    flows = [(rng.random((n, 2)), rng.random((n, 2)), rng.random(n) < 0.5) for _ in range(2)]
    t = lambda a: torch.tensor(a)
    got = reconstruction_losses(t(c), t(ct), t(f), t(ft), t(fm), t(d), t(dt), t(dm),
                                [(t(a), t(b), t(m)) for a, b, m in flows])
    for i in range(n):
        assert abs(float(got[0][i]) - sum((c[i, k] - ct[i, k]) ** 2 for k in range(3))) < 1e-12
        lf = sum(abs(f[i, k] - ft[i, k]) for k in range(5)) if fm[i] else 0.0
        assert abs(float(got[1][i]) - lf) < 1e-12
        assert abs(float(got[2][i]) - ((d[i] - dt[i]) ** 2 if dm[i] else 0.0)) < 1e-12
        lo = sum(abs(a[i, k] - b[i, k]) for a, b, m in flows if m[i] for k in range(2))
        assert abs(float(got[3][i]) - lo) < 1e-12


def test_warping_examples():
    target = torch.zeros(1, 3, dtype=D)
    warped = torch.tensor([[0.2, 0.0, 0.0]], dtype=D)
    mask = torch.ones(1, dtype=torch.bool)
    full = warping_losses(target, None, [(warped, None, torch.ones(1, dtype=D), mask)])
    assert float(full[0]) == 0
    half = warping_losses(target, None, [(warped, None, torch.full((1,), 0.5, dtype=D), mask)])
    assert abs(float(half[0]) - 0.02) < 1e-12
    same = warping_losses(target, None, [(target, None, torch.zeros(1, dtype=D), mask)])
    assert float(same[0]) == 0
    plain = warping_losses(target, None, [(warped, None, torch.full((1,), 0.5, dtype=D), mask)], use_occlusion=False)
    assert abs(float(plain[0]) - 0.04) < 1e-12


def test_warping_gradient_scales_with_visibility():
    target = torch.zeros(1, 3, dtype=D)
    mask = torch.ones(1, dtype=torch.bool)
    grads = []
    for occ in (0.0, 0.25, 0.5):
        w = torch.tensor([[0.3, -0.1, 0.2]], dtype=D, requires_grad=True)
        warping_losses(target, None, [(w, None, torch.tensor([occ], dtype=D), mask)])[0].sum().backward()
        grads.append(w.grad.clone())
    assert torch.allclose(grads[1], 0.75 * grads[0]) and torch.allclose(grads[2], 0.5 * grads[0])


def _flow_oracle(points, bwd, fwd, cycles):
    r, s, _ = points.shape
    out = []
    for i in range(r):
        cyc = 0.0
        for w, there, back, mask in cycles:
            if mask[i]:
                cyc += sum(w[i, j] * sum(abs(there[i, j, k] + back[i, j, k]) for k in range(3)) for j in range(s)) / s
        sm = 0.0
        for f in (bwd, fwd):
            for j in range(s - 1):
                dist = math.sqrt(sum((points[i, j + 1, k] - points[i, j, k]) ** 2 for k in range(3)))
                sm += math.exp(-2 * dist) * sum(abs(f[i, j + 1, k] - f[i, j, k]) for k in range(3)) / s
        sm += sum(abs(bwd[i, j, k] + fwd[i, j, k]) for j in range(s) for k in range(3)) / s
        slo = sum(abs(bwd[i, j, k]) + abs(fwd[i, j, k]) for j in range(s) for k in range(3)) / s
        out.append((cyc, sm, slo))
    return np.array(out)


def test_flow_regularizers_match_hand_expansion():
    rng = np.random.default_rng(5)
    r, s = 3, 4
    pts, bwd, fwd = rng.random((r, s, 3)), rng.normal(size=(r, s, 3)), rng.normal(size=(r, s, 3))
    cycles = [(rng.random((r, s)), rng.normal(size=(r, s, 3)), rng.normal(size=(r, s, 3)), rng.random(r) < 0.6)
              for _ in range(2)]
    t = torch.tensor
    got = flow_regularizers(t(pts), t(bwd), t(fwd), [tuple(t(a) for a in c) for c in cycles])
    expected = _flow_oracle(pts, bwd, fwd, cycles)
    assert np.allclose(torch.stack(got, -1).numpy(), expected, atol=1e-12)


def test_linear_motion_has_no_cycle_or_temporal_penalty():
    pts = torch.rand(2, 5, 3, dtype=D)
    v = torch.tensor([0.01, -0.02, 0.005], dtype=D).expand(2, 5, 3)
    mask = torch.ones(2, dtype=torch.bool)
    cyc, sm, slo = flow_regularizers(pts, -v, v, [(torch.ones(2, 5, dtype=D), v, -v, mask)])
    assert torch.equal(cyc, torch.zeros(2, dtype=D))
    assert torch.allclose(sm, torch.zeros(2, dtype=D))  # constant along the ray as well
    zero = torch.zeros(2, 5, 3, dtype=D)
    assert all(float(x.abs().sum()) == 0 for x in flow_regularizers(pts, zero, zero))


def test_factorization_examples():
    delta = torch.ones(1, 3, dtype=D)
    l_e, l_dmax, l_rho = factorization_losses(torch.rand(1, 3, dtype=D), torch.zeros(1, 3, dtype=D),
                                              torch.zeros(1, 3, dtype=D), delta)
    assert float(l_e) == 0 and float(l_dmax) == 0 and float(l_rho) == 0
    one = torch.ones(1, 1, dtype=D)
    l_e, l_dmax, _ = factorization_losses(one, one, torch.zeros(1, 1, dtype=D), one, skew=1.0)
    assert abs(float(l_e) - math.log(2)) < 1e-12 and float(l_dmax) == 0.5
    _, _, l_rho = factorization_losses(one, one, torch.full((1, 2), 0.5, dtype=D), torch.full((1, 2), 0.1, dtype=D))
    assert abs(float(l_rho) - 0.05) < 1e-12


def test_dynamic_ratio_zero_density_is_zero():
    z = torch.zeros(3, dtype=D)
    assert torch.equal(dynamic_ratio(z, z), z)


def test_negative_weight_is_config_error():
    with pytest.raises(ConfigError):
        LossWeights(depth=-0.1)
    with pytest.raises(ConfigError):
        LossWeights(skew=0.0)


def test_flow_weight_schedule():
    w = LossWeights(flow_start=0.01)
    assert w.flow_weight(0, 1000) == pytest.approx(0.01)
    assert w.flow_weight(300, 1000) == pytest.approx(0.01 * (0.1 + 0.9 * 0.5))
    assert w.flow_weight(600, 1000) == pytest.approx(0.001)
    assert w.flow_weight(999, 1000) == pytest.approx(0.001)


def test_total_loss_examples_and_weighted_sum():
    w = LossWeights()
    zeros = {k: torch.tensor(0.0, dtype=D) for k in LOSS_NAMES}
    assert float(total_loss(zeros, w, 0, 10)) == 0
    only_c = dict(zeros, L_c=torch.tensor(1.0, dtype=D))
    assert float(total_loss(only_c, w, 0, 10)) == 1
    rng = np.random.default_rng(2)
    weights = LossWeights(*rng.random(8).tolist()[:7], skew=1.75)
    comp = {k: torch.tensor(v, dtype=D) for k, v in zip(LOSS_NAMES, rng.random(len(LOSS_NAMES)))}
    lam_o = weights.flow_weight(3, 10)
    c = {k: float(v) for k, v in comp.items()}
    expected = (c["L_c"] + weights.feature * c["L_f"] + weights.depth * c["L_depth"] + lam_o * c["L_o"]
                + c["Lw_c"] + weights.feature * c["Lw_f"]
                + weights.flow_reg * (c["L_cyc"] + c["L_sm"] + c["L_slo"])
                + weights.entropy * c["L_e"] + weights.max_dynamic * c["L_dmax"] + weights.shadow * c["L_rho"])
    assert abs(float(total_loss(comp, weights, 3, 10)) - expected) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=len(LOSS_NAMES), max_size=len(LOSS_NAMES)),
       st.sampled_from(LOSS_NAMES), st.floats(0, 5))
def test_total_is_monotone_in_each_component(values, name, bump):
    comp = {k: torch.tensor(v, dtype=D) for k, v in zip(LOSS_NAMES, values)}
    base = float(total_loss(comp, LossWeights(), 5, 10))
    comp[name] = comp[name] + bump
    assert float(total_loss(comp, LossWeights(), 5, 10)) >= base


def test_flags_drop_terms():
    comp = {k: torch.tensor(1.0, dtype=D) for k in LOSS_NAMES}
    w = LossWeights()
    full = float(total_loss(comp, w, 0, 10))
    assert float(total_loss(comp, w, 0, 10, frozenset({"no_depth"}))) == pytest.approx(full - w.depth)
    dropped_warp = 1 + w.feature + 3 * w.flow_reg + w.flow_weight(0, 10)
    assert float(total_loss(comp, w, 0, 10, frozenset({"no_warp"}))) == pytest.approx(full - dropped_warp)
    single = w.entropy + w.max_dynamic + w.shadow
    assert float(total_loss(comp, w, 0, 10, frozenset({"single_branch"}))) == pytest.approx(full - single)
