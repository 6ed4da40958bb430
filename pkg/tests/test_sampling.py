import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from cityfields.fields import FieldConfig
from cityfields.hashgrid import ContractError
from cityfields.sampling import (ProposalNetwork, distortion_loss, edges_from_points, histogram_loss,
                                 proposal_resample, sample_pdf, stratified_samples)

D = torch.float64


def test_stratified_without_jitter_gives_midpoints():
    near, far = torch.tensor([1.0], dtype=D), torch.tensor([3.0], dtype=D)
    assert torch.allclose(stratified_samples(near, far, 1, jitter=False), torch.tensor([[2.0]], dtype=D))
    assert torch.allclose(stratified_samples(near, far, 4, jitter=False),
                          torch.tensor([[1.25, 1.75, 2.25, 2.75]], dtype=D))
    with pytest.raises(ContractError):
        stratified_samples(near, far, 0)


def test_stratified_statistics():
    n_rays, n = 25_000, 4
    near, far = torch.zeros(n_rays, dtype=D), torch.full((n_rays,), 2.0, dtype=D)
    t = stratified_samples(near, far, n, torch.Generator().manual_seed(0))
    stratum = torch.floor(t / (2.0 / n)).long()
    assert torch.equal(stratum, torch.arange(n).expand(n_rays, n))
    flat = t.flatten()
    sd = 2.0 / np.sqrt(12) / np.sqrt(flat.numel())  # std of a uniform mean, an upper bound for stratified
    assert abs(float(flat.mean()) - 1.0) < 3 * sd


def test_stratified_is_deterministic_per_seed():
    near, far = torch.zeros(3, dtype=D), torch.ones(3, dtype=D)
    a = stratified_samples(near, far, 8, torch.Generator().manual_seed(7))
    b = stratified_samples(near, far, 8, torch.Generator().manual_seed(7))
    assert torch.equal(a, b)


def test_uniform_density_resamples_uniformly():
    edges = torch.linspace(0, 1, 65, dtype=D)[None]
    w = torch.full((1, 64), 1 / 64, dtype=D)
    draws = torch.cat([sample_pdf(edges, w, 100, torch.Generator().manual_seed(s)) for s in range(100)], -1)
    assert stats.kstest(draws.flatten().numpy(), "uniform").statistic <= 0.05


def test_spike_bin_captures_most_samples():
    edges = torch.linspace(0, 1, 33, dtype=D)[None]
    w = torch.full((1, 32), 0.01 / 31, dtype=D)
    w[0, 13] = 0.99
    t = sample_pdf(edges, w, 1000, torch.Generator().manual_seed(1))
    inside = ((t >= edges[0, 13]) & (t <= edges[0, 14])).double().mean()
    assert float(inside) >= 0.9


def test_zero_weights_fall_back_to_stratified():
    near, far = torch.tensor([0.5, 1.0], dtype=D), torch.tensor([2.5, 4.0], dtype=D)
    pts = stratified_samples(near, far, 16, jitter=False)
    edges = edges_from_points(pts, near, far)
    got = sample_pdf(edges, torch.zeros(2, 16, dtype=D), 8, torch.Generator().manual_seed(3))
    expected = stratified_samples(near, far, 8, torch.Generator().manual_seed(3))
    assert torch.allclose(got, expected, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_resampled_points_in_range_and_sorted(seed):
    g = torch.Generator().manual_seed(seed)
    near = torch.rand(4, generator=g, dtype=D)
    far = near + 0.1 + torch.rand(4, generator=g, dtype=D)
    density = lambda t: torch.exp(-((t - 1.0) ** 2) * 20) * 50
    pts, edges, w, uniform = proposal_resample(near, far, 16, 8, density, torch.ones(4, dtype=D), g)
    assert pts.shape == (4, 24)
    assert (pts >= near[:, None]).all() and (pts <= far[:, None]).all()
    assert (pts[:, 1:] >= pts[:, :-1]).all()


def _brute_bound(prop_edges, main_edges, main_w):
    out = np.zeros(len(prop_edges) - 1)
    for j in range(len(out)):
        for i in range(len(main_w)):
            lo = max(prop_edges[j], main_edges[i])
            hi = min(prop_edges[j + 1], main_edges[i + 1])
            if hi > lo:
                out[j] += main_w[i]
    return out


def test_histogram_loss_examples():
    edges = torch.tensor([[0.0, 1.0, 2.0]], dtype=D)
    main = torch.tensor([[0.5, 0.0]], dtype=D)
    assert float(histogram_loss(edges, torch.tensor([[0.0, 0.3]], dtype=D), edges, main)) == pytest.approx(25.0)
    assert float(histogram_loss(edges, torch.tensor([[0.6, 0.1]], dtype=D), edges, main)) == 0
    with pytest.raises(ContractError):
        histogram_loss(edges, main, edges.expand(2, 3), main.expand(2, 2))


def test_histogram_loss_matches_brute_force_overlap():
    rng = np.random.default_rng(4)
    pe = np.sort(rng.random(9))
    me = np.sort(rng.random(14))
    pw, mw = rng.random(8) * 0.3, rng.random(13) * 0.2
    bound = _brute_bound(pe, me, mw)
    eps = 0.01
    expected = sum(max(0.0, b - p) ** 2 / (p + eps) for b, p in zip(bound, pw))
    t = lambda a: torch.tensor(a[None])
    assert float(histogram_loss(t(pe), t(pw), t(me), t(mw), eps)) == pytest.approx(expected, rel=1e-12)


def test_histogram_loss_zero_when_bounded():
    rng = np.random.default_rng(6)
    pe, me = np.sort(rng.random(7)), np.sort(rng.random(11))
    mw = rng.random(10) * 0.1
    pw = _brute_bound(pe, me, mw) + rng.random(6) * 0.05
    t = lambda a: torch.tensor(a[None])
    assert float(histogram_loss(t(pe), t(pw), t(me), t(mw))) == 0


def test_histogram_gradient_reaches_proposal_only():
    edges = torch.tensor([[0.0, 1.0, 2.0]], dtype=D)
    pw = torch.tensor([[0.1, 0.1]], dtype=D, requires_grad=True)
    mw = torch.tensor([[0.5, 0.2]], dtype=D, requires_grad=True)
    histogram_loss(edges, pw, edges, mw).sum().backward()
    assert pw.grad.abs().sum() > 0 and mw.grad is None


def test_distortion_examples():
    edges = torch.tensor([[0.0, 0.25, 0.5, 1.0]], dtype=D)
    w = torch.tensor([[0.0, 0.8, 0.0]], dtype=D)
    assert float(distortion_loss(edges, w)) == pytest.approx(0.64 * 0.25 / 3)
    assert float(distortion_loss(edges, torch.zeros(1, 3, dtype=D))) == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 20))
def test_distortion_matches_double_sum(seed, n):
    rng = np.random.default_rng(seed)
    e = np.sort(rng.random(n + 1))
    w = rng.random(n)
    m = 0.5 * (e[1:] + e[:-1])
    expected = sum(w[i] * w[j] * abs(m[i] - m[j]) for i in range(n) for j in range(n))
    expected += sum(w[i] ** 2 * (e[i + 1] - e[i]) for i in range(n)) / 3
    got = float(distortion_loss(torch.tensor(e[None]), torch.tensor(w[None])))
    assert got == pytest.approx(expected, rel=1e-9, abs=1e-12)


def test_proposal_tables_must_be_smaller():
    cfg = FieldConfig(n_videos=1, log2_table_size=12, n_levels=2)
    with pytest.raises(ContractError):
        ProposalNetwork(cfg, 12)
    net = ProposalNetwork(cfg, 10, generator=torch.Generator().manual_seed(0), dtype=D)
    x = torch.rand(5, 3, dtype=D)
    s, d = net(x, torch.rand(5, dtype=D), torch.ones(5, dtype=torch.long))
    assert s.shape == (5,) and d.shape == (5,) and (s >= 0).all() and (d >= 0).all()
