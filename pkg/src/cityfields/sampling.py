"""Sample placement along rays: stratified sampling and a one-round proposal
sampler with its own small static/dynamic density grids, plus the histogram
and distortion losses that train it."""

from __future__ import annotations

import torch

from .fields import FieldConfig
from .hashgrid import DYNAMIC4D, STATIC3D, ContractError, HashGrid
from .nn import Head, Mlp
from .render import quadrature_weights


def stratified_samples(near, far, n: int, generator: torch.Generator | None = None, jitter: bool = True):
    """One draw per stratum of [near, far] for each ray -> (R, n), sorted.

    Without jitter (or without a generator) the stratum midpoints are used.
    """
    if n <= 0:
        raise ContractError("need at least one sample per ray")
    near = torch.as_tensor(near)
    far = torch.as_tensor(far)
    shape = near.shape + (n,)
    if jitter and generator is not None:
        u = torch.rand(shape, generator=generator, dtype=torch.float64).to(near.dtype)
    else:
        u = torch.full(shape, 0.5, dtype=near.dtype)
    frac = (torch.arange(n, dtype=near.dtype) + u) / n
    return near[..., None] + (far - near)[..., None] * frac


def edges_from_points(points, near, far):
    """Interval edges around sorted sample points: near, midpoints, far."""
    mid = 0.5 * (points[..., 1:] + points[..., :-1])
    return torch.cat([near[..., None], mid, far[..., None]], -1)


def sample_pdf(edges, weights, n: int, generator: torch.Generator | None = None, jitter: bool = True):
    """Inverse-CDF samples from the piecewise-constant density on ``edges``.

    Rays whose weights are all zero get exactly the stratified samples of
    [first edge, last edge] drawn from the same random numbers.
    """
    total = weights.sum(-1, keepdim=True)
    empty = total[..., 0] <= 0
    pdf = torch.where(empty[..., None], torch.ones_like(weights), weights)
    pdf = pdf / pdf.sum(-1, keepdim=True)
    cdf = torch.cat([torch.zeros_like(pdf[..., :1]), torch.cumsum(pdf, -1)], -1)
    cdf[..., -1] = 1.0
    shape = weights.shape[:-1] + (n,)
    if jitter and generator is not None:
        u = torch.rand(shape, generator=generator, dtype=torch.float64).to(edges.dtype)
    else:
        u = torch.full(shape, 0.5, dtype=edges.dtype)
    u = (torch.arange(n, dtype=edges.dtype) + u) / n
    idx = torch.searchsorted(cdf.contiguous(), u.contiguous(), right=True).clamp(1, weights.shape[-1])
    c0 = torch.gather(cdf, -1, idx - 1)
    c1 = torch.gather(cdf, -1, idx)
    e0 = torch.gather(edges, -1, idx - 1)
    e1 = torch.gather(edges, -1, idx)
    frac = torch.where(c1 > c0, (u - c0) / torch.where(c1 > c0, c1 - c0, torch.ones_like(c1)),
                       torch.zeros_like(u))
    out = (e0 + frac * (e1 - e0)).clamp(edges[..., :1], edges[..., -1:])
    flat = edges[..., :1] + (edges[..., -1:] - edges[..., :1]) * u
    return torch.where(empty[..., None], flat, out)


class ProposalNetwork:
    """Small static and dynamic density grids with one-hidden-layer trunks."""

    def __init__(self, config: FieldConfig, log2_table_size: int, n_levels: int | None = None,
                 hidden: int = 16, generator=None, dtype=torch.float32, dynamic: bool = True):
        if log2_table_size >= config.log2_table_size:
            raise ContractError("proposal tables must be smaller than the main model's")
        self.static_grid = HashGrid(config.grid(STATIC3D, log2_table_size, n_levels), generator, dtype)
        self.static_net = Mlp(self.static_grid.config.output_dim, (hidden,),
                              (Head("density", 1, config.density_activation),), generator, dtype)
        self.dynamic_grid = self.dynamic_net = None
        if dynamic:
            self.dynamic_grid = HashGrid(config.grid(DYNAMIC4D, log2_table_size, n_levels), generator, dtype)
            self.dynamic_net = Mlp(self.dynamic_grid.config.output_dim, (hidden,),
                                   (Head("density", 1, config.density_activation),), generator, dtype)

    def __call__(self, x, t, vid):
        """(static density, dynamic density or None) at normalized points (N, 3)."""
        s = self.static_net(self.static_grid.encode(x))["density"][:, 0]
        if self.dynamic_grid is None:
            return s, None
        d = self.dynamic_net(self.dynamic_grid.encode(x, t, vid))["density"][:, 0]
        return s, d

    def named_tensors(self, prefix: str) -> dict[str, torch.Tensor]:
        out = {f"{prefix}.static_grid": self.static_grid.table}
        parts = [("static_net", self.static_net)]
        if self.dynamic_grid is not None:
            out[f"{prefix}.dynamic_grid"] = self.dynamic_grid.table
            parts.append(("dynamic_net", self.dynamic_net))
        for name, mlp in parts:
            for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
                out[f"{prefix}.{name}.w{i}"] = w
                out[f"{prefix}.{name}.b{i}"] = b
        return out


def proposal_resample(near, far, n_uniform: int, n_resampled: int, density_fn, norm_scale,
                      generator: torch.Generator | None = None, jitter: bool = True):
    """Place samples with the proposal density.

    ``density_fn(points (R, n)) -> (R, n)`` evaluates the combined proposal
    density at ray distances; ``norm_scale`` (R,) converts ray distance to
    normalized length. Returns (all sorted points, proposal edges, proposal
    weights, uniform points).
    """
    uniform = stratified_samples(near, far, n_uniform, generator, jitter)
    edges = edges_from_points(uniform, near, far)
    sigma = density_fn(uniform)
    delta = (edges[..., 1:] - edges[..., :-1]) * norm_scale[..., None]
    w, _ = quadrature_weights(sigma, delta)
    extra = sample_pdf(edges, w.detach(), n_resampled, generator, jitter)
    points = torch.sort(torch.cat([uniform, extra], -1), -1).values
    return points, edges, w, uniform


def interval_overlap_bound(prop_edges, main_edges, main_weights):
    """Total main weight on intervals overlapping each proposal bin -> (R, n_prop)."""
    lo = torch.maximum(prop_edges[..., :-1, None], main_edges[..., None, :-1])
    hi = torch.minimum(prop_edges[..., 1:, None], main_edges[..., None, 1:])
    overlap = (hi > lo).to(main_weights.dtype)
    return (overlap * main_weights[..., None, :]).sum(-1)


def histogram_loss(prop_edges, prop_weights, main_edges, main_weights, eps: float = 0.01):
    """Per-ray sum over proposal bins of max(0, bound - w_prop)^2 / (w_prop + eps).

    The main histogram is treated as a constant.
    """
    if prop_edges.shape[:-1] != main_edges.shape[:-1]:
        raise ContractError("proposal and main histograms describe different rays")
    bound = interval_overlap_bound(prop_edges, main_edges, main_weights.detach())
    return (torch.clamp(bound - prop_weights, min=0) ** 2 / (prop_weights + eps)).sum(-1)


def distortion_loss(edges, weights):
    """sum_ij w_i w_j |m_i - m_j| + 1/3 sum_i w_i^2 (t_{i+1} - t_i), in O(n)."""
    mid = 0.5 * (edges[..., 1:] + edges[..., :-1])
    width = edges[..., 1:] - edges[..., :-1]
    # pairwise term via prefix sums: 2 * sum_i w_i (m_i W_{<i} - (w m)_{<i})
    wm = weights * mid
    w_before = torch.cumsum(weights, -1) - weights
    wm_before = torch.cumsum(wm, -1) - wm
    inter = 2 * (weights * (mid * w_before - wm_before)).sum(-1)
    intra = (weights ** 2 * width).sum(-1) / 3
    return inter + intra
