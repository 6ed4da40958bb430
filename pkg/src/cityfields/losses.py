"""Training objectives: reconstruction, warping, flow regularizers,
static/dynamic factorization and their weighted total.

Per-ray terms are returned as (R,) tensors; batch reduction (mean over rays)
happens in :func:`reduce_report`. Sums "over samples along the ray" in the
flow regularizers are normalized by the sample count so their scale does not
depend on how many samples a ray carries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch

LOSS_NAMES = ("L_c", "L_f", "L_depth", "L_o", "Lw_c", "Lw_f", "L_cyc", "L_sm", "L_slo", "L_e", "L_dmax",
              "L_rho")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    feature: float = 0.1
    depth: float = 0.1
    flow_start: float = 0.01
    flow_reg: float = 0.1
    entropy: float = 0.01
    max_dynamic: float = 0.01
    shadow: float = 0.01
    skew: float = 1.75
    flow_anneal_fraction: float = 0.6
    """λ_o decays by cosine to 10% of its start over this fraction of the run."""
    flow_floor: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be nonnegative")
        if self.skew <= 0:
            raise ConfigError("entropy skew k must be positive")

    def flow_weight(self, iteration: int, total: int) -> float:
        span = self.flow_anneal_fraction * max(total, 1)
        frac = min(iteration / span, 1.0) if span > 0 else 1.0
        scale = self.flow_floor + (1 - self.flow_floor) * 0.5 * (1 + math.cos(math.pi * frac))
        return self.flow_start * scale


def binary_entropy(x: torch.Tensor) -> torch.Tensor:
    """H(x) in nats with 0 log 0 := 0."""
    inside = (x > 0) & (x < 1)
    # evaluate on a safe stand-in at the endpoints so the gradient stays finite there
    xs = torch.where(inside, x, torch.full_like(x, 0.5))
    h = -(xs * torch.log(xs) + (1 - xs) * torch.log1p(-xs))
    return torch.where(inside, h, torch.zeros_like(h))


def reconstruction_losses(color, target_color, features=None, target_features=None, feature_mask=None,
                          depth=None, target_depth=None, depth_mask=None, flows=(), ):
    """Per-ray (L_c, L_f, L_depth, L_o).

    ``flows`` is a sequence of (rendered displacement, observed displacement,
    mask) per available direction. Absent targets contribute 0.
    """
    zero = torch.zeros(color.shape[0], dtype=color.dtype)
    l_c = ((color - target_color) ** 2).sum(-1)
    l_f = zero
    if features is not None and target_features is not None:
        l_f = (features - target_features).abs().sum(-1)
        if feature_mask is not None:
            l_f = torch.where(feature_mask, l_f, zero)
    l_d = zero
    if depth is not None and target_depth is not None:
        l_d = torch.where(depth_mask, (depth - target_depth) ** 2, zero)
    l_o = zero
    for rendered, observed, mask in flows:
        l_o = l_o + torch.where(mask, (rendered - observed).abs().sum(-1), zero)
    return l_c, l_f, l_d, l_o


def warping_losses(target_color, target_features, warped, use_occlusion: bool = True):
    """Per-ray (Lw_c, Lw_f) over ``warped`` = [(color, features, occlusion W, mask)]."""
    n = target_color.shape[0]
    l_c = torch.zeros(n, dtype=target_color.dtype)
    l_f = torch.zeros(n, dtype=target_color.dtype)
    for color, feats, occ, mask in warped:
        scale = (1 - occ) if use_occlusion else torch.ones_like(occ)
        scale = torch.where(mask, scale, torch.zeros_like(scale))
        l_c = l_c + scale * ((target_color - color) ** 2).sum(-1)
        if target_features is not None and feats is not None:
            l_f = l_f + scale * (target_features - feats).abs().sum(-1)
    return l_c, l_f


def flow_regularizers(points, flow_bwd, flow_fwd, cycles=()):
    """Per-ray (L_cyc, L_sm, L_slo).

    ``points`` (R, S, 3) normalized positions; ``flow_bwd``/``flow_fwd``
    (R, S, 3) predicted flows; ``cycles`` = [(occlusion factor (R, S),
    forward flow (R, S, 3), opposite flow at the advected point (R, S, 3),
    ray mask (R,))].
    """
    s = points.shape[1]
    l_cyc = torch.zeros(points.shape[0], dtype=points.dtype)
    for w, there, back, mask in cycles:
        term = (w * (there + back).abs().sum(-1)).sum(-1) / s
        l_cyc = l_cyc + torch.where(mask, term, torch.zeros_like(term))
    spatial = torch.zeros_like(l_cyc)
    if s > 1:
        near = torch.exp(-2 * (points[:, 1:] - points[:, :-1]).norm(dim=-1))
        for f in (flow_bwd, flow_fwd):
            spatial = spatial + (near * (f[:, 1:] - f[:, :-1]).abs().sum(-1)).sum(-1) / s
    temporal = (flow_bwd + flow_fwd).abs().sum(-1).sum(-1) / s
    l_slo = (flow_bwd.abs().sum(-1) + flow_fwd.abs().sum(-1)).sum(-1) / s
    return l_cyc, spatial + temporal, l_slo


def dynamic_ratio(static_density, dynamic_density):
    sigma = static_density + dynamic_density
    pos = sigma > 0
    return torch.where(pos, dynamic_density / torch.where(pos, sigma, torch.ones_like(sigma)),
                       torch.zeros_like(sigma))


def factorization_losses(static_density, dynamic_density, shadow, delta, skew: float = 1.75):
    """Per-ray (L_e, L_dmax, L_rho) with quadrature over interval lengths ``delta``."""
    r = dynamic_ratio(static_density, dynamic_density)
    l_e = (binary_entropy(r.clamp(min=0) ** skew) * delta).sum(-1)
    l_dmax = r.max(-1).values
    l_rho = (shadow ** 2 * delta).sum(-1)
    return l_e, l_dmax, l_rho


def total_loss(report: dict, weights: LossWeights, iteration: int, total_iterations: int,
               flags: frozenset = frozenset()) -> torch.Tensor:
    """Weighted sum of the (batch-reduced) named components.

    ``flags`` may drop terms: no_depth, no_flow, no_warp, single_branch.
    """
    lam_o = weights.flow_weight(iteration, total_iterations)
    rec = report["L_c"] + weights.feature * report["L_f"]
    if "no_depth" not in flags:
        rec = rec + weights.depth * report["L_depth"]
    if "no_flow" not in flags and "no_warp" not in flags:
        rec = rec + lam_o * report["L_o"]
    total = rec
    if "no_warp" not in flags:
        total = total + report["Lw_c"] + weights.feature * report["Lw_f"]
        total = total + weights.flow_reg * (report["L_cyc"] + report["L_sm"] + report["L_slo"])
    if "single_branch" not in flags:
        total = total + weights.entropy * report["L_e"] + weights.max_dynamic * report["L_dmax"]
        total = total + weights.shadow * report["L_rho"]
    return total
