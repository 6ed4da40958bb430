"""Static/dynamic compositing, ray quadrature, 2D flow rendering, warped
re-rendering and occlusion weights. Everything is batched as (rays, samples)."""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class RenderOutput:
    color: torch.Tensor
    depth: torch.Tensor
    features: torch.Tensor
    opacity: torch.Tensor
    weights: torch.Tensor
    residual: torch.Tensor
    """Transmittance past the last sample, T_N."""


def _safe_ratio(num, den):
    pos = den > 0
    return torch.where(pos, num / torch.where(pos, den, torch.ones_like(den)), torch.zeros_like(num))


def composite_point(static_density, static_color, static_features, dynamic_density, dynamic_color,
                    dynamic_features, shadow):
    """Blend one static and one dynamic sample.

    Density adds; color mixes by density share with the static part dimmed
    by the shadow ratio; features mix by density share only. A point with no
    density gets zero color and features.
    """
    sigma = static_density + dynamic_density
    ws = _safe_ratio(static_density, sigma)
    wd = _safe_ratio(dynamic_density, sigma)
    color = (ws * (1 - shadow))[..., None] * static_color + wd[..., None] * dynamic_color
    feats = ws[..., None] * static_features + wd[..., None] * dynamic_features
    return sigma, color, feats


def quadrature_weights(sigma: torch.Tensor, delta: torch.Tensor):
    """w_i = T_i (1 - exp(-sigma_i delta_i)) and the leftover transmittance T_N."""
    tau = sigma * delta
    acc = torch.cumsum(tau, -1)
    trans = torch.exp(-torch.cat([torch.zeros_like(acc[..., :1]), acc[..., :-1]], -1))
    weights = trans * -torch.expm1(-tau)
    return weights, torch.exp(-acc[..., -1])


def render_ray(sigma, color, features, distances, delta, env_color, env_features) -> RenderOutput:
    """Integrate samples along each ray; leftover transmittance sees the environment.

    ``distances`` are the sample positions in ray units (depth is reported in
    those units); ``delta`` are interval lengths in the units of ``sigma``.
    """
    if sigma.shape[-1] == 0:
        raise ValueError("render_ray needs at least one sample per ray")
    w, rest = quadrature_weights(sigma, delta)
    out_color = (w[..., None] * color).sum(-2) + rest[..., None] * env_color
    out_feat = (w[..., None] * features).sum(-2) + rest[..., None] * env_features
    return RenderOutput(out_color, (w * distances).sum(-1), out_feat, w.sum(-1), w, rest)


def project(points, intrinsics, rotation, center):
    """Pinhole projection of world points (R, 3) through per-ray cameras.

    ``rotation`` is world-from-camera (R, 3, 3). Returns (uv, z)."""
    cam = torch.einsum("rk,rkj->rj", points - center, rotation)
    z = cam[:, 2]
    safe = torch.where(z.abs() > 1e-9, z, torch.full_like(z, 1e-9))
    u = intrinsics[:, 0, 0] * cam[:, 0] / safe + intrinsics[:, 0, 2]
    v = intrinsics[:, 1, 1] * cam[:, 1] / safe + intrinsics[:, 1, 2]
    return torch.stack([u, v], -1), z


def render_flow_2d(weights, points, flow, intrinsics, rotation, center, source_uv, min_depth: float = 1e-3):
    """Render the advected 3D position and project it into the neighbouring camera.

    ``points`` and ``flow`` are world-space (R, S, 3). Returns the 2D
    displacement (R, 2) and a validity mask (False where the rendered point
    lies behind the neighbour camera).
    """
    x3d = (weights[..., None] * (points + flow)).sum(-2)
    uv, z = project(x3d, intrinsics, rotation, center)
    valid = z > min_depth
    return torch.where(valid[:, None], uv - source_uv, torch.zeros_like(uv)), valid


def render_warped(static_density, static_color, static_features, warped_density, warped_color,
                  warped_features, warped_shadow, distances, delta, env_color, env_features) -> RenderOutput:
    """Composite the current static sample with the advected dynamic sample and integrate."""
    sigma, color, feats = composite_point(static_density, static_color, static_features, warped_density,
                                          warped_color, warped_features, warped_shadow)
    return render_ray(sigma, color, feats, distances, delta, env_color, env_features)


def occlusion_weight(dynamic_density, warped_density, sigma, weights):
    """Rendered disagreement between current and advected dynamic geometry, in [0, 1]."""
    w = (_safe_ratio(dynamic_density, sigma) - _safe_ratio(warped_density, sigma)).abs()
    return (weights * w).sum(-1).clamp(0.0, 1.0)
