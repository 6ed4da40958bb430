"""The three radiance-field branches: static, dynamic and far-field environment.

All positions are normalized to [0, 1]^3 by the scene bounds, time is
normalized in-video time and directions are unit vectors. Densities are in
units of 1 / normalized length; scene flow is in normalized units per frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .hashgrid import DYNAMIC4D, ENV_DIR, STATIC3D, ContractError, HashGrid, HashGridConfig
from .nn import AppearanceEmbedding, Head, Mlp

SH_DIM = 16


@dataclass(frozen=True)
class FieldConfig:
    n_videos: int = 1
    feature_dim: int = 64
    n_levels: int = 8
    n_features: int = 2
    log2_table_size: int = 19
    base_resolution: int = 16
    time_base_resolution: int = 2
    env_levels: int = 4
    env_log2_table_size: int = 14
    env_base_resolution: int = 4
    hidden: tuple = (64, 64)
    color_hidden: tuple = (64,)
    env_hidden: tuple = (32,)
    geo_dim: int = 15
    appearance_dim: int = 16
    time_bands: int = 6
    density_activation: str = "softplus"
    max_flow: float = 0.05
    init_scale: float = 1e-4
    dynamic_density_bias: float = 0.0
    """Initial offset of the dynamic density pre-activation; negative starts the scene static."""
    shadow_bias: float = 0.0
    """Initial offset of the shadow logit; negative starts with little shadowing."""

    def grid(self, kind: str, log2_table_size: int | None = None, n_levels: int | None = None) -> HashGridConfig:
        if kind == ENV_DIR:
            return HashGridConfig(ENV_DIR, self.env_levels, self.n_features, self.env_log2_table_size,
                                  self.env_base_resolution, n_videos=self.n_videos, init_scale=self.init_scale)
        return HashGridConfig(kind, n_levels or self.n_levels, self.n_features,
                              log2_table_size or self.log2_table_size, self.base_resolution,
                              self.time_base_resolution, self.n_videos, self.init_scale)


def sh_encoding(d: torch.Tensor) -> torch.Tensor:
    """Real spherical harmonics up to degree 3 (16 values) of unit directions."""
    x, y, z = d.unbind(-1)
    xx, yy, zz = x * x, y * y, z * z
    return torch.stack([
        torch.full_like(x, 0.28209479177387814),
        -0.48860251190291987 * y, 0.48860251190291987 * z, -0.48860251190291987 * x,
        1.0925484305920792 * x * y, -1.0925484305920792 * y * z,
        0.31539156525252005 * (2 * zz - xx - yy), -1.0925484305920792 * x * z,
        0.5462742152960396 * (xx - yy),
        -0.5900435899266435 * y * (3 * xx - yy), 2.890611442640554 * x * y * z,
        -0.4570457994644658 * y * (4 * zz - xx - yy),
        0.3731763325901154 * z * (2 * zz - 3 * xx - 3 * yy),
        -0.4570457994644658 * x * (4 * zz - xx - yy),
        1.445305721320277 * z * (xx - yy), -0.5900435899266435 * x * (xx - 3 * yy),
    ], -1)


def squash_flow(raw: torch.Tensor, max_norm: float) -> torch.Tensor:
    """Smoothly map a raw 3-vector into the open ball of radius ``max_norm``."""
    return max_norm * raw / torch.sqrt(1 + (raw * raw).sum(-1, keepdim=True))


@dataclass
class StaticSample:
    density: torch.Tensor
    color: torch.Tensor
    features: torch.Tensor


@dataclass
class DynamicSample:
    density: torch.Tensor
    color: torch.Tensor
    features: torch.Tensor
    shadow: torch.Tensor
    flow_bwd: torch.Tensor
    flow_fwd: torch.Tensor


@dataclass
class EnvSample:
    color: torch.Tensor
    features: torch.Tensor


class _Branch:
    def named_tensors(self, prefix: str) -> dict[str, torch.Tensor]:
        out = {}
        for name, part in self._parts().items():
            if isinstance(part, HashGrid):
                out[f"{prefix}.{name}"] = part.table
            elif isinstance(part, Mlp):
                for i, (w, b) in enumerate(zip(part.weights, part.biases)):
                    out[f"{prefix}.{name}.w{i}"] = w
                    out[f"{prefix}.{name}.b{i}"] = b
            elif isinstance(part, AppearanceEmbedding):
                out[f"{prefix}.{name}"] = part.matrices
        return out

    def grids(self) -> list[HashGrid]:
        return [p for p in self._parts().values() if isinstance(p, HashGrid)]

    def parameters(self) -> list[torch.Tensor]:
        return list(self.named_tensors("").values())


class StaticField(_Branch):
    def __init__(self, config: FieldConfig, generator=None, dtype=torch.float32):
        self.config = config
        self.grid = HashGrid(config.grid(STATIC3D), generator, dtype)
        self.trunk = Mlp(self.grid.config.output_dim, config.hidden,
                         (Head("density", 1, config.density_activation), Head("features", config.feature_dim),
                          Head("geo", config.geo_dim)), generator, dtype)
        self.color_net = Mlp(config.geo_dim + SH_DIM + config.appearance_dim, config.color_hidden,
                             (Head("color", 3, "sigmoid"),), generator, dtype)
        self.appearance = AppearanceEmbedding(config.n_videos, config.appearance_dim, config.time_bands,
                                              generator, dtype)

    def _parts(self):
        return {"grid": self.grid, "trunk": self.trunk, "color": self.color_net, "appearance": self.appearance}

    def __call__(self, x, d, t, vid, use_appearance: bool = True) -> StaticSample:
        h = self.trunk(self.grid.encode(x))
        latent = self.appearance(t, vid)
        if not use_appearance:
            latent = torch.zeros_like(latent)
        color = self.color_net(torch.cat([h["geo"], sh_encoding(d).to(x.dtype), latent], -1))["color"]
        return StaticSample(h["density"][:, 0], color, h["features"])

    def density(self, x):
        return self.trunk(self.grid.encode(x))["density"][:, 0]


class DynamicField(_Branch):
    def __init__(self, config: FieldConfig, generator=None, dtype=torch.float32, shadow: bool = True):
        self.config = config
        self.has_shadow = shadow
        self.grid = HashGrid(config.grid(DYNAMIC4D), generator, dtype)
        heads = [Head("density", 1, config.density_activation, config.dynamic_density_bias), Head("flow", 6),
                 Head("features", config.feature_dim), Head("geo", config.geo_dim)]
        if shadow:
            heads.insert(1, Head("shadow", 1, "sigmoid", config.shadow_bias))
        self.trunk = Mlp(self.grid.config.output_dim, config.hidden, heads, generator, dtype)
        self.color_net = Mlp(config.geo_dim + SH_DIM, config.color_hidden, (Head("color", 3, "sigmoid"),),
                             generator, dtype)

    def _parts(self):
        return {"grid": self.grid, "trunk": self.trunk, "color": self.color_net}

    def __call__(self, x, t, vid, d) -> DynamicSample:
        h = self.trunk(self.grid.encode(x, t, vid))
        color = self.color_net(torch.cat([h["geo"], sh_encoding(d).to(x.dtype)], -1))["color"]
        shadow = h["shadow"][:, 0] if self.has_shadow else torch.zeros_like(h["density"][:, 0])
        m = self.config.max_flow
        return DynamicSample(h["density"][:, 0], color, h["features"], shadow,
                             squash_flow(h["flow"][:, :3], m), squash_flow(h["flow"][:, 3:], m))


class EnvField(_Branch):
    def __init__(self, config: FieldConfig, generator=None, dtype=torch.float32):
        self.config = config
        self.grid = HashGrid(config.grid(ENV_DIR), generator, dtype)
        self.net = Mlp(self.grid.config.output_dim, config.env_hidden,
                       (Head("color", 3, "sigmoid"), Head("features", config.feature_dim)), generator, dtype)

    def _parts(self):
        return {"grid": self.grid, "net": self.net}

    def __call__(self, d, vid) -> EnvSample:
        h = self.net(self.grid.encode(d, None, vid))
        return EnvSample(h["color"], h["features"])


def _check_vid(branch_cfg: FieldConfig, vid):
    v = torch.as_tensor(vid)
    if (v < 1).any() or (v > branch_cfg.n_videos).any():
        raise ContractError(f"unknown video id (valid: 1..{branch_cfg.n_videos})")


def eval_static(field: StaticField, x, d, t, vid, use_appearance: bool = True) -> StaticSample:
    _check_vid(field.config, vid)
    return field(x, d, t, vid, use_appearance)


def eval_dynamic(field: DynamicField, x, t, vid, d) -> DynamicSample:
    _check_vid(field.config, vid)
    return field(x, t, vid, d)


def eval_env(field: EnvField, d, vid) -> EnvSample:
    _check_vid(field.config, vid)
    return field(d, vid)
