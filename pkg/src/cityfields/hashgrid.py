"""Multiresolution hash grids for the static, dynamic and environment branches.

Each level doubles the resolution of the previous one. Coarse levels whose
dense vertex count fits in the table are indexed densely (no collisions);
finer levels use an XOR-of-primes spatial hash. The video id is folded into
the index of the dynamic and environment grids but never interpolated across.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch

from . import _kernels

STATIC3D = "static3d"
DYNAMIC4D = "dynamic4d"
ENV_DIR = "env_dir"
KINDS = (STATIC3D, DYNAMIC4D, ENV_DIR)

SPACE_PRIMES = (1, 2654435761, 805459861)
TIME_PRIME = 3674653429
VIDEO_PRIME = 2097192037
GROWTH = 2


class ContractError(ValueError):
    """Raised when an operation is called outside its documented domain."""


@dataclass(frozen=True)
class HashGridConfig:
    kind: str = STATIC3D
    n_levels: int = 8
    n_features: int = 2
    log2_table_size: int = 19
    base_resolution: int = 16
    """Voxels per spatial (or directional) axis at the coarsest level."""
    time_base_resolution: int = 2
    """Voxels along the time axis at the coarsest level (dynamic grids only)."""
    n_videos: int = 1
    """Largest video id; sizes the collision-free dense levels."""
    init_scale: float = 1e-4

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown grid kind {self.kind!r}")
        if self.n_levels < 1 or self.n_features < 1 or self.n_videos < 1:
            raise ContractError("levels, features and n_videos must be >= 1")
        if not 1 <= self.log2_table_size <= 30:
            raise ContractError("table size must be a power of two in [2, 2^30]")

    @property
    def table_size(self) -> int:
        return 1 << self.log2_table_size

    @property
    def n_dims(self) -> int:
        return {STATIC3D: 3, DYNAMIC4D: 4, ENV_DIR: 2}[self.kind]

    @property
    def output_dim(self) -> int:
        return self.n_levels * self.n_features

    def resolutions(self) -> np.ndarray:
        """(L, D) voxel counts per axis and level."""
        scale = GROWTH ** np.arange(self.n_levels, dtype=np.int64)
        res = np.empty((self.n_levels, self.n_dims), np.int64)
        res[:, :] = (self.base_resolution * scale)[:, None]
        if self.kind == DYNAMIC4D:
            res[:, 3] = self.time_base_resolution * scale
        return res

    def dense_layout(self) -> tuple[np.ndarray, np.ndarray]:
        """Per level: whether it is densely indexed, and the stride of the video id."""
        res = self.resolutions()
        n_vertices = np.prod(res + 1, axis=1)
        uses_vid = self.kind != STATIC3D
        total = n_vertices * (self.n_videos if uses_vid else 1)
        dense = total <= self.table_size
        vid_stride = np.where(dense & uses_vid, n_vertices, 0).astype(np.int64)
        return dense, vid_stride

    def primes(self) -> tuple[np.ndarray, int]:
        if self.kind == STATIC3D:
            return np.array(SPACE_PRIMES, np.int64), 0
        if self.kind == DYNAMIC4D:
            return np.array(SPACE_PRIMES + (TIME_PRIME,), np.int64), VIDEO_PRIME
        return np.array(SPACE_PRIMES[:2], np.int64), VIDEO_PRIME


def hash_index(config: HashGridConfig, level: int, vertex, time=None, video_id=None) -> int:
    """Table index of one integer grid vertex (reference, pure Python).

    ``vertex`` holds the spatial (or octahedral direction) integer coordinates;
    dynamic grids also need the integer ``time`` coordinate and a ``video_id``,
    environment grids need a ``video_id``. Static grids ignore both.
    """
    vertex = [int(v) for v in vertex]
    if config.kind == DYNAMIC4D:
        if time is None or video_id is None:
            raise ContractError("dynamic4d lookups need a time coordinate and a video id")
        coords = vertex + [int(time)]
    elif config.kind == ENV_DIR:
        if video_id is None:
            raise ContractError("env_dir lookups need a video id")
        coords = vertex
    else:
        coords = vertex
        video_id = 1
    if len(coords) != config.n_dims:
        raise ContractError(f"expected {config.n_dims} coordinates, got {len(coords)}")
    res = config.resolutions()[level]
    if any(c < 0 or c > r for c, r in zip(coords, res)):
        raise ContractError("vertex outside the level's grid")
    dense, vid_stride = config.dense_layout()
    if dense[level]:
        idx, stride = 0, 1
        for c, r in zip(coords, res):
            idx += c * stride
            stride *= int(r) + 1
        return idx + (int(video_id) - 1) * int(vid_stride[level])
    primes, vid_prime = config.primes()
    h = 0
    for c, p in zip(coords, primes):
        h ^= c * int(p)
    h ^= int(video_id) * vid_prime
    return h & (config.table_size - 1)


def octahedral_encode(directions: torch.Tensor) -> torch.Tensor:
    """Map unit directions (..., 3) onto the unit square (..., 2)."""
    d = directions / directions.abs().sum(-1, keepdim=True)
    x, y, z = d.unbind(-1)
    sx = torch.where(x >= 0, 1.0, -1.0).to(d)
    sy = torch.where(y >= 0, 1.0, -1.0).to(d)
    lower = z < 0
    u = torch.where(lower, (1 - y.abs()) * sx, x)
    v = torch.where(lower, (1 - x.abs()) * sy, y)
    return torch.stack([u, v], -1) * 0.5 + 0.5


class _EncodeFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, coords, table, vids, grid):
        c = coords.detach().cpu().numpy()
        tab = table.detach().cpu().numpy()
        v = vids.cpu().numpy()
        out = np.empty((c.shape[0], grid.config.output_dim), tab.dtype)
        _kernels.encode_forward(c, v, tab, grid._res, grid._dense, grid._primes,
                                grid._vid_prime, grid._vid_stride, out)
        ctx.save_for_backward(coords, table, vids)
        ctx.grid = grid
        return torch.from_numpy(out)

    @staticmethod
    def backward(ctx, grad_out):
        coords, table, vids = ctx.saved_tensors
        need_coords = ctx.needs_input_grad[0]
        grad_table = torch.zeros_like(table)
        grad_coords = scatter_gradients(ctx.grid, coords, vids, grad_out, into=grad_table,
                                        need_coords=need_coords, table=table)
        return (grad_coords if need_coords else None), grad_table, None, None


def scatter_gradients(grid: "HashGrid", coords, vids, upstream, into=None,
                      need_coords=False, table=None):
    """Accumulate ``upstream`` (N, L*F) into table gradients.

    Every corner entry receives the upstream gradient times its interpolation
    weight; colliding entries add up. ``into`` defaults to the grid's
    accumulator (``grid.table.grad``). Returns the gradient with respect to
    the (normalized) input coordinates when ``need_coords`` is set.
    """
    upstream = torch.as_tensor(upstream)
    if upstream.ndim != 2 or upstream.shape[1] != grid.config.output_dim:
        raise ContractError(
            f"upstream gradient must have {grid.config.output_dim} columns, got {tuple(upstream.shape)}")
    table = grid.table if table is None else table
    if into is None:
        if grid.table.grad is None:
            grid.table.grad = torch.zeros_like(grid.table)
        into = grid.table.grad
    c = coords.detach().cpu().numpy()
    g_tab = into.numpy()
    g_coords = np.zeros_like(c) if need_coords else np.zeros((1, c.shape[1]), c.dtype)
    _kernels.encode_backward(c, vids.cpu().numpy(), table.detach().numpy(), grid._res, grid._dense,
                             grid._primes, grid._vid_prime, grid._vid_stride,
                             upstream.detach().to(table.dtype).contiguous().numpy(), g_tab, g_coords,
                             need_coords)
    return torch.from_numpy(g_coords) if need_coords else None


class HashGrid:
    """L x T x F table of learnable features plus its branch-specific hash scheme."""

    def __init__(self, config: HashGridConfig, generator: torch.Generator | None = None,
                 dtype=torch.float32):
        self.config = config
        shape = (config.n_levels, config.table_size, config.n_features)
        table = (torch.rand(shape, generator=generator, dtype=torch.float64) * 2 - 1) * config.init_scale
        self.table = table.to(dtype).requires_grad_(True)
        self._res = config.resolutions()
        self._dense, self._vid_stride = config.dense_layout()
        self._primes, self._vid_prime = config.primes()
        self.clamp_count = 0

    def _coords(self, x: torch.Tensor, t: torch.Tensor | None) -> torch.Tensor:
        kind = self.config.kind
        if kind == ENV_DIR:
            norms = x.detach().norm(dim=-1)
            if not torch.allclose(norms, torch.ones_like(norms), atol=1e-4):
                raise ContractError("directions must be unit-norm")
            return octahedral_encode(x)
        if kind == DYNAMIC4D:
            if t is None:
                raise ContractError("dynamic4d encode needs a time coordinate")
            x = torch.cat([x, t.reshape(-1, 1).to(x)], -1)
        outside = (x.detach() < 0) | (x.detach() > 1)
        if outside.any():
            self.clamp_count += int(outside.any(-1).sum())
            x = x.clamp(0.0, 1.0)
        return x

    def _vids(self, video_id, n: int) -> torch.Tensor:
        if self.config.kind == STATIC3D:
            return torch.ones(n, dtype=torch.int64)
        if video_id is None:
            raise ContractError(f"{self.config.kind} encode needs a video id")
        vids = torch.as_tensor(video_id, dtype=torch.int64).reshape(-1).expand(n).contiguous()
        if (vids < 1).any() or (vids > self.config.n_videos).any():
            raise ContractError(f"video id outside 1..{self.config.n_videos}")
        return vids

    def encode(self, x: torch.Tensor, t: torch.Tensor | None = None, video_id=None) -> torch.Tensor:
        """Features (N, L*F) for positions / directions ``x`` (N, D).

        Positions are normalized to [0, 1] (clamped otherwise, counted in
        ``clamp_count``); time is normalized in-video time; directions are
        unit vectors. Differentiable in both the table and the positions.
        """
        coords = self._coords(x, t)
        vids = self._vids(video_id, coords.shape[0])
        return _EncodeFn.apply(coords.to(self.table.dtype).contiguous(), self.table, vids, self)

    def zero_grad(self):
        self.table.grad = None

    def header(self) -> bytes:
        c = self.config
        return struct.pack("<16s8i", c.kind.encode(), c.n_levels, c.n_features, c.log2_table_size,
                           c.base_resolution, c.time_base_resolution, c.n_videos, 0, 0)


def encode_point(grid: HashGrid, x, t=None, video_id=None) -> torch.Tensor:
    """Single-query convenience wrapper returning a flat feature vector."""
    x = torch.as_tensor(x, dtype=grid.table.dtype).reshape(1, -1)
    t = None if t is None else torch.as_tensor([t], dtype=grid.table.dtype)
    return grid.encode(x, t, video_id).reshape(-1)
