"""Spatial cells for scale-out: camera k-means, nearest-centroid routing,
per-cell ray assignment with depth pruning, shard files and routed rendering."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import FrameRecord, SceneBounds, impute_depth
from .losses import ConfigError
from .render import composite_point, render_ray

SHARD_DTYPE = np.dtype("<u4")


def kmeans_cells(positions, k: int, seed: int = 0, max_iter: int = 100, return_history: bool = False):
    """Lloyd's algorithm with k-means++ seeding. Returns (K, 3) centroids.

    Stops at the assignment fixpoint or after ``max_iter`` rounds. With
    ``return_history`` the objective after every round is returned too.
    """
    x = np.asarray(positions, np.float64)
    if k <= 0:
        raise ConfigError("number of cells must be positive")
    if len(x) < k:
        raise ConfigError(f"need at least {k} positions, got {len(x)}")
    rng = np.random.default_rng(seed)
    centroids = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = _sq_dist(x, np.array(centroids)).min(1)
        total = d2.sum()
        if total <= 0:
            centroids.append(x[rng.integers(len(x))])
            continue
        centroids.append(x[rng.choice(len(x), p=d2 / total)])
    c, history = lloyd(x, np.array(centroids), max_iter)
    return (c, history) if return_history else c


def lloyd(x, centroids, max_iter: int = 100):
    """Lloyd iterations from given centroids until the assignment stops changing.

    Returns (centroids, objective after every round). Empty clusters keep
    their previous centroid.
    """
    c = np.array(centroids, np.float64)
    labels = None
    history = []
    for _ in range(max_iter):
        new = route_query(x, c)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(len(c)):
            members = x[labels == j]
            if len(members):
                c[j] = members.mean(0)
        history.append(float(_sq_dist(x, c)[np.arange(len(x)), labels].sum()))
    return c, history


def _sq_dist(x, c):
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)


def route_query(points, centroids) -> np.ndarray:
    """Owning cell per point: nearest centroid, ties to the lowest index."""
    x = np.atleast_2d(np.asarray(points, np.float64))
    c = np.asarray(centroids, np.float64)
    out = np.empty(len(x), np.int64)
    for s in range(0, len(x), 65536):
        out[s:s + 65536] = np.argmin(_sq_dist(x[s:s + 65536], c), axis=1)
    return out


@dataclass
class RayAssignment:
    """Per frame, (pixels, K) membership masks before and after depth pruning."""
    frustum: list[np.ndarray]
    pruned: list[np.ndarray]
    n_cells: int

    def pairs(self, which: str = "pruned") -> int:
        return int(sum(m.sum() for m in getattr(self, which)))

    def cells_of(self, frame: int, pixel: int, which: str = "pruned") -> set:
        return set(np.nonzero(getattr(self, which)[frame][pixel])[0].tolist())

    def shard(self, cell: int, which: str = "pruned") -> np.ndarray:
        """(n, 2) u32 (frame id, pixel id) pairs of one cell."""
        rows = []
        for f, m in enumerate(getattr(self, which)):
            px = np.nonzero(m[:, cell])[0]
            rows.append(np.stack([np.full(len(px), f), px], 1))
        return np.concatenate(rows).astype(SHARD_DTYPE) if rows else np.zeros((0, 2), SHARD_DTYPE)


def _box_exit(origins, dirs, bounds: SceneBounds):
    lo, hi = bounds.box_min, bounds.box_max
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo - origins) / dirs
        t1 = (hi - origins) / dirs
    t0 = np.nan_to_num(t0, nan=-np.inf)
    t1 = np.nan_to_num(t1, nan=np.inf)
    near = np.maximum(np.minimum(t0, t1).max(1), 0.0)
    far = np.maximum(t0, t1).min(1)
    return np.where(far > near, far, 0.0)


def assign_rays(frames: list[FrameRecord], centroids, bounds: SceneBounds, depth_maps=None,
                margin: float = 0.05, n_steps: int = 256) -> RayAssignment:
    """Cells each pixel ray visits, with and without depth pruning.

    The ray segment runs from the camera centre to where it leaves the
    foreground box and is tested for cell membership at ``n_steps + 1``
    evenly spaced points. The pruned set keeps only the points no further
    than depth * (1 + margin). ``depth_maps[i]`` is a dense (H, W) camera
    depth map for frame i, or None for frustum-only assignment; by default
    it is imputed from the frame's sparse depth.
    """
    c = np.asarray(centroids, np.float64)
    frustum, pruned = [], []
    for i, f in enumerate(frames):
        cam = f.camera
        if depth_maps is None:
            dense = impute_depth(f.depth, cam.width, cam.height) if f.depth is not None and len(f.depth) else None
        else:
            dense = depth_maps[i]
        o, d = cam.rays(cam.pixel_centers())
        end = _box_exit(o, d, bounds)
        steps = np.linspace(0.0, 1.0, n_steps + 1)
        t = end[:, None] * steps[None]
        pts = o[:, None] + d[:, None] * t[..., None]
        owner = route_query(pts.reshape(-1, 3), c).reshape(len(o), -1)
        hit = np.zeros((len(o), len(c)), bool)
        rows = np.repeat(np.arange(len(o)), owner.shape[1])
        hit[rows, owner.reshape(-1)] = True
        frustum.append(hit)
        if dense is None:
            pruned.append(hit.copy())
            continue
        stop = np.asarray(dense, np.float64).reshape(-1) * (1 + margin)
        keep = t <= stop[:, None]
        keep[:, 0] = True
        kept = np.zeros_like(hit)
        kept[rows[keep.reshape(-1)], owner.reshape(-1)[keep.reshape(-1)]] = True
        pruned.append(kept)
    return RayAssignment(frustum, pruned, len(c))


# ------------------------------------------------------------------ manifest

def write_partition(out, centroids, assignment: RayAssignment, frames: list[FrameRecord],
                    checkpoints: list | None = None) -> Path:
    """``partition.json`` plus one packed u32 shard per cell."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cells = []
    for k in range(assignment.n_cells):
        shard = assignment.shard(k)
        name = f"cell_{k:03d}.u32"
        (out / name).write_bytes(shard.tobytes())
        cells.append({"id": k, "centroid": [float(v) for v in centroids[k]], "shard": name,
                      "n_rays": int(len(shard)),
                      "checkpoint": checkpoints[k] if checkpoints else None})
    manifest = {"version": 1, "frames": [[f.video_id, f.time_index] for f in frames], "cells": cells,
                "frustum_pairs": assignment.pairs("frustum"), "pruned_pairs": assignment.pairs("pruned")}
    path = out / "partition.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_partition(root):
    root = Path(root)
    manifest = json.loads((root / "partition.json").read_text())
    shards = [np.frombuffer((root / c["shard"]).read_bytes(), SHARD_DTYPE).reshape(-1, 2) for c in manifest["cells"]]
    centroids = np.array([c["centroid"] for c in manifest["cells"]])
    return manifest, centroids, shards


def partition_dataset(frames: list[FrameRecord], bounds: SceneBounds, k: int, out, seed: int = 0,
                      margin: float = 0.05) -> tuple[np.ndarray, RayAssignment]:
    centroids = kmeans_cells(np.array([f.camera.center for f in frames]), k, seed)
    assignment = assign_rays(frames, centroids, bounds, margin=margin)
    write_partition(out, centroids, assignment, frames)
    return centroids, assignment


# ---------------------------------------------------------- routed rendering

@torch.no_grad()
def render_routed(models, centroids, bounds: SceneBounds, camera, video: int, time: float, n_samples: int = 128,
                  flags=frozenset()) -> np.ndarray:
    """Render a view with each sample evaluated by the model of the cell that owns it.

    Samples are stratified midpoints over the global box; each model keeps its
    own normalization, so densities are converted to world units before
    compositing. The environment comes from the cell owning the ray's exit.
    """
    from .model import SudsModel  # local import keeps partition usable without the model stack

    uv = camera.pixel_centers()
    o, d = camera.rays(uv)
    lo, hi = bounds.box_min, bounds.box_max
    with np.errstate(divide="ignore", invalid="ignore"):
        t0, t1 = (lo - o) / d, (hi - o) / d
    near = np.maximum(np.nan_to_num(np.minimum(t0, t1), nan=-np.inf).max(1), 0.0)
    far = np.maximum(np.nan_to_num(np.maximum(t0, t1), nan=np.inf).min(1), near + 1e-4)
    frac = (np.arange(n_samples) + 0.5) / n_samples
    t = near[:, None] + (far - near)[:, None] * frac
    step = (far - near)[:, None] / n_samples * np.ones_like(t)
    pts = o[:, None] + d[:, None] * t[..., None]
    r, n = t.shape
    owner = route_query(pts.reshape(-1, 3), centroids).reshape(r, n)
    exit_owner = route_query(pts[:, -1], centroids)
    dtype = models[0].dtype
    sigma = torch.zeros(r, n, dtype=dtype)
    color = torch.zeros(r, n, 3, dtype=dtype)
    env = torch.zeros(r, 3, dtype=dtype)
    unit = d / np.linalg.norm(d, axis=1, keepdims=True)
    for k, model in enumerate(models):
        model: SudsModel
        sel = owner == k
        if sel.any():
            rows, cols = np.nonzero(sel)
            world = torch.as_tensor(pts[rows, cols], dtype=dtype)
            dirs = torch.as_tensor(unit[rows], dtype=dtype)
            f = model.point_fields(world, dirs, float(time), int(video), flags)
            # density per normalized length -> per world length along this ray
            scale = torch.as_tensor(np.linalg.norm(d[rows] / model.bounds.extent, axis=1)
                                    / np.linalg.norm(d[rows], axis=1), dtype=dtype)
            s, c, _ = composite_point(f["static_density"] * scale, f["static_color"], f["static_features"],
                                      f["dynamic_density"] * scale, f["dynamic_color"], f["dynamic_features"],
                                      f["shadow"])
            sigma[rows, cols] = s
            color[rows, cols] = c
        er = np.nonzero(exit_owner == k)[0]
        if len(er):
            env[er] = model.env_color(torch.as_tensor(unit[er], dtype=dtype), int(video))
    world_len = torch.as_tensor(step * np.linalg.norm(d, axis=1)[:, None], dtype=dtype)
    out = render_ray(sigma, color, torch.zeros(r, n, 1, dtype=dtype), torch.as_tensor(t, dtype=dtype), world_len,
                     env, torch.zeros(r, 1, dtype=dtype))
    return out.color.numpy().reshape(camera.height, camera.width, 3)
