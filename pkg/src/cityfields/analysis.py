"""Image metrics and the unsupervised downstream procedures run on trained
fields: instance extraction, oriented cuboids, semantic matching and
best-buddies correspondences."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import cdist

from .data import SceneBounds
from .partition import lloyd

SSIM_SIZE = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class AnalysisError(ValueError):
    pass


# ------------------------------------------------------------------ metrics

def psnr(pred, target) -> float:
    mse = float(np.mean((np.asarray(pred, np.float64) - np.asarray(target, np.float64)) ** 2))
    return math.inf if mse == 0 else 10 * math.log10(1 / mse)


def gaussian_window(size: int = SSIM_SIZE, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def ssim(pred, target) -> float:
    """Mean SSIM over 'valid' 11x11 Gaussian windows, averaged over channels."""
    a = np.asarray(pred, np.float64)
    b = np.asarray(target, np.float64)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    g = gaussian_window()
    r = SSIM_SIZE // 2
    if a.shape[0] < SSIM_SIZE or a.shape[1] < SSIM_SIZE:
        raise AnalysisError("images must be at least 11x11 for SSIM")

    def blur(x):
        y = ndimage.correlate1d(ndimage.correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
        return y[r:-r, r:-r]

    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = blur(x), blur(y)
        vx = blur(x * x) - mx * mx
        vy = blur(y * y) - my * my
        cxy = blur(x * y) - mx * my
        s = ((2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
        scores.append(s.mean())
    return float(np.mean(scores))


def image_metrics(pred, target) -> tuple[float, float]:
    """(PSNR in dB, SSIM); identical images give PSNR = inf."""
    if np.shape(pred) != np.shape(target):
        raise AnalysisError(f"shape mismatch: {np.shape(pred)} vs {np.shape(target)}")
    return psnr(pred, target), ssim(pred, target)


# ---------------------------------------------------------------- instances

@dataclass
class Instance:
    points: np.ndarray
    centroid: np.ndarray
    component: int


@dataclass
class OrientedCuboid:
    center: np.ndarray
    axes: np.ndarray
    """(3, 3), one unit axis per row."""
    extents: np.ndarray
    """Half-lengths along each axis."""

    @property
    def volume(self) -> float:
        return float(8 * np.prod(self.extents))

    def to_json(self) -> dict:
        return {"center": self.center.tolist(), "axes": self.axes.tolist(), "extents": self.extents.tolist()}


def grid_points(bounds: SceneBounds, resolution: int):
    """Cell-centre lattice over the box -> (points (n^3, 3), pitch (3,))."""
    pitch = bounds.extent / resolution
    axes = [bounds.box_min[k] + (np.arange(resolution) + 0.5) * pitch[k] for k in range(3)]
    g = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    return g, pitch


def model_dynamic_density(model, time: float, video: int, chunk: int = 65536):
    """Density callable (world points -> dynamic density) for a trained model."""
    import torch

    @torch.no_grad()
    def fn(points):
        out = []
        for s in range(0, len(points), chunk):
            p = torch.as_tensor(points[s:s + chunk], dtype=model.dtype)
            d = torch.zeros_like(p)
            d[:, 2] = 1.0
            out.append(model.point_fields(p, d, time, video)["dynamic_density"].numpy())
        return np.concatenate(out) if out else np.zeros(0)

    return fn


def extract_instances(density_fn, bounds: SceneBounds, resolution: int = 48, threshold: float | None = None,
                      ground_cell: float | None = None) -> list[Instance]:
    """Threshold dynamic density on a lattice, label footprints on the ground
    plane (8-connected) and refine with k-means seeded at component centroids.

    ``threshold`` defaults to the median of the nonzero samples and
    ``ground_cell`` to twice the lattice pitch. The ground plane is the
    box's y = min face.
    """
    pts, pitch = grid_points(bounds, resolution)
    sigma = np.asarray(density_fn(pts), np.float64)
    positive = sigma[sigma > 0]
    if threshold is None:
        if len(positive) == 0:
            return []
        threshold = float(np.median(positive))
    keep = pts[sigma > threshold]
    if len(keep) == 0:
        return []
    cell = ground_cell if ground_cell is not None else 2 * float(max(pitch[0], pitch[2]))
    ij = np.floor((keep[:, [0, 2]] - bounds.box_min[[0, 2]]) / cell).astype(np.int64)
    shape = ij.max(0) + 1
    occupancy = np.zeros(shape, bool)
    occupancy[ij[:, 0], ij[:, 1]] = True
    labels, n = ndimage.label(occupancy, structure=np.ones((3, 3), bool))
    comp = labels[ij[:, 0], ij[:, 1]] - 1
    init = np.array([keep[comp == c].mean(0) for c in range(n)])
    centroids, _ = lloyd(keep, init)
    member = np.argmin(((keep[:, None] - centroids[None]) ** 2).sum(-1), 1)
    out = []
    for c in range(n):
        p = keep[member == c]
        if len(p):
            out.append(Instance(p, p.mean(0), c))
    return out


def fit_cuboid(points, floor: float = 1e-3) -> OrientedCuboid:
    """Oriented box from PCA of the convex hull vertices.

    Coplanar or collinear input falls back to PCA on the raw points, with
    every half-extent at least ``floor``.
    """
    p = np.asarray(points, np.float64)
    if len(p) < 4:
        raise AnalysisError("need at least 4 points for a cuboid")
    try:
        basis = p[ConvexHull(p).vertices]
        degenerate = False
    except QhullError:
        basis = p
        degenerate = True
    centered = basis - basis.mean(0)
    _, vecs = np.linalg.eigh(centered.T @ centered / len(basis))
    axes = vecs[:, ::-1].T.copy()
    if np.linalg.det(axes) < 0:
        axes[2] *= -1
    proj = p @ axes.T
    lo, hi = proj.min(0), proj.max(0)
    extents = (hi - lo) / 2
    if degenerate:
        extents = np.maximum(extents, floor)
    center = ((lo + hi) / 2) @ axes
    return OrientedCuboid(center, axes, extents)


# ----------------------------------------------------------------- features

def class_centroids(features, labels, n_classes: int) -> np.ndarray:
    """Mean descriptor per class over labeled pixels; (n_classes, C), NaN rows for absent classes."""
    f = np.asarray(features).reshape(-1, np.shape(features)[-1])
    lab = np.asarray(labels).reshape(-1)
    out = np.full((n_classes, f.shape[1]), np.nan)
    for k in range(n_classes):
        if (lab == k).any():
            out[k] = f[lab == k].mean(0)
    return out


def semantic_match(features, centroids) -> np.ndarray:
    """Nearest class centroid per pixel (ties to the lowest class index)."""
    c = np.asarray(centroids, np.float64)
    if c.ndim != 2 or len(c) == 0:
        raise AnalysisError("semantic matching needs at least one class centroid")
    f = np.asarray(features, np.float64)
    d = cdist(f.reshape(-1, f.shape[-1]), np.nan_to_num(c, nan=np.inf), "sqeuclidean")
    d = np.where(np.isnan(d), np.inf, d)
    return np.argmin(d, 1).reshape(f.shape[:-1])


def track_best_buddies(a, b) -> list[tuple[int, int]]:
    """Mutual nearest neighbours (Euclidean) between two descriptor sets."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if len(a) == 0 or len(b) == 0:
        return []
    d = cdist(a, b)
    ab = np.argmin(d, 1)
    ba = np.argmin(d, 0)
    return [(i, int(j)) for i, j in enumerate(ab) if ba[j] == i]


# ------------------------------------------------------------------ reports

def instances_report(instances: list[Instance], cuboids: list[OrientedCuboid]) -> dict:
    return {"instances": [{"component": inst.component, "centroid": inst.centroid.tolist(),
                           "n_points": int(len(inst.points)), "cuboid": box.to_json()}
                          for inst, box in zip(instances, cuboids)]}


def write_metrics_csv(path, rows: list[dict]):
    import csv

    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def save_label_png(path, labels):
    from PIL import Image

    Image.fromarray(np.asarray(labels, np.uint8)).save(path)


def save_preview_png(path, image):
    from PIL import Image

    Image.fromarray((np.clip(np.asarray(image), 0, 1) * 255 + 0.5).astype(np.uint8)).save(path)


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1))
