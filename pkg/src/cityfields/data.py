"""Scene/camera data model and the on-disk dataset format.

Layout of a dataset directory::

    manifest.json             videos, frames, cameras, file names, feature dim, bounds
    rgb_*.f32                 H x W x 3 float32
    depth_*.bin               (u32 pixel index, f32 depth) pairs
    flow_fwd_*.f32            H x W x 2 float32 followed by H x W u8 validity mask
    flow_bwd_*.f32            same
    feat_*.f32                H x W x C float32

All numbers little-endian, arrays row-major. Pixel index = row * W + col and
pixel (row, col) is centred at (col + 0.5, row + 0.5).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

MANIFEST = "manifest.json"
FORMAT_NAME = "cityfields-dataset"
DEPTH_DTYPE = np.dtype([("pixel", "<u4"), ("depth", "<f4")])


class DatasetError(ValueError):
    pass


class LoadError(DatasetError):
    """A referenced file is missing or unreadable."""


class SchemaError(DatasetError):
    """The manifest is structurally invalid or inconsistent."""


@dataclass(frozen=True, eq=False)
class CameraModel:
    intrinsics: np.ndarray
    """3x3 pinhole matrix in pixels, zero skew."""
    pose: np.ndarray
    """4x4 world-from-camera transform; camera looks down +z, x right, y down."""
    width: int
    height: int

    def __post_init__(self):
        k = np.asarray(self.intrinsics, np.float64)
        p = np.asarray(self.pose, np.float64)
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "pose", p)
        if k.shape != (3, 3) or p.shape != (4, 4):
            raise SchemaError("intrinsics must be 3x3 and pose 4x4")
        if k[0, 0] <= 0 or k[1, 1] <= 0 or k[0, 1] != 0:
            raise SchemaError("intrinsics need positive focal lengths and zero skew")
        r = p[:3, :3]
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-6:
            raise SchemaError("pose rotation is not orthonormal")
        if self.width <= 0 or self.height <= 0:
            raise SchemaError("image size must be positive")

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3]

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]

    def pixel_centers(self, pixel_index=None) -> np.ndarray:
        """(N, 2) continuous (u, v) of pixel centres; all pixels when index omitted."""
        if pixel_index is None:
            pixel_index = np.arange(self.width * self.height)
        pixel_index = np.asarray(pixel_index, np.int64)
        return np.stack([pixel_index % self.width + 0.5, pixel_index // self.width + 0.5], -1)

    def rays(self, uv: np.ndarray):
        """World-space origins and directions for continuous pixel coords.

        Directions are scaled so their camera-frame z component is 1, so the
        ray parameter equals camera-frame depth.
        """
        uv = np.atleast_2d(np.asarray(uv, np.float64))
        k = self.intrinsics
        cam = np.stack([(uv[:, 0] - k[0, 2]) / k[0, 0], (uv[:, 1] - k[1, 2]) / k[1, 1],
                        np.ones(len(uv))], -1)
        dirs = cam @ self.rotation.T
        return np.broadcast_to(self.center, dirs.shape).copy(), dirs

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, np.float64) - self.center) @ self.rotation

    def project(self, points: np.ndarray):
        """Continuous pixel coords (N, 2) and camera-frame depth (N,)."""
        cam = self.world_to_camera(np.atleast_2d(points))
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.intrinsics[0, 0] * cam[:, 0] / z + self.intrinsics[0, 2]
            v = self.intrinsics[1, 1] * cam[:, 1] / z + self.intrinsics[1, 2]
        return np.stack([u, v], -1), z

    def to_json(self) -> dict:
        return {"width": self.width, "height": self.height,
                "intrinsics": self.intrinsics.reshape(-1).tolist(),
                "pose": self.pose.reshape(-1).tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "CameraModel":
        return cls(np.array(d["intrinsics"], np.float64).reshape(3, 3),
                   np.array(d["pose"], np.float64).reshape(4, 4), int(d["width"]), int(d["height"]))


def look_at(eye, target, width, height, focal, up=(0.0, 1.0, 0.0)) -> CameraModel:
    """Pinhole camera at ``eye`` looking at ``target`` in a y-up world."""
    eye, target, up = (np.asarray(a, np.float64) for a in (eye, target, up))
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, down, fwd, eye
    k = np.array([[focal, 0, width / 2], [0, focal, height / 2], [0, 0, 1.0]])
    return CameraModel(k, pose, width, height)


@dataclass(frozen=True)
class SceneBounds:
    box_min: np.ndarray
    box_max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.box_min, np.float64)
        hi = np.asarray(self.box_max, np.float64)
        if lo.shape != (3,) or hi.shape != (3,) or not (hi > lo).all():
            raise SchemaError("bounds need min < max on every axis")
        object.__setattr__(self, "box_min", lo)
        object.__setattr__(self, "box_max", hi)

    @property
    def extent(self) -> np.ndarray:
        return self.box_max - self.box_min

    def normalize(self, x):
        return (x - self.box_min) / self.extent

    def denormalize(self, u):
        return u * self.extent + self.box_min

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        """Slab test; returns (t_near, t_far, hit) along each ray (t >= 0)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t0 = (self.box_min - origins) * inv
            t1 = (self.box_max - origins) * inv
        t0 = np.where(np.isnan(t0), -np.inf, t0)
        t1 = np.where(np.isnan(t1), np.inf, t1)
        near = np.maximum(np.minimum(t0, t1).max(-1), 0.0)
        far = np.maximum(t0, t1).min(-1)
        return near, far, far > near

    def to_json(self) -> dict:
        return {"min": self.box_min.tolist(), "max": self.box_max.tolist()}


@dataclass(frozen=True)
class FlowField:
    flow: np.ndarray
    """H x W x 2 pixel displacement."""
    valid: np.ndarray
    """H x W bool."""


@dataclass(frozen=True, eq=False)
class FrameRecord:
    video_id: int
    time_index: int
    camera: CameraModel
    image: np.ndarray
    depth: Optional[np.ndarray] = None
    """Structured array of (pixel, depth) pairs, DEPTH_DTYPE."""
    flow_fwd: Optional[FlowField] = None
    flow_bwd: Optional[FlowField] = None
    features: Optional[np.ndarray] = None
    files: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.camera.height, self.camera.width


def project_lidar_depth(points: np.ndarray, camera: CameraModel) -> np.ndarray:
    """Project world points into ``camera``; nearest point wins per pixel.

    Keeps points with positive camera-frame depth that land inside the image.
    Returns a DEPTH_DTYPE array sorted by pixel index.
    """
    points = np.asarray(points, np.float64).reshape(-1, 3)
    uv, z = camera.project(points)
    ok = z > 0
    col = np.floor(uv[:, 0])
    row = np.floor(uv[:, 1])
    ok &= (col >= 0) & (col < camera.width) & (row >= 0) & (row < camera.height)
    pix = (row[ok] * camera.width + col[ok]).astype(np.int64)
    depth = z[ok]
    order = np.lexsort((depth, pix))
    pix, depth = pix[order], depth[order]
    first = np.ones(len(pix), bool)
    first[1:] = pix[1:] != pix[:-1]
    out = np.empty(int(first.sum()), DEPTH_DTYPE)
    out["pixel"] = pix[first]
    out["depth"] = depth[first]
    return out


def impute_depth(sparse: np.ndarray, width: int, height: int) -> np.ndarray:
    """Nearest-neighbour fill of a sparse depth list into an H x W map.

    Distance is Euclidean in pixel coordinates; ties go to the sample with
    the lowest pixel index.
    """
    if len(sparse) == 0:
        raise DatasetError("depth imputation needs at least one sample")
    sparse = np.sort(np.asarray(sparse, DEPTH_DTYPE), order="pixel")
    pix = sparse["pixel"].astype(np.int64)
    pts = np.stack([pix % width, pix // width], -1).astype(np.float64)
    grid = np.stack(np.meshgrid(np.arange(width), np.arange(height)), -1).reshape(-1, 2).astype(np.float64)
    k = min(4, len(pts))
    dist, idx = cKDTree(pts).query(grid, k=k)
    dist = dist.reshape(len(grid), k)
    idx = idx.reshape(len(grid), k)
    best = idx[:, 0].copy()
    if k > 1:
        ties = np.isclose(dist[:, 1], dist[:, 0], rtol=0, atol=1e-9)
        # kd-tree order among equidistant samples is arbitrary; pick the lowest index
        cand = np.where(np.isclose(dist, dist[:, :1], rtol=0, atol=1e-9), idx, np.iinfo(np.int64).max)
        best[ties] = cand[ties].min(1)
        full = ties & np.isclose(dist[:, -1], dist[:, 0], rtol=0, atol=1e-9)
        for p in np.nonzero(full)[0]:
            d = np.hypot(*(pts - grid[p]).T)
            best[p] = int(np.argmin(d))
    return sparse["depth"][best].astype(np.float32).reshape(height, width)


# --------------------------------------------------------------------- I/O

def _write(path: Path, arr: np.ndarray):
    path.write_bytes(np.ascontiguousarray(arr).tobytes())


def write_dataset(root, frames: list[FrameRecord], feature_dim: int, bounds: Optional[SceneBounds] = None,
                  meta: Optional[dict] = None) -> Path:
    """Write frames and a manifest under ``root`` (created if needed)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    videos: dict[int, list] = {}
    for fr in sorted(frames, key=lambda f: (f.video_id, f.time_index)):
        tag = f"v{fr.video_id:03d}_t{fr.time_index:04d}"
        entry = {"time_index": fr.time_index, "camera": fr.camera.to_json(), "rgb": f"rgb_{tag}.f32"}
        _write(root / entry["rgb"], fr.image.astype("<f4"))
        if fr.depth is not None:
            entry["depth"] = f"depth_{tag}.bin"
            _write(root / entry["depth"], np.asarray(fr.depth, DEPTH_DTYPE))
        for key, ff in (("flow_fwd", fr.flow_fwd), ("flow_bwd", fr.flow_bwd)):
            if ff is not None:
                entry[key] = f"{key}_{tag}.f32"
                payload = ff.flow.astype("<f4").tobytes() + ff.valid.astype(np.uint8).tobytes()
                (root / entry[key]).write_bytes(payload)
        if fr.features is not None:
            if fr.features.shape[-1] != feature_dim:
                raise SchemaError(f"frame {tag} has feature dim {fr.features.shape[-1]} != {feature_dim}")
            entry["features"] = f"feat_{tag}.f32"
            _write(root / entry["features"], fr.features.astype("<f4"))
        videos.setdefault(fr.video_id, []).append(entry)
    manifest = {"format": FORMAT_NAME, "version": 1, "feature_dim": feature_dim,
                "videos": [{"video_id": v, "frames": fs} for v, fs in sorted(videos.items())],
                "meta": meta or {}}
    if bounds is not None:
        manifest["bounds"] = bounds.to_json()
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def _read(root: Path, name: str, dtype, count: int, mmap=False) -> np.ndarray:
    path = root / name
    if not path.is_file():
        raise LoadError(f"missing file: {name}")
    expected = count * np.dtype(dtype).itemsize
    if path.stat().st_size != expected:
        raise LoadError(f"corrupt file: {name} (expected {expected} bytes, found {path.stat().st_size})")
    if mmap:
        return np.memmap(path, dtype=dtype, mode="r")
    return np.fromfile(path, dtype=dtype)


def load_dataset(root, lazy: bool = True):
    """Parse a dataset directory. Returns (frames, bounds, meta).

    With ``lazy`` the large per-pixel arrays (rgb, features) are memory-mapped.
    """
    root = Path(root)
    try:
        manifest = json.loads((root / MANIFEST).read_text())
    except FileNotFoundError:
        raise LoadError(f"missing file: {MANIFEST}") from None
    except json.JSONDecodeError as e:
        raise LoadError(f"corrupt file: {MANIFEST} ({e})") from None
    if manifest.get("format") != FORMAT_NAME:
        raise SchemaError("manifest format tag missing or unknown")
    videos = manifest.get("videos") or []
    if not videos:
        raise SchemaError("no videos")
    c = int(manifest.get("feature_dim", 0))
    frames = []
    for video in videos:
        vid = int(video["video_id"])
        for entry in video.get("frames", []):
            cam = CameraModel.from_json(entry["camera"])
            h, w = cam.height, cam.width
            image = _read(root, entry["rgb"], "<f4", h * w * 3, lazy).reshape(h, w, 3)
            depth = flows = None
            if "depth" in entry:
                path = root / entry["depth"]
                if not path.is_file():
                    raise LoadError(f"missing file: {entry['depth']}")
                if path.stat().st_size % DEPTH_DTYPE.itemsize:
                    raise LoadError(f"corrupt file: {entry['depth']}")
                depth = np.fromfile(path, DEPTH_DTYPE)
                if len(depth) and depth["pixel"].max() >= h * w:
                    raise LoadError(f"corrupt file: {entry['depth']} (pixel index out of range)")
            flows = {}
            for key in ("flow_fwd", "flow_bwd"):
                if key in entry:
                    raw = _read(root, entry[key], np.uint8, h * w * 2 * 4 + h * w)
                    flow = raw[:h * w * 8].view("<f4").reshape(h, w, 2)
                    flows[key] = FlowField(flow, raw[h * w * 8:].reshape(h, w).astype(bool))
            feats = None
            if "features" in entry:
                path = root / entry["features"]
                if not path.is_file():
                    raise LoadError(f"missing file: {entry['features']}")
                if path.stat().st_size != h * w * c * 4:
                    raise SchemaError(f"inconsistent feature dimension in {entry['features']} "
                                      f"(dataset feature_dim={c})")
                feats = _read(root, entry["features"], "<f4", h * w * c, lazy).reshape(h, w, c)
            frames.append(FrameRecord(vid, int(entry["time_index"]), cam, image, depth,
                                      flows.get("flow_fwd"), flows.get("flow_bwd"), feats,
                                      files={k: v for k, v in entry.items() if k not in ("camera", "time_index")}))
    frames.sort(key=lambda f: (f.video_id, f.time_index))
    if "bounds" in manifest:
        bounds = SceneBounds(np.array(manifest["bounds"]["min"]), np.array(manifest["bounds"]["max"]))
    else:
        bounds = hull_bounds(frames)
    meta = dict(manifest.get("meta", {}))
    meta["feature_dim"] = c
    return frames, bounds, meta


def hull_bounds(frames: list[FrameRecord], inflate: float = 0.1) -> SceneBounds:
    """Axis-aligned hull of camera centres and depth points, inflated by ``inflate``."""
    pts = [f.camera.center[None] for f in frames]
    for f in frames:
        if f.depth is not None and len(f.depth):
            o, d = f.camera.rays(f.camera.pixel_centers(f.depth["pixel"]))
            pts.append(o + d * f.depth["depth"][:, None].astype(np.float64))
    pts = np.concatenate(pts)
    lo, hi = pts.min(0), pts.max(0)
    pad = np.maximum((hi - lo) * inflate / 2, 1e-3)
    return SceneBounds(lo - pad, hi + pad)


def video_lengths(frames: list[FrameRecord]) -> dict[int, int]:
    out: dict[int, int] = {}
    for f in frames:
        out[f.video_id] = max(out.get(f.video_id, 0), f.time_index)
    return out


def normalized_time(time_index, n_frames):
    """Map 1..T onto [0, 1] (a single-frame video sits at 0)."""
    return (np.asarray(time_index, np.float64) - 1) / max(n_frames - 1, 1)
