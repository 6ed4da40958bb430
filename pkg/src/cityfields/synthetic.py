"""Analytic toy scenes: renderer of ground-truth images, depth, flow and features.

Static geometry is made of textured axis-aligned boxes; movers are spheres or
boxes translating along per-video trajectories. Images are produced by dense
quadrature of the analytic density (step at most 1/512 of the box diagonal);
depth, flow, class and instance maps come from exact ray intersections.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import (CameraModel, FlowField, FrameRecord, SceneBounds, look_at, project_lidar_depth,
                   write_dataset)

SKY_CLASS = 0


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class Texture:
    color_a: tuple = (0.8, 0.8, 0.8)
    color_b: tuple = (0.3, 0.3, 0.3)
    kind: str = "flat"
    """flat | checker | waves"""
    scale: float = 1.0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        a = np.asarray(self.color_a)
        b = np.asarray(self.color_b)
        if self.kind == "checker":
            cells = np.floor(x / self.scale).astype(np.int64).sum(-1) & 1
            return np.where(cells[:, None] == 1, b, a)
        if self.kind == "waves":
            s = 0.5 + 0.5 * np.sin(x[:, 0] / self.scale) * np.cos(x[:, 2] / self.scale)
            return a + (b - a) * s[:, None]
        return np.broadcast_to(a, x.shape).copy()


@dataclass(frozen=True)
class Box:
    center: tuple
    half_size: tuple
    texture: Texture = Texture()
    class_id: int = 1

    def inside(self, x, offset=0.0):
        return (np.abs(x - (np.asarray(self.center) + offset)) <= np.asarray(self.half_size)).all(-1)

    def intersect(self, o, d, offset=0.0):
        c = np.asarray(self.center) + offset
        h = np.asarray(self.half_size)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0 = (c - h - o) * inv
            t1 = (c + h - o) * inv
        t0 = np.where(np.isnan(t0), -np.inf, t0)
        t1 = np.where(np.isnan(t1), np.inf, t1)
        near = np.minimum(t0, t1).max(-1)
        far = np.maximum(t0, t1).min(-1)
        hit = (far >= near) & (far > 0)
        return np.where(hit, np.where(near > 0, near, 0.0), np.inf)


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    texture: Texture = Texture()
    class_id: int = 3

    def inside(self, x, offset=0.0):
        return np.linalg.norm(x - (np.asarray(self.center) + offset), axis=-1) <= self.radius

    def intersect(self, o, d, offset=0.0):
        oc = o - (np.asarray(self.center) + offset)
        a = (d * d).sum(-1)
        b = 2 * (oc * d).sum(-1)
        c = (oc * oc).sum(-1) - self.radius ** 2
        disc = b * b - 4 * a * c
        sq = np.sqrt(np.maximum(disc, 0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > 0, t0, t1)
        return np.where((disc >= 0) & (t > 0), t, np.inf)


@dataclass(frozen=True)
class Trajectory:
    kind: str = "linear"
    start: tuple = (0.0, 0.0, 0.0)
    """Position at frame 1 (linear) or circle centre (circular)."""
    velocity: tuple = (0.0, 0.0, 0.0)
    """Displacement per frame (linear)."""
    radius: float = 0.0
    angular_speed: float = 0.0
    phase: float = 0.0

    def offset(self, frame) -> np.ndarray:
        f = np.asarray(frame, np.float64) - 1
        if self.kind == "circular":
            ang = self.phase + self.angular_speed * f
            return np.asarray(self.start) + self.radius * np.stack(
                [np.cos(ang), np.zeros_like(ang), np.sin(ang)], -1)
        return np.asarray(self.start) + f[..., None] * np.asarray(self.velocity)


@dataclass(frozen=True)
class Mover:
    """A primitive whose local origin follows a trajectory (one per video)."""
    shape: Box | Sphere
    trajectories: dict
    instance_id: int = 1

    def offset(self, video: int, frame) -> np.ndarray | None:
        traj = self.trajectories.get(video)
        return None if traj is None else traj.offset(frame)


@dataclass(frozen=True)
class SyntheticScene:
    bounds: SceneBounds
    static: tuple = ()
    movers: tuple = ()
    sky_zenith: tuple = (0.35, 0.55, 0.9)
    sky_horizon: tuple = (0.8, 0.85, 0.9)
    ground_far: tuple = (0.35, 0.32, 0.3)
    solid_density: float = 2000.0
    video_gain: dict = field(default_factory=dict)
    """Optional per-video brightness multiplier on static albedo."""

    # -- analytic fields -------------------------------------------------
    def env_color(self, dirs: np.ndarray) -> np.ndarray:
        d = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
        up = d[:, 1]
        s = np.clip(up, 0, 1)[:, None]
        sky = np.asarray(self.sky_horizon) * (1 - s) + np.asarray(self.sky_zenith) * s
        g = np.clip(-up * 4, 0, 1)[:, None]
        return sky * (1 - g) + np.asarray(self.ground_far) * g

    def _mover_offsets(self, video, frame):
        return [m.offset(video, frame) for m in self.movers]

    def density(self, x: np.ndarray, video: int = 1, frame: int = 1, movers: bool = True) -> np.ndarray:
        occ = np.zeros(len(x), bool)
        for p in self.static:
            occ |= p.inside(x)
        if movers:
            for m, off in zip(self.movers, self._mover_offsets(video, frame)):
                if off is not None:
                    occ |= m.shape.inside(x, off)
        return occ * self.solid_density

    def labels(self, x, video=1, frame=1, movers=True):
        """Per-point (albedo, class id, instance id); movers take precedence."""
        color = np.zeros((len(x), 3))
        cls = np.full(len(x), SKY_CLASS, np.int64)
        inst = np.zeros(len(x), np.int64)
        gain = self.video_gain.get(video, 1.0)
        for p in self.static:
            m = p.inside(x) & (cls == SKY_CLASS)
            if m.any():
                color[m] = p.texture(x[m]) * gain
                cls[m] = p.class_id
        if movers:
            for mv, off in zip(self.movers, self._mover_offsets(video, frame)):
                if off is None:
                    continue
                m = mv.shape.inside(x, off)
                if m.any():
                    color[m] = mv.shape.texture(x[m] - off)
                    cls[m] = mv.shape.class_id
                    inst[m] = mv.instance_id
        return np.clip(color, 0, 1), cls, inst

    def first_hit(self, o, d, video=1, frame=1, movers=True):
        """Exact first-surface ray parameter and owning primitive (-1 static? see below).

        Returns (t, owner) where owner is -1 for no hit, index into ``static``
        for static hits and ``len(static) + k`` for mover k.
        """
        best = np.full(len(o), np.inf)
        owner = np.full(len(o), -1, np.int64)
        prims = [(p, 0.0) for p in self.static]
        if movers:
            prims += [(m.shape, off) for m, off in zip(self.movers, self._mover_offsets(video, frame))
                      if off is not None]
            keys = list(range(len(self.static))) + [len(self.static) + k for k, m in enumerate(self.movers)
                                                     if m.offset(video, frame) is not None]
        else:
            keys = list(range(len(self.static)))
        for key, (p, off) in zip(keys, prims):
            t = p.intersect(o, d, off)
            closer = t < best
            best[closer] = t[closer]
            owner[closer] = key
        return best, owner

    def check_movers(self, n_videos, n_frames):
        lo, hi = self.bounds.box_min, self.bounds.box_max
        for m in self.movers:
            ext = (np.full(3, m.shape.radius) if isinstance(m.shape, Sphere) else np.asarray(m.shape.half_size))
            for v in range(1, n_videos + 1):
                off = m.offset(v, np.arange(1, n_frames + 1))
                if off is None:
                    continue
                c = off + (np.asarray(m.shape.center) if isinstance(m.shape, (Box, Sphere)) else 0)
                if (c - ext < lo).any() or (c + ext > hi).any():
                    raise GenerationError(f"mover {m.instance_id} leaves the foreground box in video {v}")

    # -- rendering -------------------------------------------------------
    def render_view(self, camera: CameraModel, video: int = 1, frame: int = 1, movers: bool = True,
                    max_rays: int = 2048) -> dict:
        """Ground-truth channels of one view.

        Keys: image (H,W,3), depth (H,W; inf where the ray escapes), owner,
        class_map, instance_map, points (H,W,3 first-hit positions).
        """
        h, w = camera.height, camera.width
        o, d = camera.rays(camera.pixel_centers())
        t_hit, owner = self.first_hit(o, d, video, frame, movers)
        near, far, inbox = self.bounds.intersect(o, d)
        diag = np.linalg.norm(self.bounds.extent)
        image = np.empty((len(o), 3))
        env = self.env_color(d)
        for s in range(0, len(o), max_rays):
            sl = slice(s, s + max_rays)
            image[sl] = self._quadrature(o[sl], d[sl], near[sl], far[sl], inbox[sl], env[sl], diag,
                                         video, frame, movers)
        pts = o + d * np.where(np.isfinite(t_hit), t_hit, 0)[:, None]
        _, cls, inst = self.labels(pts + d * 1e-6, video, frame, movers)
        cls = np.where(owner >= 0, cls, SKY_CLASS)
        inst = np.where(owner >= 0, inst, 0)
        return {"image": image.reshape(h, w, 3), "depth": t_hit.reshape(h, w), "owner": owner.reshape(h, w),
                "class_map": cls.reshape(h, w), "instance_map": inst.reshape(h, w),
                "points": pts.reshape(h, w, 3)}

    def _quadrature(self, o, d, near, far, inbox, env, diag, video, frame, movers):
        dlen = np.linalg.norm(d, axis=-1)
        span = np.where(inbox, far - near, 0.0)
        n = max(int(np.ceil((span * dlen).max() / (diag / 512))), 1) if inbox.any() else 1
        # uniform midpoint rule; world step <= diag / 512 on every ray
        u = (np.arange(n) + 0.5) / n
        t = near[:, None] + span[:, None] * u[None]
        delta = (span * dlen / n)[:, None]
        x = o[:, None] + d[:, None] * t[..., None]
        flat = x.reshape(-1, 3)
        sigma = self.density(flat, video, frame, movers).reshape(t.shape)
        color = np.zeros(flat.shape)
        occ = sigma.reshape(-1) > 0
        if occ.any():
            color[occ] = self.labels(flat[occ], video, frame, movers)[0]
        color = color.reshape(*t.shape, 3)
        tau = sigma * delta
        trans = np.exp(-np.concatenate([np.zeros((len(o), 1)), np.cumsum(tau, 1)[:, :-1]], 1))
        wts = trans * (1 - np.exp(-tau))
        rest = np.exp(-tau.sum(1))
        return (wts[..., None] * color).sum(1) + rest[:, None] * env

    def flow_at(self, cam_src: CameraModel, cam_dst: CameraModel, uv: np.ndarray, video: int,
                frame: int, step: int):
        """Exact 2D displacement of continuous pixels ``uv`` from ``frame`` to
        ``frame + step``. Returns (flow (N,2), valid (N,))."""
        o, d = cam_src.rays(uv)
        t, owner = self.first_hit(o, d, video, frame)
        x = o + d * np.where(np.isfinite(t), t, 0)[:, None]
        n_static = len(self.static)
        for k, m in enumerate(self.movers):
            sel = owner == n_static + k
            if sel.any():
                x[sel] += m.offset(video, frame + step) - m.offset(video, frame)
        uv2, z2 = cam_dst.project(x)
        valid = (owner >= 0) & (z2 > 0)
        return np.where(valid[:, None], uv2 - uv, 0.0), valid

    def features(self, class_map: np.ndarray, dim: int, rng: np.random.Generator) -> np.ndarray:
        if class_map.max() >= dim:
            raise GenerationError("feature dimension too small for the class count")
        onehot = np.eye(dim)[class_map]
        return onehot + rng.normal(0.0, 0.01, onehot.shape)


CameraSource = Callable[[int, int], CameraModel]


def _camera_source(cameras) -> CameraSource:
    if callable(cameras):
        return cameras
    return lambda v, f: cameras[v - 1][f - 1]


def generate_synthetic(scene: SyntheticScene, n_videos: int, n_frames: int, cameras, out,
                       feature_dim: int = 8, lidar_fraction: float = 0.25, seed: int = 0,
                       meta: dict | None = None) -> Path:
    """Render every (video, frame) and write a dataset directory.

    ``cameras`` is either ``cameras[video-1][frame-1]`` or a callable
    ``(video, frame) -> CameraModel``.
    """
    scene.check_movers(n_videos, n_frames)
    cam = _camera_source(cameras)
    rng = np.random.default_rng(seed)
    frames = []
    for v in range(1, n_videos + 1):
        for f in range(1, n_frames + 1):
            c = cam(v, f)
            if c is None:
                raise GenerationError(f"no camera for video {v}, frame {f}")
            gt = scene.render_view(c, v, f)
            hit = np.isfinite(gt["depth"]).reshape(-1)
            pts = gt["points"].reshape(-1, 3)
            pick = hit & (rng.random(hit.shape) < lidar_fraction)
            depth = project_lidar_depth(pts[pick], c)
            uv = c.pixel_centers()
            flows = {}
            for key, step in (("fwd", 1), ("bwd", -1)):
                if 1 <= f + step <= n_frames:
                    fl, ok = scene.flow_at(c, cam(v, f + step), uv, v, f, step)
                    flows[key] = FlowField(fl.reshape(c.height, c.width, 2).astype(np.float32),
                                           ok.reshape(c.height, c.width))
            feats = scene.features(gt["class_map"], feature_dim, rng).astype(np.float32)
            frames.append(FrameRecord(v, f, c, gt["image"].astype(np.float32), depth, flows.get("fwd"),
                                      flows.get("bwd"), feats))
    return write_dataset(out, frames, feature_dim, scene.bounds, meta)


# ------------------------------------------------------------ toy scenes

def static_toy_scene() -> SyntheticScene:
    bounds = SceneBounds(np.array([-2.0, -0.6, -2.0]), np.array([2.0, 1.4, 2.0]))
    static = (
        Box((0.0, -0.55, 0.0), (2.0, 0.05, 2.0), Texture((0.55, 0.5, 0.42), (0.38, 0.36, 0.33), "checker", 0.5), 1),
        Box((-0.6, -0.05, -0.4), (0.4, 0.45, 0.4), Texture((0.8, 0.3, 0.25), (0.95, 0.7, 0.3), "waves", 0.35), 2),
        Box((0.7, -0.25, 0.55), (0.3, 0.25, 0.3), Texture((0.2, 0.35, 0.8), (0.4, 0.7, 0.9), "waves", 0.25), 2),
    )
    return SyntheticScene(bounds, static)


def moving_sphere_scene(n_frames: int = 24) -> SyntheticScene:
    base = static_toy_scene()
    speed = 2.2 / (n_frames - 1)
    sphere = Sphere((0.0, 0.0, 0.0), 0.3, Texture((0.95, 0.85, 0.1), (0.9, 0.2, 0.6), "waves", 0.12), 3)
    mover = Mover(sphere, {
        1: Trajectory("linear", (-1.1, -0.2, 1.3), (speed, 0.0, 0.0)),
        2: Trajectory("linear", (1.3, -0.2, -1.1), (0.0, 0.0, speed)),
    }, instance_id=1)
    return SyntheticScene(base.bounds, base.static, (mover,))


def orbit_cameras(n: int, radius: float = 4.2, height: float = 1.6, size: int = 64, focal: float = 70.0,
                  start: float = 0.0, sweep: float = 2 * np.pi, target=(0.0, -0.2, 0.0)) -> list[CameraModel]:
    cams = []
    for i in range(n):
        a = start + sweep * i / (n if abs(sweep - 2 * np.pi) < 1e-9 else max(n - 1, 1))
        eye = (radius * np.cos(a), height, radius * np.sin(a))
        cams.append(look_at(eye, target, size, size, focal))
    return cams


def two_district_city() -> tuple[SyntheticScene, list[CameraModel]]:
    """Two districts along x separated by a tall wall; cameras in both districts."""
    bounds = SceneBounds(np.array([-4.0, -0.6, -1.5]), np.array([4.0, 2.5, 1.5]))
    static = (
        Box((0.0, -0.55, 0.0), (4.0, 0.05, 1.5), Texture((0.5, 0.5, 0.5), (0.3, 0.3, 0.3), "checker", 0.5), 1),
        Box((-0.6, 0.9, 0.0), (0.1, 1.45, 1.5), Texture((0.7, 0.6, 0.5)), 2),
        Box((2.5, 0.2, 0.6), (0.4, 0.7, 0.4), Texture((0.3, 0.6, 0.3)), 2),
        Box((-2.6, 0.2, -0.6), (0.4, 0.7, 0.4), Texture((0.6, 0.3, 0.3)), 2),
    )
    cams = []
    for x in (-3.4, -2.8, -2.2, -1.6):
        for tz in (-0.8, 0.0, 0.8):
            cams.append(look_at((x, 0.4, 0.0), (x + 3.0, 0.2, tz), 32, 32, 24.0))
    for x in (1.6, 2.2, 2.8, 3.4):
        for tz in (-0.8, 0.0, 0.8):
            cams.append(look_at((x, 0.4, 0.0), (x - 3.0, 0.2, tz), 32, 32, 24.0))
    return SyntheticScene(bounds, static), cams
