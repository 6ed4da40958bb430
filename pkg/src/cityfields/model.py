"""The full three-branch model: ray batches in, rendered quantities and the
named loss report out."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .data import FrameRecord, SceneBounds, normalized_time, video_lengths
from .fields import DynamicField, EnvField, FieldConfig, StaticField
from .losses import (LOSS_NAMES, ConfigError, LossWeights, factorization_losses, flow_regularizers,
                     reconstruction_losses, total_loss, warping_losses)
from .render import (RenderOutput, composite_point, occlusion_weight, quadrature_weights, render_flow_2d,
                     render_ray)
from .sampling import (ProposalNetwork, distortion_loss, edges_from_points, histogram_loss, proposal_resample,
                       stratified_samples)

ABLATIONS = ("no_depth", "no_flow", "no_warp", "no_appearance", "no_occlusion_weights", "single_branch")
CONFLICTS = ({"single_branch", "no_appearance"}, {"no_warp", "no_occlusion_weights"})


def check_flags(flags) -> frozenset:
    flags = frozenset(flags)
    unknown = flags - set(ABLATIONS)
    if unknown:
        raise ConfigError(f"unknown ablation flag(s): {sorted(unknown)}")
    for pair in CONFLICTS:
        if pair <= flags:
            raise ConfigError(f"conflicting ablation flags: {sorted(pair)}")
    return flags


@dataclass(frozen=True)
class SamplerConfig:
    proposal: bool = True
    n_uniform: int = 64
    n_resampled: int = 32
    n_stratified: int = 64
    """Samples per ray when the proposal sampler is off."""
    proposal_log2_table_size: int = 15
    proposal_levels: int = 0
    """0 means the main model's level count."""
    proposal_hidden: int = 16
    histogram_weight: float = 1.0
    distortion_weight: float = 0.002
    histogram_eps: float = 0.01


class StopGradCache:
    """Holds the quantities treated as constants in the gradient.

    In record mode each held tensor is detached and stored; in replay mode
    the stored value is returned instead, so a finite-difference probe sees
    exactly the constants the analytic gradient assumed.
    """

    def __init__(self):
        self.values: dict[str, torch.Tensor] = {}
        self.replay = False

    def hold(self, name: str, value: torch.Tensor) -> torch.Tensor:
        if self.replay:
            return self.values[name]
        self.values[name] = value.detach()
        return self.values[name]


@dataclass
class RayBatch:
    origins: torch.Tensor
    dirs: torch.Tensor
    """Camera-depth scaled directions (camera-frame z = 1)."""
    video: torch.Tensor
    time: torch.Tensor
    dt: torch.Tensor
    """Normalized time step between adjacent frames of the ray's video."""
    uv: torch.Tensor
    color: torch.Tensor | None = None
    features: torch.Tensor | None = None
    depth: torch.Tensor | None = None
    depth_mask: torch.Tensor | None = None
    has_next: torch.Tensor | None = None
    has_prev: torch.Tensor | None = None
    flow_fwd: torch.Tensor | None = None
    flow_fwd_mask: torch.Tensor | None = None
    flow_bwd: torch.Tensor | None = None
    flow_bwd_mask: torch.Tensor | None = None
    cam_next: tuple | None = None
    cam_prev: tuple | None = None
    """(intrinsics (R,3,3), rotation (R,3,3), centre (R,3)) per ray."""

    def __len__(self):
        return self.origins.shape[0]


class SudsModel:
    def __init__(self, field_config: FieldConfig, bounds: SceneBounds, sampler: SamplerConfig = SamplerConfig(),
                 seed: int = 0, dtype=torch.float32, single_branch: bool = False):
        self.field_config = field_config
        self.sampler = sampler
        self.bounds = bounds
        self.dtype = dtype
        self.single_branch = single_branch
        gen = torch.Generator().manual_seed(seed)
        self.static = None if single_branch else StaticField(field_config, gen, dtype)
        self.dynamic = DynamicField(field_config, gen, dtype, shadow=not single_branch)
        self.env = None if single_branch else EnvField(field_config, gen, dtype)
        self.proposal = None
        if sampler.proposal:
            self.proposal = ProposalNetwork(field_config, sampler.proposal_log2_table_size,
                                            sampler.proposal_levels or None, sampler.proposal_hidden, gen, dtype)
        self.box_min = torch.tensor(bounds.box_min, dtype=dtype)
        self.extent = torch.tensor(bounds.extent, dtype=dtype)

    # ---------------------------------------------------------------- params
    def named_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        if self.static is not None:
            out.update(self.static.named_tensors("static"))
        out.update(self.dynamic.named_tensors("dynamic"))
        if self.env is not None:
            out.update(self.env.named_tensors("env"))
        if self.proposal is not None:
            out.update(self.proposal.named_tensors("proposal"))
        return out

    def parameters(self) -> list[torch.Tensor]:
        return list(self.named_tensors().values())

    # -------------------------------------------------------------- geometry
    def normalize(self, x):
        return ((x - self.box_min) / self.extent).clamp(0.0, 1.0)

    def ray_bounds(self, origins, dirs):
        lo, hi = self.box_min, self.box_min + self.extent
        with np.errstate(divide="ignore"):
            inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
        t0 = torch.nan_to_num(t0, nan=-torch.inf)
        t1 = torch.nan_to_num(t1, nan=torch.inf)
        near = torch.minimum(t0, t1).amax(-1).clamp(min=0.0)
        far = torch.maximum(t0, t1).amin(-1)
        # rays that miss the box get a vanishing interval and see only the environment
        far = torch.maximum(far, near + 1e-4)
        return near, far

    # -------------------------------------------------------------- rendering
    def _place_samples(self, batch, near, far, norm_scale, gen, jitter, cache, n_override=None):
        s = self.sampler
        if self.proposal is None or n_override is not None:
            n = n_override or s.n_stratified
            return cache.hold("points", stratified_samples(near, far, n, gen, jitter)), None
        r = len(batch)
        prop = {}

        def density(points):
            x = self.normalize(batch.origins[:, None] + batch.dirs[:, None] * points[..., None]).reshape(-1, 3)
            n = points.shape[-1]
            t = batch.time[:, None].expand(r, n).reshape(-1)
            v = batch.video[:, None].expand(r, n).reshape(-1)
            ds, dd = self.proposal(x, t, v)
            prop["static"] = ds.reshape(r, n)
            prop["dynamic"] = dd.reshape(r, n)
            return (ds + dd).reshape(r, n)

        points, edges, _, _ = proposal_resample(near, far, s.n_uniform, s.n_resampled, density, norm_scale,
                                                gen, jitter)
        points = cache.hold("points", points)
        delta = (edges[..., 1:] - edges[..., :-1]) * norm_scale[:, None]
        prop["edges"] = edges
        prop["w_static"] = quadrature_weights(prop["static"], delta)[0]
        prop["w_dynamic"] = quadrature_weights(prop["dynamic"], delta)[0]
        return points, prop

    def forward(self, batch: RayBatch, flags=frozenset(), generator=None, jitter: bool = True,
                cache: StopGradCache | None = None, with_warp: bool | None = None, with_flow: bool | None = None,
                n_samples: int | None = None) -> dict:
        """Render a ray batch. Returns a dict with the composite render and
        everything the losses need."""
        flags = check_flags(flags)
        cache = cache or StopGradCache()
        if with_warp is None:
            with_warp = "no_warp" not in flags
        if with_flow is None:
            with_flow = "no_warp" not in flags and "no_flow" not in flags
        r = len(batch)
        near, far = self.ray_bounds(batch.origins, batch.dirs)
        norm_scale = (batch.dirs / self.extent).norm(dim=-1)
        points, prop = self._place_samples(batch, near, far, norm_scale, generator, jitter, cache, n_samples)
        n = points.shape[-1]
        edges = edges_from_points(points, near, far)
        delta = (edges[..., 1:] - edges[..., :-1]) * norm_scale[:, None]
        world = batch.origins[:, None] + batch.dirs[:, None] * points[..., None]
        x = self.normalize(world).reshape(-1, 3)
        unit = batch.dirs / batch.dirs.norm(dim=-1, keepdim=True)
        d = unit[:, None].expand(r, n, 3).reshape(-1, 3)
        t = batch.time[:, None].expand(r, n).reshape(-1)
        v = batch.video[:, None].expand(r, n).reshape(-1)

        dyn = self.dynamic(x, t, v, d)
        sd = dyn.density.reshape(r, n)
        out = {"points": points, "edges": edges, "delta": delta, "near": near, "far": far, "n_samples": n,
               "dynamic_density": sd, "shadow": dyn.shadow.reshape(r, n),
               "flow_bwd": dyn.flow_bwd.reshape(r, n, 3), "flow_fwd": dyn.flow_fwd.reshape(r, n, 3),
               "x": x.reshape(r, n, 3), "world": world}
        dcol = dyn.color.reshape(r, n, 3)
        dfeat = dyn.features.reshape(r, n, -1)
        if self.single_branch:
            zeros = torch.zeros(r, n, dtype=self.dtype)
            ss, scol, sfeat = zeros, torch.zeros_like(dcol), torch.zeros_like(dfeat)
            env_color = torch.zeros(r, 3, dtype=self.dtype)
            env_feat = torch.zeros(r, dfeat.shape[-1], dtype=self.dtype)
        else:
            st = self.static(x, d, t, v, use_appearance="no_appearance" not in flags)
            ss = st.density.reshape(r, n)
            scol = st.color.reshape(r, n, 3)
            sfeat = st.features.reshape(r, n, -1)
            env = self.env(unit, batch.video)
            env_color, env_feat = env.color, env.features
        out.update(static_density=ss, static_color=scol, static_features=sfeat, dynamic_color=dcol,
                   dynamic_features=dfeat, env_color=env_color, env_features=env_feat)
        sigma, color, feats = composite_point(ss, scol, sfeat, sd, dcol, dfeat, out["shadow"])
        render = render_ray(sigma, color, feats, points, delta, env_color, env_feat)
        out["sigma"] = sigma
        out["render"] = render

        if prop is not None:
            w_s = quadrature_weights(ss, delta)[0]
            w_d = quadrature_weights(sd, delta)[0]
            w_s = cache.hold("main_w_static", w_s)
            w_d = cache.hold("main_w_dynamic", w_d)
            hist = histogram_loss(prop["edges"], prop["w_dynamic"], edges, w_d, self.sampler.histogram_eps)
            if not self.single_branch:
                hist = hist + histogram_loss(prop["edges"], prop["w_static"], edges, w_s,
                                             self.sampler.histogram_eps)
            out["L_prop"] = hist
        span = (far - near)[:, None]
        out["L_dist"] = distortion_loss((edges - near[:, None]) / span, render.weights)

        if with_flow and batch.cam_next is not None:
            flows = []
            for key, cam, mask, flow in (("fwd", batch.cam_next, batch.has_next, out["flow_fwd"]),
                                         ("bwd", batch.cam_prev, batch.has_prev, out["flow_bwd"])):
                disp, ok = render_flow_2d(render.weights, world, flow * self.extent, *cam, batch.uv)
                out[f"flow2d_{key}"] = disp
                out[f"flow2d_{key}_valid"] = ok & mask
                flows.append(key)
        if with_warp and batch.has_next is not None:
            out["warped"] = {}
            for key, step, mask in (("fwd", 1.0, batch.has_next), ("bwd", -1.0, batch.has_prev)):
                flow = out[f"flow_{key}"].reshape(-1, 3)
                xw = (x + flow).clamp(0.0, 1.0)
                tw = (t + step * batch.dt[:, None].expand(r, n).reshape(-1)).clamp(0.0, 1.0)
                wd = self.dynamic(xw, tw, v, d)
                wsd = wd.density.reshape(r, n)
                wrender = render_ray(*composite_point(ss, scol, sfeat, wsd, wd.color.reshape(r, n, 3),
                                                      wd.features.reshape(r, n, -1), wd.shadow.reshape(r, n)),
                                     points, delta, env_color, env_feat)
                occ_sample = (_ratio(sd, sigma) - _ratio(wsd, sigma)).abs()
                occ = occlusion_weight(sd, wsd, sigma, render.weights)
                back = (wd.flow_bwd if step > 0 else wd.flow_fwd).reshape(r, n, 3)
                out["warped"][key] = {"render": wrender, "density": wsd, "mask": mask,
                                      "occlusion": cache.hold(f"occ_{key}", occ),
                                      "occlusion_sample": cache.hold(f"occs_{key}", occ_sample),
                                      "back_flow": back}
        return out

    def point_fields(self, world, dirs, time: float, video: int, flags=frozenset()) -> dict:
        """Branch outputs at arbitrary world points (N, 3) seen along unit ``dirs``."""
        n = world.shape[0]
        x = self.normalize(world)
        t = torch.full((n,), time, dtype=self.dtype)
        v = torch.full((n,), video, dtype=torch.long)
        dyn = self.dynamic(x, t, v, dirs)
        out = {"dynamic_density": dyn.density, "dynamic_color": dyn.color, "dynamic_features": dyn.features,
               "shadow": dyn.shadow}
        if self.single_branch:
            out.update(static_density=torch.zeros_like(dyn.density), static_color=torch.zeros_like(dyn.color),
                       static_features=torch.zeros_like(dyn.features))
        else:
            st = self.static(x, dirs, t, v, use_appearance="no_appearance" not in flags)
            out.update(static_density=st.density, static_color=st.color, static_features=st.features)
        return out

    def env_color(self, dirs, video: int):
        if self.env is None:
            return torch.zeros(dirs.shape[0], 3, dtype=self.dtype)
        return self.env(dirs, torch.full((dirs.shape[0],), video, dtype=torch.long)).color

    # ---------------------------------------------------------------- losses
    def losses(self, out: dict, batch: RayBatch, weights: LossWeights, iteration: int, total_iterations: int,
               flags=frozenset()) -> dict:
        """Batch-mean named components, ``total`` and the full ``objective``."""
        flags = check_flags(flags)
        render: RenderOutput = out["render"]
        flows = []
        for key in ("fwd", "bwd"):
            if f"flow2d_{key}" in out:
                target = getattr(batch, f"flow_{key}")
                mask = out[f"flow2d_{key}_valid"] & getattr(batch, f"flow_{key}_mask")
                flows.append((out[f"flow2d_{key}"], target, mask))
        feat_target = batch.features
        l_c, l_f, l_d, l_o = reconstruction_losses(
            render.color, batch.color, render.features if feat_target is not None else None, feat_target, None,
            render.depth, batch.depth, batch.depth_mask, flows)
        zero = torch.zeros_like(l_c)
        lw_c = lw_f = l_cyc = l_sm = l_slo = zero
        if "warped" in out:
            warped = [(w["render"].color, w["render"].features, w["occlusion"], w["mask"])
                      for w in out["warped"].values()]
            lw_c, lw_f = warping_losses(batch.color, feat_target, warped,
                                        use_occlusion="no_occlusion_weights" not in flags)
            cycles = [(w["occlusion_sample"], out[f"flow_{k}"], w["back_flow"], w["mask"])
                      for k, w in out["warped"].items()]
            l_cyc, l_sm, l_slo = flow_regularizers(out["x"], out["flow_bwd"], out["flow_fwd"], cycles)
        l_e, l_dmax, l_rho = factorization_losses(out["static_density"], out["dynamic_density"], out["shadow"],
                                                  out["delta"], weights.skew)
        per_ray = dict(zip(LOSS_NAMES, (l_c, l_f, l_d, l_o, lw_c, lw_f, l_cyc, l_sm, l_slo, l_e, l_dmax, l_rho)))
        report = {k: v.mean() for k, v in per_ray.items()}
        report["total"] = total_loss(report, weights, iteration, total_iterations, flags)
        objective = report["total"]
        if "L_prop" in out:
            report["L_prop"] = out["L_prop"].mean()
            objective = objective + self.sampler.histogram_weight * report["L_prop"]
        report["L_dist"] = out["L_dist"].mean()
        objective = objective + self.sampler.distortion_weight * report["L_dist"]
        report["objective"] = objective
        report["lambda_o"] = weights.flow_weight(iteration, total_iterations)
        return report


def _ratio(num, den):
    pos = den > 0
    return torch.where(pos, num / torch.where(pos, den, torch.ones_like(den)), torch.zeros_like(num))


# ------------------------------------------------------------------ ray sets

class RaySet:
    """All pixel rays of a list of frames, with lazily gathered targets.

    ``camera_frames`` supplies cameras for neighbour lookups (e.g. the full
    dataset when ``frames`` is a training split); ``lengths`` gives the frame
    count per video.
    """

    def __init__(self, frames: list[FrameRecord], camera_frames: list[FrameRecord] | None = None,
                 lengths: dict | None = None, dtype=torch.float32, pixels: list[np.ndarray] | None = None):
        self.frames = frames
        self.dtype = dtype
        camera_frames = camera_frames or frames
        self.lengths = lengths or video_lengths(camera_frames)
        self.cameras = {(f.video_id, f.time_index): f.camera for f in camera_frames}
        if pixels is None:
            pixels = [np.arange(f.camera.width * f.camera.height) for f in frames]
        self.pixels = pixels
        self.frame_of = np.concatenate([np.full(len(p), i, np.int64) for i, p in enumerate(pixels)])
        self.pixel_of = np.concatenate(pixels).astype(np.int64)
        self._depth = []
        for f in frames:
            if f.depth is not None and len(f.depth):
                self._depth.append((f.depth["pixel"].astype(np.int64), f.depth["depth"].astype(np.float64)))
            else:
                self._depth.append(None)
        self.has_features = all(f.features is not None for f in frames)

    def __len__(self):
        return len(self.frame_of)

    def batch(self, index: np.ndarray) -> RayBatch:
        index = np.asarray(index, np.int64)
        fr = self.frame_of[index]
        px = self.pixel_of[index]
        n = len(index)
        origins = np.empty((n, 3))
        dirs = np.empty((n, 3))
        uv = np.empty((n, 2))
        color = np.empty((n, 3))
        feats = np.empty((n, self.frames[0].features.shape[-1])) if self.has_features else None
        depth = np.zeros(n)
        depth_mask = np.zeros(n, bool)
        flow = {k: np.zeros((n, 2)) for k in ("fwd", "bwd")}
        flow_mask = {k: np.zeros(n, bool) for k in ("fwd", "bwd")}
        has = {k: np.zeros(n, bool) for k in ("fwd", "bwd")}
        cams = {k: (np.zeros((n, 3, 3)), np.zeros((n, 3, 3)), np.zeros((n, 3))) for k in ("fwd", "bwd")}
        video = np.empty(n, np.int64)
        time = np.empty(n)
        dt = np.empty(n)
        for i in np.unique(fr):
            sel = np.nonzero(fr == i)[0]
            f = self.frames[i]
            p = px[sel]
            cam = f.camera
            uv[sel] = cam.pixel_centers(p)
            origins[sel], dirs[sel] = cam.rays(uv[sel])
            row, col = p // cam.width, p % cam.width
            color[sel] = np.asarray(f.image[row, col], np.float64)
            if feats is not None:
                feats[sel] = np.asarray(f.features[row, col], np.float64)
            if self._depth[i] is not None:
                dp, dv = self._depth[i]
                j = np.searchsorted(dp, p).clip(0, len(dp) - 1)
                hit = dp[j] == p
                depth[sel[hit]] = dv[j[hit]]
                depth_mask[sel[hit]] = True
            length = self.lengths[f.video_id]
            video[sel] = f.video_id
            time[sel] = normalized_time(f.time_index, length)
            dt[sel] = 1.0 / max(length - 1, 1)
            for key, step, ff in (("fwd", 1, f.flow_fwd), ("bwd", -1, f.flow_bwd)):
                tn = f.time_index + step
                if not 1 <= tn <= length:
                    continue
                has[key][sel] = True
                other = self.cameras.get((f.video_id, tn))
                if other is None or ff is None:
                    continue
                flow[key][sel] = np.asarray(ff.flow[row, col], np.float64)
                flow_mask[key][sel] = np.asarray(ff.valid[row, col])
                cams[key][0][sel] = other.intrinsics
                cams[key][1][sel] = other.rotation
                cams[key][2][sel] = other.center
        tt = lambda a: torch.as_tensor(a, dtype=self.dtype)
        return RayBatch(
            tt(origins), tt(dirs), torch.as_tensor(video), tt(time), tt(dt), tt(uv), tt(color),
            None if feats is None else tt(feats), tt(depth), torch.as_tensor(depth_mask),
            torch.as_tensor(has["fwd"]), torch.as_tensor(has["bwd"]),
            tt(flow["fwd"]), torch.as_tensor(flow_mask["fwd"]), tt(flow["bwd"]), torch.as_tensor(flow_mask["bwd"]),
            tuple(tt(a) for a in cams["fwd"]), tuple(tt(a) for a in cams["bwd"]))


def camera_batch(camera, video: int, time: float, dtype=torch.float32, pixels=None) -> RayBatch:
    """Rays of an arbitrary (camera, normalized time, video) for rendering."""
    uv = camera.pixel_centers(pixels)
    o, d = camera.rays(uv)
    n = len(uv)
    tt = lambda a: torch.as_tensor(a, dtype=dtype)
    return RayBatch(tt(o), tt(d), torch.full((n,), int(video)), torch.full((n,), float(time), dtype=dtype),
                    torch.zeros(n, dtype=dtype), tt(uv))


@torch.no_grad()
def render_image(model: SudsModel, camera, video: int, time: float, chunk: int = 4096, n_samples: int | None = None,
                 flags=frozenset(), branch: str = "full") -> dict:
    """Render a full view. ``branch`` is full | static | dynamic.

    Returns numpy arrays: color (H,W,3), depth, opacity, features and the
    per-branch opacity of the dynamic part.
    """
    pieces = []
    total = camera.width * camera.height
    for s in range(0, total, chunk):
        b = camera_batch(camera, video, time, model.dtype, np.arange(s, min(s + chunk, total)))
        out = model.forward(b, flags, jitter=False, with_warp=False, with_flow=False, n_samples=n_samples)
        pieces.append(_branch_render(out, branch))
    h, w = camera.height, camera.width
    merged = {k: np.concatenate([p[k] for p in pieces]) for k in pieces[0]}
    return {k: v.reshape(h, w, -1).squeeze(-1) if v.ndim == 1 or v.shape[-1] == 1 else v.reshape(h, w, -1)
            for k, v in merged.items()}


def _branch_render(out, branch):
    pts, delta = out["points"], out["delta"]
    if branch == "full":
        r = out["render"]
    elif branch == "static":
        r = render_ray(out["static_density"], out["static_color"], out["static_features"], pts, delta,
                       out["env_color"], out["env_features"])
    elif branch == "dynamic":
        r = render_ray(out["dynamic_density"], out["dynamic_color"], out["dynamic_features"], pts, delta,
                       torch.zeros_like(out["env_color"]), torch.zeros_like(out["env_features"]))
    else:
        raise ValueError(f"unknown branch {branch!r}")
    dyn_alpha = quadrature_weights(out["dynamic_density"], delta)[0].sum(-1)
    return {"color": r.color.numpy(), "depth": r.depth.numpy(), "opacity": r.opacity.numpy(),
            "features": r.features.numpy(), "dynamic_opacity": dyn_alpha.numpy()}


@torch.no_grad()
def render_frame(model: SudsModel, rays: RaySet, frame: int, chunk: int = 2048, n_samples: int | None = None,
                 flags=frozenset()) -> dict:
    """Render one training frame of ``rays`` with its neighbour cameras.

    Besides the full, static-only and dynamic-only renders this returns the
    rendered 2D flow towards the next and previous frames (zero where the
    neighbour does not exist).
    """
    index = np.nonzero(rays.frame_of == frame)[0]
    cam = rays.frames[frame].camera
    keys = ("color", "static_color", "dynamic_color", "dynamic_opacity", "depth", "flow_fwd", "flow_bwd")
    parts = {k: [] for k in keys}
    for s in range(0, len(index), chunk):
        b = rays.batch(index[s:s + chunk])
        out = model.forward(b, flags, jitter=False, with_warp=False, with_flow=True, n_samples=n_samples)
        full, st, dy = (_branch_render(out, k) for k in ("full", "static", "dynamic"))
        parts["color"].append(full["color"])
        parts["depth"].append(full["depth"])
        parts["static_color"].append(st["color"])
        parts["dynamic_color"].append(dy["color"])
        parts["dynamic_opacity"].append(full["dynamic_opacity"])
        for key in ("fwd", "bwd"):
            flow = out.get(f"flow2d_{key}")
            flow = torch.zeros(len(b), 2) if flow is None else flow * out[f"flow2d_{key}_valid"][:, None]
            parts[f"flow_{key}"].append(flow.numpy())
    h, w = cam.height, cam.width
    merged = {k: np.concatenate(v).reshape(h, w, -1) for k, v in parts.items()}
    return {k: v[..., 0] if v.shape[-1] == 1 else v for k, v in merged.items()}
