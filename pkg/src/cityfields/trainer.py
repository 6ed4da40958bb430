"""Optimization loop, run configuration, CSV log and checkpoint blobs."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import struct
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import FrameRecord, SceneBounds, load_dataset, video_lengths
from .fields import FieldConfig
from .losses import LOSS_NAMES, ConfigError, LossWeights
from .model import ABLATIONS, RaySet, SamplerConfig, SudsModel, check_flags
from .nn import Adam

CHECKPOINT_MAGIC = b"CFCKPT01"
LOG_COLUMNS = ("iteration", *LOSS_NAMES, "total", "L_prop", "L_dist", "objective", "lambda_o")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 125_000
    rays_per_batch: int = 4096
    seed: int = 0
    lr_init: float = 5e-3
    lr_final: float = 5e-4
    checkpoint_every: int = 0
    """0 writes only the final checkpoint."""
    holdout_every: int = 0
    """Hold out every k-th frame of each video (by time index) from training; 0 keeps all."""
    dtype: str = "float32"
    ablations: tuple = ()
    fields: FieldConfig = FieldConfig()
    sampler: SamplerConfig = SamplerConfig()
    weights: LossWeights = LossWeights()

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.rays_per_batch <= 0:
            raise ConfigError("rays_per_batch must be positive")
        check_flags(self.ablations)

    @property
    def flags(self) -> frozenset:
        return frozenset(self.ablations)

    @property
    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True, default=list).encode()).hexdigest()[:16]


# ------------------------------------------------------------ config files

def _coerce(value: str, typ, where: str):
    origin = typing.get_origin(typ)
    if typ is bool:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    if typ is int:
        return int(value)
    if typ is float:
        return float(value)
    if typ is str:
        return value
    if typ is tuple or origin is tuple:
        parts = [p.strip() for p in value.replace(" ", ",").split(",") if p.strip()]
        try:
            return tuple(int(p) for p in parts)
        except ValueError:
            return tuple(parts)
    raise ConfigError(f"{where}: unsupported type {typ}")


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def apply_overrides(config: TrainConfig, overrides: dict[str, str]) -> TrainConfig:
    """Apply ``key=value`` strings; nested groups use ``fields.``, ``sampler.``, ``weights.``."""
    top: dict = {}
    nested: dict = {"fields": {}, "sampler": {}, "weights": {}}
    types = _field_types(TrainConfig)
    for key, raw in overrides.items():
        key = key.strip()
        try:
            if "." in key:
                group, name = key.split(".", 1)
                if group not in nested:
                    raise ConfigError(f"unknown config key {key!r}")
                sub_types = _field_types(type(getattr(config, group)))
                if name not in sub_types:
                    raise ConfigError(f"unknown config key {key!r}")
                nested[group][name] = _coerce(raw.strip(), sub_types[name], key)
            else:
                if key not in types or key in nested:
                    raise ConfigError(f"unknown config key {key!r}")
                top[key] = _coerce(raw.strip(), types[key], key)
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
    for group, values in nested.items():
        if values:
            top[group] = dataclasses.replace(getattr(config, group), **values)
    return dataclasses.replace(config, **top)


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Human-readable ``key = value`` lines; ``#`` starts a comment."""
    overrides = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        k, v = line.split("=", 1)
        overrides[k.strip()] = v.strip()
    return apply_overrides(base or TrainConfig(), overrides)


def load_config(path) -> TrainConfig:
    return parse_config_text(Path(path).read_text())


def config_text(config: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if dataclasses.is_dataclass(value):
            for g in dataclasses.fields(value):
                lines.append(f"{f.name}.{g.name} = {_fmt(getattr(value, g.name))}")
        else:
            lines.append(f"{f.name} = {_fmt(value)}")
    return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


# --------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: SudsModel, optimizer: Adam | None, iteration: int, config: TrainConfig,
                    extra: dict | None = None):
    """Named-tensor blob: magic, u64 index length, JSON index, raw little-endian payload."""
    tensors = dict(model.named_tensors())
    if optimizer is not None:
        names = list(model.named_tensors())
        for name, m, v in zip(names, optimizer.m, optimizer.v):
            tensors[f"adam.m.{name}"] = m
            tensors[f"adam.v.{name}"] = v
    index, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().numpy()).astype(t.detach().numpy().dtype.newbyteorder("<"))
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset,
                      "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    grids = {}
    for prefix, branch in (("static", model.static), ("dynamic", model.dynamic), ("env", model.env)):
        if branch is not None:
            grids[f"{prefix}.grid"] = branch.grid.header().hex()
    header = {"iteration": iteration, "config": config.to_dict(), "config_digest": config.digest(),
              "adam_steps": optimizer.step_count if optimizer else 0, "grid_headers": grids,
              "bounds": model.bounds.to_json(), "tensors": index, "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True, default=list).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def read_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n])
    base = 16 + n
    arrays = {}
    for e in header["tensors"]:
        raw = data[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header, arrays


def _config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["fields"] = FieldConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["fields"].items()})
    d["sampler"] = SamplerConfig(**d["sampler"])
    d["weights"] = LossWeights(**d["weights"])
    d["ablations"] = tuple(d["ablations"])
    return TrainConfig(**d)


def load_checkpoint(path, with_optimizer: bool = False):
    """Rebuild the model (and optionally the optimizer). Returns (model, config, iteration, optimizer)."""
    header, arrays = read_checkpoint(path)
    config = _config_from_dict(header["config"])
    b = header["bounds"]
    model = build_model(config, SceneBounds(np.array(b["min"]), np.array(b["max"])))
    named = model.named_tensors()
    with torch.no_grad():
        for name, t in named.items():
            t.copy_(torch.from_numpy(arrays[name]))
    opt = None
    if with_optimizer:
        opt = Adam(list(named.values()), config.iterations, config.lr_init, config.lr_final)
        for i, name in enumerate(named):
            opt.m[i].copy_(torch.from_numpy(arrays[f"adam.m.{name}"]))
            opt.v[i].copy_(torch.from_numpy(arrays[f"adam.v.{name}"]))
        opt.step_count = header["adam_steps"]
    return model, config, header["iteration"], opt


# ------------------------------------------------------------------ training

def build_model(config: TrainConfig, bounds: SceneBounds) -> SudsModel:
    return SudsModel(config.fields, bounds, config.sampler, config.seed, config.torch_dtype,
                     single_branch="single_branch" in config.flags)


def split_frames(frames: list[FrameRecord], holdout_every: int):
    """(train, held out): every k-th frame of each video by time index is held out."""
    if holdout_every <= 0:
        return list(frames), []
    train, held = [], []
    for f in frames:
        (held if f.time_index % holdout_every == 0 else train).append(f)
    return train, held


def resolve_config(config: TrainConfig, frames: list[FrameRecord], meta: dict) -> TrainConfig:
    """Fill dataset-dependent field settings (video count, feature dimension)."""
    n_videos = max(f.video_id for f in frames)
    c = int(meta.get("feature_dim", config.fields.feature_dim)) or config.fields.feature_dim
    return dataclasses.replace(config, fields=dataclasses.replace(config.fields, n_videos=n_videos, feature_dim=c))


class Trainer:
    """Holds the model, optimizer, ray shard and RNG state of one run."""

    def __init__(self, config: TrainConfig, frames: list[FrameRecord], bounds: SceneBounds,
                 camera_frames: list[FrameRecord] | None = None, lengths: dict | None = None,
                 pixels: list[np.ndarray] | None = None):
        self.config = config
        self.flags = config.flags
        self.model = build_model(config, bounds)
        self.params = self.model.parameters()
        self.optimizer = Adam(self.params, max(config.iterations, 1), config.lr_init, config.lr_final)
        self.rays = RaySet(frames, camera_frames, lengths, config.torch_dtype, pixels)
        self.rng = np.random.default_rng(config.seed)
        self.generator = torch.Generator().manual_seed(config.seed + 1)
        self._perm = np.empty(0, np.int64)
        self._cursor = 0

    def next_indices(self) -> np.ndarray:
        """Epoch-level random permutation of the shard, consumed in order."""
        n = self.config.rays_per_batch
        out = []
        while n > 0:
            if self._cursor >= len(self._perm):
                self._perm = self.rng.permutation(len(self.rays))
                self._cursor = 0
            take = self._perm[self._cursor:self._cursor + n]
            self._cursor += len(take)
            n -= len(take)
            out.append(take)
        return np.concatenate(out)

    def step(self, iteration: int) -> dict:
        batch = self.rays.batch(self.next_indices())
        return train_step(self.model, self.optimizer, batch, self.config, iteration, self.generator, self.params)


def train_step(model: SudsModel, optimizer: Adam, batch, config: TrainConfig, iteration: int,
               generator: torch.Generator | None = None, params=None) -> dict:
    """Forward, loss, backward and one Adam update. Returns the report as floats."""
    params = params or model.parameters()
    out = model.forward(batch, config.flags, generator)
    report = model.losses(out, batch, config.weights, iteration, config.iterations, config.flags)
    values = {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in report.items()}
    for name in (*LOSS_NAMES, "total", "L_prop", "L_dist", "objective"):
        if name in values and not math.isfinite(values[name]):
            raise TrainingDiverged(f"non-finite loss term {name} at iteration {iteration}")
    grads = torch.autograd.grad(report["objective"], params, allow_unused=True)
    optimizer.step(grads, iteration)
    return values


def run_training(frames: list[FrameRecord], bounds: SceneBounds, config: TrainConfig, out_dir,
                 camera_frames=None, lengths=None, progress=None, pixels=None) -> Trainer:
    """Train for ``config.iterations`` steps, writing ``log.csv`` and checkpoints in ``out_dir``.

    ``pixels`` optionally restricts each frame to a subset of its pixels (a cell shard).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(config, frames, bounds, camera_frames, lengths, pixels)
    (out / "config.txt").write_text(config_text(config))
    with open(out / "log.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for it in range(config.iterations):
            values = trainer.step(it)
            writer.writerow([it] + [repr(values.get(c, 0.0)) for c in LOG_COLUMNS[1:]])
            if config.checkpoint_every and (it + 1) % config.checkpoint_every == 0 and it + 1 < config.iterations:
                save_checkpoint(out / f"checkpoint_{it + 1:07d}.bin", trainer.model, trainer.optimizer, it + 1,
                                config)
            if progress is not None:
                progress(it, values)
    save_checkpoint(out / "checkpoint.bin", trainer.model, trainer.optimizer, config.iterations, config)
    return trainer


def train_dataset(root, config: TrainConfig, out_dir, progress=None) -> Trainer:
    """Load a dataset directory, split off held-out frames and train."""
    frames, bounds, meta = load_dataset(root)
    config = resolve_config(config, frames, meta)
    train, _ = split_frames(frames, config.holdout_every)
    return run_training(train, bounds, config, out_dir, camera_frames=frames, lengths=video_lengths(frames),
                        progress=progress)
