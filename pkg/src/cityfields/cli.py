"""Command-line entry points: generate, partition, train, render, eval, instances, ablate.

Usage errors exit with status 2, runtime failures with status 1. Trailing
``key=value`` arguments override run-config entries (``fields.hidden=64``).
Set CITYFIELDS_WORKERS to train partition cells in parallel processes.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .analysis import (AnalysisError, extract_instances, fit_cuboid, image_metrics, instances_report,
                       model_dynamic_density, save_preview_png, write_json, write_metrics_csv)
from .data import DatasetError, load_dataset, look_at, normalized_time, video_lengths
from .losses import ConfigError
from .model import ABLATIONS, render_image
from .partition import partition_dataset, read_partition, render_routed
from .presets import SCENE_PRESETS, TRAIN_PRESETS, generate_preset, preset_config
from .synthetic import GenerationError
from .trainer import (TrainConfig, TrainingDiverged, apply_overrides, load_checkpoint, load_config,
                      resolve_config, run_training, split_frames)

WORKERS_ENV = "CITYFIELDS_WORKERS"


class UsageError(Exception):
    pass


# ------------------------------------------------------------------- parsing

def _floats(text: str, n: int, what: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"{what}: expected {n} comma-separated numbers, got {text!r}") from None
    if len(vals) != n:
        raise UsageError(f"{what}: expected {n} comma-separated numbers, got {text!r}")
    return vals


def _overrides(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"unexpected argument {item!r} (overrides look like key=value)")
        k, v = item.split("=", 1)
        out[k] = v
    return out


def _run_config(args) -> TrainConfig:
    if args.config and args.preset:
        raise UsageError("--config and --preset are mutually exclusive")
    if args.config:
        config = load_config(args.config)
    elif args.preset:
        config = preset_config(args.preset)
    else:
        config = TrainConfig()
    ov = _overrides(args.overrides)
    if args.seed is not None:
        ov["seed"] = str(args.seed)
    if args.ablation:
        ov["ablations"] = ",".join(args.ablation)
    return apply_overrides(config, ov)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cityfields", description="Hash-encoded dynamic radiance fields at desk scale.")
    sub = p.add_subparsers(dest="verb", metavar="verb")

    g = sub.add_parser("generate", help="write a synthetic toy dataset")
    g.add_argument("--scene", required=True, choices=sorted(SCENE_PRESETS))
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)

    pa = sub.add_parser("partition", help="split a dataset into spatial cells")
    pa.add_argument("--data", required=True)
    pa.add_argument("--cells", type=int, required=True)
    pa.add_argument("--out", required=True)
    pa.add_argument("--seed", type=int, default=0)
    pa.add_argument("--margin", type=float, default=0.05)

    def run_options(q):
        q.add_argument("--data", required=True)
        q.add_argument("--out", required=True)
        q.add_argument("--config")
        q.add_argument("--preset", choices=sorted(TRAIN_PRESETS))
        q.add_argument("--seed", type=int)
        q.add_argument("--ablation", action="append", choices=ABLATIONS)
        q.add_argument("overrides", nargs="*", help="key=value run-config overrides")

    t = sub.add_parser("train", help="train a model (or one partition cell)")
    run_options(t)
    t.add_argument("--partition", help="partition directory; trains every cell unless --cell is given")
    t.add_argument("--cell", type=int)
    t.add_argument("--quiet", action="store_true")

    r = sub.add_parser("render", help="render an arbitrary pose, time and video")
    r.add_argument("--checkpoint", help="trained checkpoint (or use --partition and --runs)")
    r.add_argument("--partition")
    r.add_argument("--runs", help="directory holding cell_XXX/checkpoint.bin")
    r.add_argument("--out", required=True)
    r.add_argument("--pose", required=True, help="eye and target as ex,ey,ez,tx,ty,tz")
    r.add_argument("--time", type=float, default=0.0, help="normalized time in [0, 1]; fractional frames allowed")
    r.add_argument("--video", type=int, default=1)
    r.add_argument("--size", default="64,64", help="width,height")
    r.add_argument("--focal", type=float, default=70.0)
    r.add_argument("--branch", choices=("full", "static", "dynamic"), default="full")
    r.add_argument("--samples", type=int, help="stratified samples per ray (default: the trained sampler)")

    e = sub.add_parser("eval", help="PSNR and SSIM on dataset frames")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="metrics CSV path")
    e.add_argument("--split", choices=("heldout", "train", "all"), default="heldout")
    e.add_argument("--samples", type=int)
    e.add_argument("--previews", help="directory for rendered PNGs")

    i = sub.add_parser("instances", help="instances and oriented cuboids from the dynamic field")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--out", required=True, help="JSON report path")
    i.add_argument("--time", type=float, default=0.0)
    i.add_argument("--video", type=int, default=1)
    i.add_argument("--resolution", type=int, default=48)
    i.add_argument("--threshold", type=float)

    a = sub.add_parser("ablate", help="train the full method and each ablation, then compare held-out PSNR")
    run_options(a)
    return p


# ---------------------------------------------------------------- verbs

def cmd_generate(args):
    path = generate_preset(args.scene, args.out, args.seed)
    print(f"wrote {path}")


def cmd_partition(args):
    frames, bounds, _ = load_dataset(args.data)
    if args.cells <= 0:
        raise UsageError("--cells must be positive")
    centroids, a = partition_dataset(frames, bounds, args.cells, args.out, args.seed, args.margin)
    removed = 1 - a.pairs("pruned") / max(a.pairs("frustum"), 1)
    print(f"{args.cells} cells; {a.pairs('frustum')} frustum ray-cell pairs, {a.pairs('pruned')} after pruning "
          f"({100 * removed:.1f}% removed)")


def _progress(every=100):
    def report(it, values):
        if (it + 1) % every == 0:
            print(f"iter {it + 1}: L_c={values['L_c']:.5f} total={values['total']:.5f}", flush=True)
    return report


def _train_cell(data, out, config: TrainConfig, partition, cell, quiet):
    frames, bounds, meta = load_dataset(data)
    config = resolve_config(config, frames, meta)
    manifest, _, shards = read_partition(partition)
    if not 0 <= cell < len(shards):
        raise UsageError(f"--cell must be in [0, {len(shards)})")
    shard = shards[cell]
    train, _ = split_frames(frames, config.holdout_every)
    keep = {id(f) for f in train}
    pixels = [np.sort(shard[shard[:, 0] == k, 1].astype(np.int64)) for k in range(len(frames))]
    use = [k for k, f in enumerate(frames) if id(f) in keep and len(pixels[k])]
    if not use:
        raise DatasetError(f"cell {cell} has no training rays")
    run_training([frames[k] for k in use], bounds, config, out, camera_frames=frames,
                 lengths=video_lengths(frames), progress=None if quiet else _progress(),
                 pixels=[pixels[k] for k in use])
    return cell


def cmd_train(args):
    config = _run_config(args)
    if args.cell is not None and not args.partition:
        raise UsageError("--cell needs --partition")
    if args.partition:
        manifest, _, _ = read_partition(args.partition)
        cells = [args.cell] if args.cell is not None else list(range(len(manifest["cells"])))
        workers = int(os.environ.get(WORKERS_ENV, "1"))
        jobs = [(args.data, Path(args.out) / f"cell_{c:03d}", config, args.partition, c, args.quiet or workers > 1)
                for c in cells]
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(workers) as pool:
                for c in pool.map(_train_cell, *zip(*jobs)):
                    print(f"cell {c} done")
        else:
            for job in jobs:
                _train_cell(*job)
                print(f"cell {job[4]} done")
        return
    frames, bounds, meta = load_dataset(args.data)
    config = resolve_config(config, frames, meta)
    train, held = split_frames(frames, config.holdout_every)
    run_training(train, bounds, config, args.out, camera_frames=frames, lengths=video_lengths(frames),
                 progress=None if args.quiet else _progress())
    print(f"trained {config.iterations} iterations on {len(train)} frames ({len(held)} held out); "
          f"checkpoint in {Path(args.out) / 'checkpoint.bin'}")


def cmd_render(args):
    pose = _floats(args.pose, 6, "--pose")
    w, h = (int(v) for v in _floats(args.size, 2, "--size"))
    if not 0.0 <= args.time <= 1.0:
        raise UsageError("--time is normalized and must lie in [0, 1]")
    camera = look_at(pose[:3], pose[3:], w, h, args.focal)
    if args.partition:
        if not args.runs:
            raise UsageError("--partition needs --runs")
        manifest, centroids, _ = read_partition(args.partition)
        models = [load_checkpoint(Path(args.runs) / f"cell_{c['id']:03d}" / "checkpoint.bin")[0]
                  for c in manifest["cells"]]
        from .data import SceneBounds
        lo = np.min([m.bounds.box_min for m in models], 0)
        hi = np.max([m.bounds.box_max for m in models], 0)
        image = render_routed(models, centroids, SceneBounds(lo, hi), camera, args.video, args.time,
                              args.samples or 128)
    else:
        if not args.checkpoint:
            raise UsageError("render needs --checkpoint or --partition")
        model = load_checkpoint(args.checkpoint)[0]
        if not 1 <= args.video <= model.field_config.n_videos:
            raise UsageError(f"--video must be in [1, {model.field_config.n_videos}]")
        image = render_image(model, camera, args.video, args.time, n_samples=args.samples,
                             branch=args.branch)["color"]
    save_preview_png(args.out, image)
    print(f"wrote {args.out}")


def evaluate_checkpoint(checkpoint, data, split: str = "heldout", n_samples: int | None = None, previews=None):
    """Per-frame PSNR/SSIM rows for the chosen split of a dataset."""
    model, config, _, _ = load_checkpoint(checkpoint)
    frames, _, _ = load_dataset(data)
    train, held = split_frames(frames, config.holdout_every)
    chosen = {"heldout": held, "train": train, "all": frames}[split]
    if not chosen:
        raise DatasetError(f"split {split!r} is empty (holdout_every = {config.holdout_every})")
    lengths = video_lengths(frames)
    rows = []
    for f in chosen:
        out = render_image(model, f.camera, f.video_id, normalized_time(f.time_index, lengths[f.video_id]),
                           n_samples=n_samples)
        p, s = image_metrics(np.clip(out["color"], 0, 1), f.image)
        rows.append({"video": f.video_id, "frame": f.time_index, "psnr": p, "ssim": s})
        if previews:
            Path(previews).mkdir(parents=True, exist_ok=True)
            save_preview_png(Path(previews) / f"v{f.video_id:03d}_t{f.time_index:04d}.png", out["color"])
    return rows


def cmd_eval(args):
    rows = evaluate_checkpoint(args.checkpoint, args.data, args.split, args.samples, args.previews)
    mean = {"video": "mean", "frame": "", "psnr": float(np.mean([r["psnr"] for r in rows])),
            "ssim": float(np.mean([r["ssim"] for r in rows]))}
    write_metrics_csv(args.out, rows + [mean])
    print(f"{len(rows)} frames: PSNR {mean['psnr']:.2f} dB, SSIM {mean['ssim']:.4f}")


def cmd_instances(args):
    model = load_checkpoint(args.checkpoint)[0]
    inst = extract_instances(model_dynamic_density(model, args.time, args.video), model.bounds, args.resolution,
                             args.threshold)
    boxes = []
    pitch = float((model.bounds.extent / args.resolution).max())
    for i in inst:
        if len(i.points) < 4:
            raise AnalysisError(f"instance {i.component} has fewer than 4 points")
        boxes.append(fit_cuboid(i.points, floor=pitch))
    write_json(args.out, instances_report(inst, boxes))
    print(f"{len(inst)} instances -> {args.out}")


def cmd_ablate(args):
    base = _run_config(args)
    variants = args.ablation or list(ABLATIONS)
    if base.holdout_every <= 0:
        base = dataclasses.replace(base, holdout_every=6)
    out = Path(args.out)
    rows = []
    for name in ["full", *variants]:
        config = dataclasses.replace(base, ablations=() if name == "full" else (name,))
        frames, bounds, meta = load_dataset(args.data)
        config = resolve_config(config, frames, meta)
        train, _ = split_frames(frames, config.holdout_every)
        run_training(train, bounds, config, out / name, camera_frames=frames, lengths=video_lengths(frames))
        m = evaluate_checkpoint(out / name / "checkpoint.bin", args.data)
        rows.append({"variant": name, "psnr": float(np.mean([r["psnr"] for r in m])),
                     "ssim": float(np.mean([r["ssim"] for r in m]))})
        print(f"{name}: PSNR {rows[-1]['psnr']:.2f} dB", flush=True)
    for r in rows:
        r["delta_psnr"] = r["psnr"] - rows[0]["psnr"]
    write_metrics_csv(out / "ablation.csv", rows)
    print(f"{'variant':24s} {'PSNR':>8s} {'SSIM':>7s} {'dPSNR':>7s}")
    for r in rows:
        print(f"{r['variant']:24s} {r['psnr']:8.2f} {r['ssim']:7.4f} {r['delta_psnr']:7.2f}")


COMMANDS = {"generate": cmd_generate, "partition": cmd_partition, "train": cmd_train, "render": cmd_render,
            "eval": cmd_eval, "instances": cmd_instances, "ablate": cmd_ablate}


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.verb is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        COMMANDS[args.verb](args)
    except (UsageError, ConfigError, KeyError) as e:
        parser.print_usage(sys.stderr)
        print(f"cityfields: error: {e}", file=sys.stderr)
        return 2
    except (DatasetError, GenerationError, AnalysisError, TrainingDiverged, OSError, ValueError) as e:
        print(f"cityfields: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
