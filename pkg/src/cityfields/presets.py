"""Bundled toy scenes and the training settings used with them."""

from __future__ import annotations

from pathlib import Path

from .synthetic import generate_synthetic, moving_sphere_scene, orbit_cameras, static_toy_scene, two_district_city
from .trainer import TrainConfig, parse_config_text

# Desk-scale settings sized to train the 64x64 toys on one CPU core.
TOY_CONFIG = """\
rays_per_batch = 96
lr_init = 1e-2
lr_final = 1e-3
fields.n_levels = 5
fields.log2_table_size = 15
fields.hidden = 64
fields.color_hidden = 32
sampler.n_uniform = 24
sampler.n_resampled = 12
sampler.proposal_log2_table_size = 13
sampler.proposal_levels = 4
"""

# Start the dynamic branch thinner than the static one and the shadow nearly off,
# and weight the max-ratio and shadow penalties up, so static content settles in
# the static branch before the dynamic branch claims the mover.
SPHERE_FACTORIZATION = """\
fields.dynamic_density_bias = -1.0
fields.shadow_bias = -4.0
weights.max_dynamic = 0.05
weights.shadow = 1.0
"""

TRAIN_PRESETS = {
    "static": TOY_CONFIG + "iterations = 5000\nholdout_every = 7\n",
    "sphere": TOY_CONFIG + SPHERE_FACTORIZATION + "iterations = 20000\n",
    "city": TOY_CONFIG + "iterations = 5000\n",
}


def _static(out, seed):
    return generate_synthetic(static_toy_scene(), 1, 35, [orbit_cameras(35)], out, feature_dim=8, seed=seed)


def _sphere(out, seed):
    cams = [orbit_cameras(24, start=0.3, sweep=0.6), orbit_cameras(24, start=2.5, sweep=0.6)]
    return generate_synthetic(moving_sphere_scene(24), 2, 24, cams, out, feature_dim=8, seed=seed)


def _city(out, seed):
    scene, cams = two_district_city()
    # dense lidar so depth pruning sees every surface
    return generate_synthetic(scene, 1, len(cams), [cams], out, feature_dim=4, lidar_fraction=1.0, seed=seed)


SCENE_PRESETS = {"static": _static, "sphere": _sphere, "city": _city}


def generate_preset(name: str, out, seed: int = 0) -> Path:
    """Write the named toy dataset to ``out``."""
    if name not in SCENE_PRESETS:
        raise KeyError(f"unknown scene {name!r}; choose from {sorted(SCENE_PRESETS)}")
    return SCENE_PRESETS[name](out, seed)


def preset_config(name: str) -> TrainConfig:
    if name not in TRAIN_PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(TRAIN_PRESETS)}")
    return parse_config_text(TRAIN_PRESETS[name])
