"""Run configuration: a flat key = value text file mirroring SceneConfig.

Format: one `key = value` per line, `#` starts a comment. Values are
coerced from the declared field types; RGB triples are comma-separated.
Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field


@dataclass
class SceneConfig:
    # inputs
    cameras: str = "cameras.json"
    images_dir: str = "images"
    normals_dir: str = ""        # optional per-view normal prior maps (PFM)
    labels_dir: str = ""         # optional per-view region label maps (16-bit PNG)
    init_points: str = "init_points.npz"
    env_faces_dir: str = ""      # optional fixed ground-truth env (reference only)

    # loss weights
    lambda_nd: float = 0.05
    lambda_n: float = 0.05
    lambda_mv: float = 0.1
    lambda_ref: float = 0.01

    # schedule (defaults are the full-scale milestones x 0.1)
    schedule_scale: float = 0.1
    total_iters: int = 3000
    warmup_end: int = 300
    pbr_start: int = 300
    mv_start: int = 1000
    prior_rebuild_interval: int = 1000

    # shading / environment
    env_size: int = 64
    dfg_resolution: int = 64
    background: tuple = (0.0, 0.0, 0.0)
    raytrace: bool = True

    # multiview machinery
    mv_patch: int = 7
    score_patch: int = 3
    n_near_views: int = 4
    ball_radius_frac: float = 0.01   # of the scene bounding-box diagonal
    ball_top_k: int = 8
    tau_ref: float = 0.1
    delta_m0: float = 0.2
    floor_m0: float = 0.5
    mv_stride: int = 4
    mv_source_views: int = 2

    # optimizer (per-group learning rates)
    lr_position: float = 1.6e-4
    lr_position_final_factor: float = 0.01   # exponential decay target
    lr_quat: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 0.05
    lr_material: float = 2.5e-3
    lr_env: float = 1e-2

    # runtime
    seed: int = 0
    threads: int = 1
    dtype: str = "float64"
    holdout_every: int = 8
    eval_interval: int = 500
    prune_interval: int = 500
    prune_opacity: float = 0.005
    divergence_patience: int = 200

    def __post_init__(self):
        if not (0 <= self.warmup_end <= self.pbr_start <= self.mv_start <= self.total_iters):
            raise ValueError("schedule milestones must satisfy "
                             "warmup_end <= pbr_start <= mv_start <= total_iters")
        for name in ("lambda_nd", "lambda_n", "lambda_mv", "lambda_ref"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def scaled(self, scale: float) -> "SceneConfig":
        """Milestones derived from the full-scale 3k/3k/10k/30k schedule."""
        return dataclasses.replace(
            self, schedule_scale=scale,
            warmup_end=round(3000 * scale), pbr_start=round(3000 * scale),
            mv_start=round(10000 * scale), total_iters=round(30000 * scale),
            prior_rebuild_interval=max(1, round(10000 * scale)),
        )


_FIELDS = {f.name: f for f in dataclasses.fields(SceneConfig)}
_EXPLICIT_MILESTONES = ("total_iters", "warmup_end", "pbr_start", "mv_start",
                        "prior_rebuild_interval")


def _coerce(name, raw):
    f = _FIELDS[name]
    raw = raw.strip()
    if f.type in ("float",):
        return float(raw)
    if f.type in ("int",):
        return int(raw)
    if f.type in ("bool",):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"bad boolean for {name}: {raw!r}")
    if f.type in ("tuple",):
        return tuple(float(x) for x in raw.split(","))
    return raw


def load_config(path) -> SceneConfig:
    if not os.path.exists(path):
        raise FileNotFoundError(f"config not found: {path}")
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in _FIELDS:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _coerce(key, raw)

    if "schedule_scale" in values and not any(k in values for k in _EXPLICIT_MILESTONES):
        cfg = SceneConfig(**{k: v for k, v in values.items() if k != "schedule_scale"})
        cfg = cfg.scaled(values["schedule_scale"])
    else:
        cfg = SceneConfig(**values)

    base = os.path.dirname(os.path.abspath(path))
    for key in ("cameras", "images_dir", "normals_dir", "labels_dir",
                "init_points", "env_faces_dir"):
        val = getattr(cfg, key)
        if val and not os.path.isabs(val):
            setattr(cfg, key, os.path.join(base, val))
    return cfg


def save_config(cfg: SceneConfig, path):
    lines = []
    for f in dataclasses.fields(SceneConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
