"""Line-oriented ``key = value`` configuration with a single documented schema.

Every numeric default used anywhere in the pipeline lives in ``SCHEMA`` so the
provenance of each value (margins, tuple sizes, grid and image dimensions) can
be audited in one place. Presets only override schema entries.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable

from . import ConfigError


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_fraction(text: str) -> float:
    return float(Fraction(text.strip()))


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        value = text.strip()
        if value not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {value!r}")
        return value

    parse.options = options  # type: ignore[attr-defined]
    return parse


@dataclass(frozen=True)
class Entry:
    parse: Callable[[str], Any]
    default: Any
    doc: str


SCHEMA: dict[str, Entry] = {
    # elevation grid
    "grid_cells": Entry(int, 48, "cells per side of the robot-centric elevation grid"),
    "grid_resolution": Entry(float, 0.5, "meters per grid cell"),
    "sensor_sigma0": Entry(float, 0.01, "range-independent measurement std-dev (m)"),
    "sensor_range_coeff": Entry(float, 1e-4, "variance growth per squared meter of range"),
    "var_floor": Entry(float, 1e-6, "lower bound on any elevation variance (m^2)"),
    "gate_sigma": Entry(float, 3.0, "Mahalanobis gate for fusing a measurement into a cell"),
    "outlier_limit": Entry(int, 3, "consecutive gate rejections before a cell is reinitialized"),
    "clearance_margin": Entry(float, 0.2, "ray clearance before an obstructing cell is reset (m)"),
    "height_window": Entry(float, 5.0, "half-height of the rendering window around the sensor (m)"),
    "fill_min_neighbors": Entry(int, 3, "valid 3x3 neighbours needed to mean-fill a hole"),
    # sensor rig and synthetic world
    "image_size": Entry(int, 56, "square camera image / visual network input size (px)"),
    "camera_hfov_deg": Entry(float, 90.0, "camera horizontal field of view"),
    "camera_pitch_deg": Entry(float, 15.0, "downward camera pitch"),
    "camera_forward_offset": Entry(float, 0.3, "camera position ahead of the LiDAR (m)"),
    "camera_up_offset": Entry(float, -0.1, "camera position above the LiDAR (m)"),
    "lidar_height": Entry(float, 1.8, "LiDAR height above the terrain (m)"),
    "lidar_rings": Entry(int, 32, "number of elevation angles"),
    "lidar_min_elev_deg": Entry(float, -30.0, "lowest beam elevation"),
    "lidar_max_elev_deg": Entry(float, 3.0, "highest beam elevation"),
    "lidar_azimuths": Entry(int, 360, "beams per ring"),
    "lidar_max_range": Entry(float, 40.0, "maximum LiDAR range (m)"),
    "n_places": Entry(int, 20, "places along the synthetic trajectory"),
    "revisits": Entry(int, 2, "passes over every place (runs)"),
    "place_spacing": Entry(float, 70.0, "distance between consecutive places (m)"),
    "pose_jitter": Entry(float, 2.5, "max per-pass position offset from the nominal place pose (m)"),
    "heading_jitter_deg": Entry(float, 10.0, "max per-pass heading offset from the nominal heading"),
    "gain_min": Entry(float, 0.2, "lowest per-pass illumination gain"),
    "gain_max": Entry(float, 1.5, "highest per-pass illumination gain"),
    "dropout": Entry(float, 0.1, "max per-pass fraction of LiDAR points dropped"),
    "seed": Entry(int, 0, "master random seed"),
    # architecture
    "width_multiplier": Entry(_parse_fraction, 0.125, "channel scale: 1, 1/2, 1/4 or 1/8"),
    "fusion_mode": Entry(_choice("sum", "concat"), "concat", "how BEV visual and structural maps merge"),
    "fusion_depth": Entry(_choice("first", "four"), "four", "fuse at the first or at all four residual groups"),
    "modality": Entry(_choice("fusion", "vision_only", "structure_only"), "fusion", "network inputs"),
    "vlad_clusters": Entry(int, 8, "NetVLAD cluster count"),
    "descriptor_dim": Entry(int, 256, "global descriptor size"),
    "mlp_layers": Entry(int, 1, "affine layers reducing the VLAD vector"),
    "fpn_width": Entry(int, 64, "FPN lateral width at full scale (scaled by width_multiplier)"),
    # training
    "alpha": Entry(float, 0.5, "first hinge margin"),
    "beta": Entry(float, 0.2, "second hinge margin"),
    "num_positives": Entry(int, 1, "positives per training tuple"),
    "num_negatives": Entry(int, 18, "negatives per training tuple"),
    "positive_radius": Entry(float, 10.0, "max distance of a positive (m)"),
    "negative_radius": Entry(float, 50.0, "min distance of a negative (m)"),
    "anchor_run": Entry(int, 0, "run whose samples serve as anchors (-1: every run)"),
    "heading_bound_deg": Entry(float, 30.0, "max heading difference of a positive"),
    "second_term": Entry(_choice("negstar_negatives", "anchor_negstar"), "negstar_negatives",
                         "distances used by the second hinge"),
    "learning_rate": Entry(float, 5e-4, "initial Adam step size"),
    "lr_halve_epochs": Entry(int, 5, "epochs between learning-rate halvings"),
    "stage1_epochs": Entry(int, 2, "epochs with random negatives before hard mining"),
    "steps": Entry(int, 200, "optimizer steps (one tuple per step)"),
    # evaluation
    "eval_radius": Entry(float, 25.0, "retrieval success radius (m)"),
    "recall_percent": Entry(float, 1.0, "database fraction for recall@percent"),
    "use_kdtree": Entry(_parse_bool, False, "KD-tree accelerated search (results identical)"),
}

PRESETS: dict[str, dict[str, Any]] = {
    "desk": {},
    "paper": {
        "grid_cells": 80,
        "grid_resolution": 0.5,
        "image_size": 112,
        "width_multiplier": 1.0,
        "vlad_clusters": 64,
        "descriptor_dim": 256,
        "alpha": 0.5,
        "beta": 0.2,
        "num_positives": 2,
        "num_negatives": 18,
        "revisits": 3,
        "learning_rate": 1e-4,
        "anchor_run": -1,
    },
}


class Config(dict):
    """A fully populated settings mapping; attribute access for convenience."""

    def __getattr__(self, key: str) -> Any:
        try:
            return self[key]
        except KeyError:
            raise AttributeError(key) from None

    def with_overrides(self, **overrides: Any) -> "Config":
        unknown = sorted(set(overrides) - set(SCHEMA))
        if unknown:
            raise ConfigError(f"unknown config key: {unknown[0]}")
        merged = Config(self)
        merged.update(overrides)
        return merged

    def dumps(self) -> str:
        lines = []
        for key in SCHEMA:
            value = self[key]
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def defaults(preset: str = "desk") -> Config:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset: {preset}")
    cfg = Config({key: entry.default for key, entry in SCHEMA.items()})
    cfg.update(PRESETS[preset])
    return cfg


def parse_text(text: str, source: str = "<string>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key: {key}")
        try:
            values[key] = SCHEMA[key].parse(value)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return values


def load(path: str | Path | None = None, preset: str = "desk", base: Config | None = None) -> Config:
    cfg = Config(base) if base is not None else defaults(preset)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg.update(parse_text(path.read_text(), str(path)))
    return cfg
