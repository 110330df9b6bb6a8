"""Glue from files on disk to network-ready samples: map, render, project."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import DataError
from .elevation import ElevationImage, ElevationMap, default_window, read_cloud, render_elevation_image
from .geometry import GridSpec, Pose, read_poses
from .projection import ProjectionTable, build_projection_table
from .synthetic import Rig, read_manifest, read_png
from .training import SampleMeta


@dataclass
class PreparedSample:
    meta: SampleMeta
    pose: Pose
    image: np.ndarray  # (H, W, 3) uint8
    elevation: ElevationImage
    table: ProjectionTable
    emap: ElevationMap

    @property
    def id(self) -> int:
        return self.meta.id


def build_map(cloud: np.ndarray, pose: Pose, cfg) -> ElevationMap:
    """Robot-centric, world-aligned grid around the sensor, filled from one scan."""
    spec = GridSpec.centered(pose.translation[0], pose.translation[1], cfg["grid_cells"], cfg["grid_resolution"])
    emap = ElevationMap.from_config(spec, cfg)
    emap.integrate(pose, cloud)
    return emap


def render(emap: ElevationMap, pose: Pose, cfg) -> ElevationImage:
    window = default_window(pose.translation[2], cfg["height_window"])
    return render_elevation_image(emap, window, cfg["fill_min_neighbors"])


def prepare_sample(meta: SampleMeta, pose: Pose, cloud: np.ndarray, image: np.ndarray, cfg,
                   rig: Rig | None = None) -> PreparedSample:
    rig = rig or Rig.from_config(cfg)
    if image.shape != (rig.camera.height, rig.camera.width, 3):
        raise DataError(f"sample {meta.id}: image shape {image.shape} does not match the "
                        f"{rig.camera.width}x{rig.camera.height} camera")
    emap = build_map(cloud, pose, cfg)
    elev = render(emap, pose, cfg)
    table = build_projection_table(elev, pose, rig.camera)
    return PreparedSample(meta, pose, image, elev, table, emap)


def load_dataset(data_dir: str | Path, cfg, ids=None) -> list[PreparedSample]:
    """Read a generated dataset and prepare every sample (or those in ``ids``)."""
    root = Path(data_dir)
    metas = read_manifest(root / "manifest.csv")
    poses = {int(ts): pose for ts, pose in read_poses_checked(root / "poses.txt")}
    rig = Rig.from_config(cfg)
    wanted = None if ids is None else set(int(i) for i in ids)
    out = []
    for m in metas:
        if wanted is not None and m.id not in wanted:
            continue
        if m.id not in poses:
            raise DataError(f"no pose for sample {m.id} in {root / 'poses.txt'}")
        cloud = read_cloud(root / m.cloud_path)
        image = read_png(root / m.image_path)
        out.append(prepare_sample(m, poses[m.id], cloud, image, cfg, rig))
    return out


def read_poses_checked(path: Path):
    if not path.is_file():
        raise DataError(f"missing pose file {path}")
    return read_poses(path)
