"""Procedural heightfield worlds with a simulated LiDAR and camera.

Terrain is analytic (plane + Gaussian bumps + box obstacles), so every
geometric claim in the pipeline can be checked against exact values.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import DataError
from .elevation import SensorModel, write_cloud
from .geometry import CameraModel, Pose, write_poses
from .training import SampleMeta

SKY = np.array([150.0, 190.0, 235.0])


@dataclass(frozen=True)
class Heightfield:
    base: float = 0.0
    bumps: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))  # cx, cy, height, width
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 8)))  # x0, x1, y0, y1, height, r, g, b
    blobs: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))  # cx, cy, radius, r, g, b
    discs: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))  # painted landmarks, hard-edged
    ground: tuple = (110.0, 120.0, 100.0)

    def __post_init__(self):
        for name, cols in (("bumps", 4), ("boxes", 8), ("blobs", 6), ("discs", 6)):
            arr = np.asarray(getattr(self, name), float).reshape(-1, cols)
            object.__setattr__(self, name, arr)

    def height(self, x, y) -> np.ndarray:
        x, y = np.asarray(x, float), np.asarray(y, float)
        h = np.full(np.broadcast(x, y).shape, self.base)
        for cx, cy, amp, w in self.bumps:
            h += amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * w * w))
        for x0, x1, y0, y1, bh, *_ in self.boxes:
            inside = (x >= x0) & (x < x1) & (y >= y0) & (y < y1)
            h = np.where(inside, np.maximum(h, self.base + bh), h)
        return h

    def color(self, x, y) -> np.ndarray:
        """RGB in [0, 255], shape (..., 3)."""
        x, y = np.asarray(x, float), np.asarray(y, float)
        texture = 0.85 + 0.15 * np.sin(1.7 * x) * np.sin(1.3 * y)
        rgb = np.asarray(self.ground) * texture[..., None]
        for cx, cy, r, *c in self.blobs:
            w = np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * r * r))[..., None]
            rgb = rgb * (1 - w) + np.asarray(c) * w
        for x0, x1, y0, y1, _, *c in self.boxes:
            inside = ((x >= x0 - 1e-3) & (x < x1 + 1e-3) & (y >= y0 - 1e-3) & (y < y1 + 1e-3))[..., None]
            rgb = np.where(inside, np.asarray(c), rgb)
        for cx, cy, r, *c in self.discs:
            inside = (((x - cx) ** 2 + (y - cy) ** 2) <= r * r)[..., None]
            rgb = np.where(inside, np.asarray(c), rgb)
        return rgb

    def lipschitz_bound(self) -> float:
        """Upper bound on |grad h|; infinite when boxes make h discontinuous."""
        if len(self.boxes):
            return float("inf")
        return float(np.sum(np.abs(self.bumps[:, 2]) / self.bumps[:, 3]) * np.exp(-0.5))

    def local(self, x: float, y: float, radius: float) -> "Heightfield":
        """Features that can influence height or colour within ``radius`` of (x, y)."""
        def near(arr, cx, cy, reach):
            return arr[np.hypot(arr[:, cx] - x, arr[:, cy] - y) <= radius + reach] if len(arr) else arr

        boxes = self.boxes
        if len(boxes):
            bx = np.clip(x, boxes[:, 0], boxes[:, 1])
            by = np.clip(y, boxes[:, 2], boxes[:, 3])
            boxes = boxes[np.hypot(bx - x, by - y) <= radius]
        return replace(self, bumps=near(self.bumps, 0, 1, 4 * self.bumps[:, 3] if len(self.bumps) else 0),
                       boxes=boxes, blobs=near(self.blobs, 0, 1, 4 * self.blobs[:, 2] if len(self.blobs) else 0),
                       discs=near(self.discs, 0, 1, self.discs[:, 2] if len(self.discs) else 0))


@dataclass(frozen=True)
class LidarPattern:
    elevations_deg: np.ndarray
    azimuths: int = 360
    max_range: float = 40.0

    @classmethod
    def uniform(cls, rings: int, lo: float, hi: float, azimuths: int, max_range: float) -> "LidarPattern":
        return cls(np.linspace(lo, hi, rings), azimuths, max_range)

    def directions(self) -> np.ndarray:
        el = np.radians(np.asarray(self.elevations_deg, float))
        az = np.arange(self.azimuths) * (2 * np.pi / self.azimuths)
        E, A = np.meshgrid(el, az, indexing="ij")
        return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)


def cast_rays(world: Heightfield, origin: np.ndarray, dirs: np.ndarray, max_range: float,
              step: float = 0.1, tol: float = 1e-4, chunk: int = 64) -> np.ndarray:
    """Distance along each unit direction to the first terrain crossing (inf on a miss).

    Marches at ``step`` then bisects the bracketing interval down to ``tol``.
    """
    origin = np.asarray(origin, float)
    n = len(dirs)
    hit_t = np.full(n, np.inf)
    lo = np.zeros(n)
    pending = np.arange(n)
    ts = np.arange(step, max_range + step, step)
    for start in range(0, len(ts), chunk):
        if len(pending) == 0:
            break
        t = ts[start:start + chunk]
        pts = origin + dirs[pending, None, :] * t[None, :, None]
        below = pts[..., 2] <= world.height(pts[..., 0], pts[..., 1])
        first = np.where(below.any(axis=1), below.argmax(axis=1), -1)
        hit = first >= 0
        rows = pending[hit]
        t_hi = t[first[hit]]
        t_lo = np.where(first[hit] > 0, t[np.maximum(first[hit] - 1, 0)], lo[rows])
        t_lo = np.where(first[hit] == 0, (t[0] - step) if start else 0.0, t_lo)
        for _ in range(int(np.ceil(np.log2(step / tol))) + 1):
            mid = 0.5 * (t_lo + t_hi)
            p = origin + dirs[rows] * mid[:, None]
            under = p[:, 2] <= world.height(p[:, 0], p[:, 1])
            t_hi = np.where(under, mid, t_hi)
            t_lo = np.where(under, t_lo, mid)
        hit_t[rows] = 0.5 * (t_lo + t_hi)
        pending = pending[~hit]
    return hit_t


def simulate_lidar(world: Heightfield, pose: Pose, pattern: LidarPattern,
                   sensor: SensorModel | None = None, rng: np.random.Generator | None = None,
                   dropout: float = 0.0) -> np.ndarray:
    """Hit points in the sensor frame. With ``sensor`` and ``rng``, ranges get
    Gaussian noise of the sensor model's standard deviation."""
    dirs_s = pattern.directions()
    dirs_w = dirs_s @ pose.rotation.T
    local = world.local(pose.translation[0], pose.translation[1], pattern.max_range)
    t = cast_rays(local, pose.translation, dirs_w, pattern.max_range)
    hit = np.isfinite(t)
    t, dirs_s = t[hit], dirs_s[hit]
    if sensor is not None and rng is not None:
        t = t + rng.normal(size=len(t)) * np.sqrt(sensor.variance(t))
    points = dirs_s * t[:, None]
    if dropout > 0 and rng is not None:
        points = points[rng.random(len(points)) >= dropout]
    return points


def camera_pose(sensor_pose: Pose, cam: CameraModel) -> Pose:
    """Camera-to-world transform."""
    return sensor_pose @ cam.extrinsic.inverse()


def render_camera(world: Heightfield, sensor_pose: Pose, cam: CameraModel, gain: float = 1.0,
                  max_range: float = 80.0) -> np.ndarray:
    """RGB uint8 image (H, W, 3); pixel colour is the terrain colour at the ray hit."""
    cam_to_world = camera_pose(sensor_pose, cam)
    v, u = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
    d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u, float)], axis=-1).reshape(-1, 3)
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    d_world = d_cam @ cam_to_world.rotation.T
    o = cam_to_world.translation
    local = world.local(o[0], o[1], max_range)
    t = np.full(len(d_world), np.inf)
    down = d_world[:, 2] < 0.2  # rays climbing faster than this never reach terrain below the camera's reach
    t[down] = cast_rays(local, o, d_world[down], max_range, step=0.15, tol=1e-3)
    rgb = np.tile(SKY, (len(t), 1))
    hit = np.isfinite(t)
    p = o + d_world[hit] * t[hit, None]
    rgb[hit] = local.color(p[:, 0], p[:, 1])
    rgb = np.clip(np.floor(rgb * gain + 0.5), 0, 255)
    return rgb.reshape(cam.height, cam.width, 3).astype(np.uint8)


# ----------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class Condition:
    gain: float = 1.0
    dropout: float = 0.0


@dataclass(frozen=True)
class Rig:
    camera: CameraModel
    lidar: LidarPattern
    sensor: SensorModel
    lidar_height: float

    @classmethod
    def from_config(cls, cfg) -> "Rig":
        pitch = np.radians(cfg["camera_pitch_deg"])
        # camera axes (x right, y down, z forward) expressed in the LiDAR frame (x fwd, y left, z up)
        axes = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
        c, s = np.cos(pitch), np.sin(pitch)
        tilt = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
        cam_in_lidar = Pose(tilt @ axes, (cfg["camera_forward_offset"], 0.0, cfg["camera_up_offset"]),
                            "camera", "lidar")
        camera = CameraModel.from_fov(cfg["image_size"], cfg["camera_hfov_deg"], cam_in_lidar.inverse())
        lidar = LidarPattern.uniform(cfg["lidar_rings"], cfg["lidar_min_elev_deg"], cfg["lidar_max_elev_deg"],
                                     cfg["lidar_azimuths"], cfg["lidar_max_range"])
        sensor = SensorModel(cfg["sensor_sigma0"], cfg["sensor_range_coeff"], cfg["var_floor"])
        return cls(camera, lidar, sensor, cfg["lidar_height"])


def random_place_features(rng: np.random.Generator, cx: float, cy: float, radius: float = 25.0):
    """Bumps, box obstacles and colour blobs scattered around one place."""
    def around(n, r):
        ang = rng.uniform(0, 2 * np.pi, n)
        rad = r * np.sqrt(rng.uniform(0, 1, n))
        return cx + rad * np.cos(ang), cy + rad * np.sin(ang)

    n_bumps = rng.integers(6, 12)
    bx, by = around(n_bumps, radius)
    bumps = np.column_stack([bx, by, rng.uniform(-0.6, 1.2, n_bumps), rng.uniform(2.0, 5.0, n_bumps)])
    n_boxes = rng.integers(3, 8)
    ox, oy = around(n_boxes, radius - 3)
    sx, sy = rng.uniform(1.0, 5.0, n_boxes), rng.uniform(1.0, 5.0, n_boxes)
    boxes = np.column_stack([ox - sx / 2, ox + sx / 2, oy - sy / 2, oy + sy / 2, rng.uniform(0.8, 4.0, n_boxes),
                             rng.uniform(30, 230, (n_boxes, 3))])
    n_blobs = rng.integers(10, 20)
    lx, ly = around(n_blobs, radius)
    blobs = np.column_stack([lx, ly, rng.uniform(0.6, 2.5, n_blobs), rng.uniform(20, 240, (n_blobs, 3))])
    return bumps, boxes, blobs


def make_world(rng: np.random.Generator, centers: np.ndarray) -> Heightfield:
    parts = [random_place_features(rng, x, y) for x, y in centers]
    return Heightfield(
        bumps=np.concatenate([p[0] for p in parts]),
        boxes=np.concatenate([p[1] for p in parts]),
        blobs=np.concatenate([p[2] for p in parts]),
    )


def default_conditions(rng: np.random.Generator, passes: int, cfg) -> list[Condition]:
    out = [Condition(1.0, 0.0)]
    for _ in range(passes - 1):
        out.append(Condition(float(rng.uniform(cfg["gain_min"], cfg["gain_max"])),
                             float(rng.uniform(0.0, cfg["dropout"]))))
    return out


def sensor_pose_at(world: Heightfield, x: float, y: float, heading_deg: float, height: float) -> Pose:
    z = float(world.height(x, y)) + height
    return Pose.from_ypr(np.radians(heading_deg), translation=(x, y, z))


def wrap_heading(deg: float) -> float:
    return (deg + 180.0) % 360.0 - 180.0


def make_dataset(out_dir: str | Path, cfg, seed: int | None = None,
                 conditions: Sequence[Condition] | None = None,
                 place_offset: int = 0) -> list[SampleMeta]:
    """Write clouds, images, poses and a manifest for ``revisits`` passes over ``n_places``.

    Sample ids are ``run * n_places + place``. ``place_offset`` shifts the
    places along the route, so datasets with disjoint offsets share no places.
    """
    seed = cfg["seed"] if seed is None else seed
    n_places, passes = cfg["n_places"], cfg["revisits"]
    if n_places < 2:
        raise ValueError("need at least two places")
    out = Path(out_dir)
    try:
        (out / "clouds").mkdir(parents=True, exist_ok=True)
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {out}: {exc.strerror}") from None

    rig = Rig.from_config(cfg)
    route = np.random.default_rng([seed, 0])
    places = np.arange(place_offset, place_offset + n_places)
    centers = np.column_stack([places * cfg["place_spacing"], np.zeros(n_places)])
    nominal_heading = route.uniform(-180, 180, n_places)
    world = make_world(np.random.default_rng([seed, 1]), centers)
    if conditions is None:
        conditions = default_conditions(np.random.default_rng([seed, 2]), passes, cfg)
    if len(conditions) != passes:
        raise ValueError(f"{len(conditions)} conditions for {passes} passes")

    metas, poses = [], []
    for run, cond in enumerate(conditions):
        for p in range(n_places):
            sid = run * n_places + p
            rng = np.random.default_rng([seed, 3, run, p])
            ang, rad = rng.uniform(0, 2 * np.pi), cfg["pose_jitter"] * np.sqrt(rng.uniform())
            x = centers[p, 0] + rad * np.cos(ang)
            y = centers[p, 1] + rad * np.sin(ang)
            heading = wrap_heading(nominal_heading[p] + rng.uniform(-1, 1) * cfg["heading_jitter_deg"])
            pose = sensor_pose_at(world, x, y, heading, rig.lidar_height)
            cloud = simulate_lidar(world, pose, rig.lidar, rig.sensor, rng, cond.dropout)
            image = render_camera(world, pose, rig.camera, cond.gain)
            cloud_path = f"clouds/{sid:06d}.pcl"
            image_path = f"images/{sid:06d}.png"
            write_cloud(out / cloud_path, cloud)
            write_png(out / image_path, image)
            poses.append((float(sid), pose))
            metas.append(SampleMeta(sid, float(x), float(y), float(heading), run, image_path, cloud_path))
    write_poses(out / "poses.txt", poses)
    write_manifest(out / "manifest.csv", metas)
    return metas


def write_png(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, np.uint8), "RGB").save(path, format="PNG", optimize=False)


def read_png(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None


MANIFEST_FIELDS = ["id", "run", "x", "y", "heading", "cloud_path", "image_path"]


def write_manifest(path: str | Path, metas: Sequence[SampleMeta]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for m in metas:
            writer.writerow([m.id, m.run, repr(m.x), repr(m.y), repr(m.heading), m.cloud_path, m.image_path])


def read_manifest(path: str | Path) -> list[SampleMeta]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != MANIFEST_FIELDS:
                raise DataError(f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}")
            return [SampleMeta(int(r["id"]), float(r["x"]), float(r["y"]), float(r["heading"]), int(r["run"]),
                               r["image_path"], r["cloud_path"]) for r in reader]
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc.strerror}") from None
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: malformed manifest row ({exc})") from None
