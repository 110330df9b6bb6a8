"""Rigid transforms, pinhole projection and grid indexing."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import DataError

BEHIND_CAMERA_Z = 1e-6


def as_point(p) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("point has non-finite components")
    return arr


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping points from ``source`` frame into ``target`` frame."""

    rotation: np.ndarray
    translation: np.ndarray
    source: str = "lidar"
    target: str = "world"

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(R @ R.T, np.eye(3), rtol=0, atol=1e-9) or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ValueError("rotation is not orthonormal with determinant +1")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls, source: str = "lidar", target: str = "world") -> "Pose":
        return cls(np.eye(3), np.zeros(3), source, target)

    @classmethod
    def from_quaternion(cls, q_xyzw, translation, source: str = "lidar", target: str = "world") -> "Pose":
        x, y, z, w = np.asarray(q_xyzw, dtype=np.float64) / np.linalg.norm(q_xyzw)
        R = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ])
        return cls(R, translation, source, target)

    @classmethod
    def from_ypr(cls, yaw: float, pitch: float = 0.0, roll: float = 0.0, translation=(0, 0, 0),
                 source: str = "lidar", target: str = "world") -> "Pose":
        """Z-Y-X Euler angles in radians."""
        cy, sy = np.cos(yaw), np.sin(yaw)
        cp, sp = np.cos(pitch), np.sin(pitch)
        cr, sr = np.cos(roll), np.sin(roll)
        Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
        Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
        Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
        return cls(Rz @ Ry @ Rx, translation, source, target)

    def quaternion(self) -> np.ndarray:
        """Unit quaternion (x, y, z, w) with w >= 0."""
        R = self.rotation
        tr = np.trace(R)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
        else:
            i = int(np.argmax(np.diag(R)))
            j, k = (i + 1) % 3, (i + 2) % 3
            s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
            q = [0.0, 0.0, 0.0, (R[k, j] - R[j, k]) / s]
            q[i] = 0.25 * s
            q[j] = (R[j, i] + R[i, j]) / s
            q[k] = (R[k, i] + R[i, k]) / s
        q = np.array(q)
        return -q if q[3] < 0 else q

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation, self.target, self.source)

    def __matmul__(self, other: "Pose") -> "Pose":
        """``self @ other`` applies ``other`` first."""
        if other.target != self.source:
            raise ValueError(f"frame mismatch: {other.target!r} -> {self.source!r}")
        R = self.rotation @ other.rotation
        # re-orthonormalize so long compositions keep passing the constructor check
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        return Pose(R, self.rotation @ other.translation + self.translation, other.source, self.target)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) array of points."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


def transform_point(pose: Pose, p) -> np.ndarray:
    return pose.rotation @ as_point(p) + pose.translation


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: Pose = field(default_factory=lambda: Pose.identity("lidar", "camera"))

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def from_fov(cls, size: int, hfov_deg: float, extrinsic: Pose) -> "CameraModel":
        f = (size / 2) / np.tan(np.radians(hfov_deg) / 2)
        return cls(f, f, size / 2, size / 2, size, size, extrinsic)

    def scaled(self, factor: float) -> "CameraModel":
        """Same camera at 1/factor resolution (pixel-centre convention)."""
        w, h = int(round(self.width / factor)), int(round(self.height / factor))
        return CameraModel(self.fx / factor, self.fy / factor, (self.cx + 0.5) / factor - 0.5,
                           (self.cy + 0.5) / factor - 0.5, w, h, self.extrinsic)


def project_to_pixel(cam: CameraModel, p_cam) -> tuple[float, float] | None:
    """Pinhole projection of a camera-frame point; ``None`` when behind the camera.

    Pixel centres sit at integer coordinates. Bounds are the caller's business.
    """
    x, y, z = as_point(p_cam)
    if z <= BEHIND_CAMERA_Z:
        return None
    return cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy


def project_points(cam: CameraModel, p_cam: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised ``project_to_pixel``: returns u, v and an in-front mask."""
    p_cam = np.asarray(p_cam, dtype=np.float64)
    z = p_cam[:, 2]
    front = z > BEHIND_CAMERA_Z
    safe_z = np.where(front, z, 1.0)
    u = cam.fx * p_cam[:, 0] / safe_z + cam.cx
    v = cam.fy * p_cam[:, 1] / safe_z + cam.cy
    return u, v, front


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned grid; ``origin`` is the world (x, y) of the outer corner of cell (0, 0).

    Cell (i, j) spans x in [ox + i*res, ox + (i+1)*res) and likewise y with j.
    """

    cells_x: int
    cells_y: int
    resolution: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.cells_x < 1 or self.cells_y < 1:
            raise ValueError("grid needs at least one cell per axis")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @classmethod
    def centered(cls, x: float, y: float, cells: int, resolution: float) -> "GridSpec":
        """Robot-centric grid with (x, y) at its centre."""
        half = cells * resolution / 2
        return cls(cells, cells, resolution, (x - half, y - half))

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells_x, self.cells_y

    def world_to_cell(self, p) -> tuple[int, int] | None:
        i = int(np.floor((p[0] - self.origin[0]) / self.resolution))
        j = int(np.floor((p[1] - self.origin[1]) / self.resolution))
        if 0 <= i < self.cells_x and 0 <= j < self.cells_y:
            return i, j
        return None

    def cells_of(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorised indexing: (i, j, inside) for an (N, >=2) array."""
        xy = np.asarray(xy, dtype=np.float64)
        i = np.floor((xy[:, 0] - self.origin[0]) / self.resolution).astype(np.int64)
        j = np.floor((xy[:, 1] - self.origin[1]) / self.resolution).astype(np.int64)
        inside = (i >= 0) & (i < self.cells_x) & (j >= 0) & (j < self.cells_y)
        return i, j, inside

    def cell_center(self, i, j) -> tuple:
        return (self.origin[0] + (np.asarray(i) + 0.5) * self.resolution,
                self.origin[1] + (np.asarray(j) + 0.5) * self.resolution)

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(cells_x, cells_y) arrays of cell-centre x and y."""
        ii, jj = np.meshgrid(np.arange(self.cells_x), np.arange(self.cells_y), indexing="ij")
        return self.cell_center(ii, jj)

    def describe(self) -> str:
        return (f"cells={self.cells_x}x{self.cells_y} resolution={self.resolution!r} "
                f"origin={self.origin[0]!r},{self.origin[1]!r}")


def read_poses(path: str | Path) -> list[tuple[float, Pose]]:
    """Read ``timestamp tx ty tz qx qy qz qw`` lines."""
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 8:
            raise DataError(f"{path}:{lineno}: expected 8 fields, got {len(fields)}")
        try:
            ts, tx, ty, tz, qx, qy, qz, qw = map(float, fields)
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric pose field") from None
        poses.append((ts, Pose.from_quaternion((qx, qy, qz, qw), (tx, ty, tz))))
    return poses


def format_pose(timestamp: float, pose: Pose) -> str:
    q = pose.quaternion()
    vals = [timestamp, *pose.translation, *q]
    return " ".join(repr(float(v)) for v in vals)


def write_poses(path: str | Path, poses: list[tuple[float, Pose]]) -> None:
    Path(path).write_text("".join(format_pose(ts, pose) + "\n" for ts, pose in poses))
