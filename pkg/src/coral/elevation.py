"""Robot-centric 2.5D elevation grid, ray-traced clearing and 8-bit rendering."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import DataError
from .geometry import GridSpec, Pose, as_point

VAR_FLOOR = 1e-6
CLOUD_MAGIC = b"PCL0"


@dataclass(frozen=True)
class SensorModel:
    """Range-dependent elevation variance ``sigma0**2 + range_coeff * range**2``."""

    sigma0: float = 0.01
    range_coeff: float = 1e-4
    var_floor: float = VAR_FLOOR

    def variance(self, range_m):
        return np.maximum(self.sigma0**2 + self.range_coeff * np.square(range_m), self.var_floor)


@dataclass(frozen=True)
class ElevationMeasurement:
    e_p: float
    var_p: float
    source_cell: tuple[int, int] | None
    ray_origin: np.ndarray
    point: np.ndarray  # world-frame endpoint


@dataclass(frozen=True)
class ElevationCell:
    e_g: float = 0.0
    var_g: float = 0.0
    valid: bool = False
    outlier_count: int = 0


def measure(pose: Pose, p_sensor, spec: GridSpec, sensor: SensorModel = SensorModel(),
            range_m: float | None = None) -> ElevationMeasurement:
    p_sensor = as_point(p_sensor)
    p_world = pose.rotation @ p_sensor + pose.translation
    if range_m is None:
        range_m = float(np.linalg.norm(p_sensor))
    return ElevationMeasurement(
        e_p=float(p_world[2]),
        var_p=float(sensor.variance(range_m)),
        source_cell=spec.world_to_cell(p_world),
        ray_origin=pose.translation.copy(),
        point=p_world,
    )


def _fuse_arrays(eg, vg, valid, count, ep, vp, gate, outlier_limit, var_floor=VAR_FLOOR):
    """Variance-weighted update with a Mahalanobis gate, elementwise over cells."""
    eg, vg = np.asarray(eg, float), np.asarray(vg, float)
    ep, vp = np.asarray(ep, float), np.asarray(vp, float)
    valid, count = np.asarray(valid, bool), np.asarray(count, np.int64)

    with np.errstate(invalid="ignore", divide="ignore"):
        dist = np.abs(ep - eg) / np.sqrt(vp + vg)
    in_gate = valid & (dist <= gate)
    rejected = valid & ~in_gate
    new_count = np.where(rejected, count + 1, 0)
    adopt = ~valid | (rejected & (new_count >= outlier_limit))

    total = vp + vg
    fused_e = np.where(in_gate, (vp * eg + vg * ep) / np.where(in_gate, total, 1.0), eg)
    fused_v = np.where(in_gate, np.maximum(vp * vg / np.where(in_gate, total, 1.0), var_floor), vg)
    out_e = np.where(adopt, ep, fused_e)
    out_v = np.where(adopt, np.maximum(vp, var_floor), fused_v)
    out_count = np.where(adopt, 0, new_count)
    return out_e, out_v, np.ones_like(valid), out_count


def fuse(cell: ElevationCell, m: ElevationMeasurement, gate: float = 3.0,
         outlier_limit: int = 3) -> ElevationCell:
    e, v, ok, n = _fuse_arrays(cell.e_g, cell.var_g, cell.valid, cell.outlier_count,
                               m.e_p, m.var_p, gate, outlier_limit)
    return ElevationCell(float(e), float(v), bool(ok), int(n))


def traverse(spec: GridSpec, origins: np.ndarray, ends: np.ndarray):
    """2D DDA over the cells crossed by each segment, endpoints' cells excluded.

    ``origins`` and ``ends`` are (N, >=2) world arrays. Returns flat arrays
    ``(ray, i, j, t_in, t_out)`` where [t_in, t_out] is the parametric span of
    the segment inside cell (i, j); spans of zero length are dropped. Cells
    outside the grid are reported too (callers mask them).
    """
    origins = np.atleast_2d(np.asarray(origins, float))
    ends = np.atleast_2d(np.asarray(ends, float))
    res = spec.resolution
    gx0 = (origins[:, 0] - spec.origin[0]) / res
    gy0 = (origins[:, 1] - spec.origin[1]) / res
    gx1 = (ends[:, 0] - spec.origin[0]) / res
    gy1 = (ends[:, 1] - spec.origin[1]) / res
    i = np.floor(gx0).astype(np.int64)
    j = np.floor(gy0).astype(np.int64)
    ie = np.floor(gx1).astype(np.int64)
    je = np.floor(gy1).astype(np.int64)

    dx, dy = gx1 - gx0, gy1 - gy0
    step_x = np.sign(dx).astype(np.int64)
    step_y = np.sign(dy).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_max_x = np.where(dx != 0, (i + (step_x > 0) - gx0) / dx, np.inf)
        t_max_y = np.where(dy != 0, (j + (step_y > 0) - gy0) / dy, np.inf)
        t_delta_x = np.where(dx != 0, 1.0 / np.abs(dx), np.inf)
        t_delta_y = np.where(dy != 0, 1.0 / np.abs(dy), np.inf)

    n_steps = np.abs(ie - i) + np.abs(je - j)
    t_in = np.zeros(len(i))
    out = []
    for k in range(int(n_steps.max(initial=0))):
        active = np.nonzero(k < n_steps)[0]
        ii, jj = i[active], j[active]
        tx, ty = t_max_x[active], t_max_y[active]
        # Force the axis once the other has reached its end cell.
        go_x = np.where(ii == ie[active], False, np.where(jj == je[active], True, tx <= ty))
        t_out = np.minimum(np.where(go_x, tx, ty), 1.0)
        if k > 0:
            keep = t_out > t_in[active]
            out.append((active[keep], ii[keep], jj[keep], t_in[active][keep], t_out[keep]))
        i[active] = np.where(go_x, ii + step_x[active], ii)
        j[active] = np.where(go_x, jj, jj + step_y[active])
        t_max_x[active] = np.where(go_x, tx + t_delta_x[active], tx)
        t_max_y[active] = np.where(go_x, ty, ty + t_delta_y[active])
        t_in[active] = t_out
    if not out:
        empty = np.zeros(0, np.int64)
        return empty, empty, empty, np.zeros(0), np.zeros(0)
    return tuple(np.concatenate(parts) for parts in zip(*out))


class ElevationMap:
    """Grid of (elevation, variance, validity, outlier count) cells."""

    def __init__(self, spec: GridSpec, sensor: SensorModel = SensorModel(), gate: float = 3.0,
                 outlier_limit: int = 3, clearance_margin: float = 0.2):
        self.spec = spec
        self.sensor = sensor
        self.gate = gate
        self.outlier_limit = outlier_limit
        self.clearance_margin = clearance_margin
        self.elevation = np.zeros(spec.shape)
        self.variance = np.zeros(spec.shape)
        self.valid = np.zeros(spec.shape, dtype=bool)
        self.outliers = np.zeros(spec.shape, dtype=np.int64)

    @classmethod
    def from_config(cls, spec: GridSpec, cfg) -> "ElevationMap":
        sensor = SensorModel(cfg["sensor_sigma0"], cfg["sensor_range_coeff"], cfg["var_floor"])
        return cls(spec, sensor, cfg["gate_sigma"], cfg["outlier_limit"], cfg["clearance_margin"])

    def cell(self, i: int, j: int) -> ElevationCell:
        return ElevationCell(float(self.elevation[i, j]), float(self.variance[i, j]),
                             bool(self.valid[i, j]), int(self.outliers[i, j]))

    def set_cell(self, i: int, j: int, cell: ElevationCell) -> None:
        self.elevation[i, j] = cell.e_g
        self.variance[i, j] = cell.var_g
        self.valid[i, j] = cell.valid
        self.outliers[i, j] = cell.outlier_count

    def fuse_measurement(self, m: ElevationMeasurement) -> None:
        if m.source_cell is not None:
            self.set_cell(*m.source_cell, fuse(self.cell(*m.source_cell), m, self.gate, self.outlier_limit))

    def fuse_points(self, points_world: np.ndarray, variances: np.ndarray) -> int:
        """Fuse measurements in order; same result as one ``fuse`` call per point.

        Measurements landing in different cells are independent, so the k-th
        measurement of every cell is applied in one vectorised round.
        """
        points_world = np.asarray(points_world, float)
        i, j, inside = self.spec.cells_of(points_world)
        idx = np.nonzero(inside)[0]
        if len(idx) == 0:
            return 0
        flat = i[idx] * self.spec.cells_y + j[idx]
        order = np.argsort(flat, kind="stable")
        flat_sorted = flat[order]
        starts = np.r_[0, np.nonzero(np.diff(flat_sorted))[0] + 1]
        group_start = np.repeat(starts, np.diff(np.r_[starts, len(flat_sorted)]))
        rank = np.arange(len(flat_sorted)) - group_start
        e_all = points_world[idx[order], 2]
        v_all = np.asarray(variances, float)[idx[order]]
        E, V, ok, N = (a.reshape(-1) for a in (self.elevation, self.variance, self.valid, self.outliers))
        for r in range(int(rank.max()) + 1):
            sel = rank == r
            c = flat_sorted[sel]
            E[c], V[c], ok[c], N[c] = _fuse_arrays(E[c], V[c], ok[c], N[c], e_all[sel], v_all[sel],
                                                   self.gate, self.outlier_limit, self.sensor.var_floor)
        return len(idx)

    def clear_rays(self, origin, endpoints: np.ndarray) -> np.ndarray:
        """Invalidate valid cells that stand above a ray by more than the margin.

        The ray height in a crossed cell is taken at the middle of the segment's
        span inside that cell. The origin and endpoint cells are never touched.
        Returns a boolean mask of the cells that were reset.
        """
        endpoints = np.atleast_2d(np.asarray(endpoints, float))
        origin = np.asarray(origin, float)
        origins = np.broadcast_to(origin, endpoints.shape)
        ray, i, j, t_in, t_out = traverse(self.spec, origins, endpoints)
        inside = (i >= 0) & (i < self.spec.cells_x) & (j >= 0) & (j < self.spec.cells_y)
        ray, i, j, t_in, t_out = ray[inside], i[inside], j[inside], t_in[inside], t_out[inside]
        z0 = origins[ray, 2]
        z_mid = z0 + 0.5 * (t_in + t_out) * (endpoints[ray, 2] - z0)
        blocked = self.valid[i, j] & (self.elevation[i, j] > z_mid + self.clearance_margin)
        reset = np.zeros(self.spec.shape, dtype=bool)
        reset[i[blocked], j[blocked]] = True
        self.valid[reset] = False
        self.elevation[reset] = 0.0
        self.variance[reset] = 0.0
        self.outliers[reset] = 0
        return reset

    def integrate(self, pose: Pose, points_sensor: np.ndarray) -> dict:
        """Add one scan: clear against the current map, then fuse every point in order."""
        points_sensor = np.asarray(points_sensor, float).reshape(-1, 3)
        points_world = pose.apply(points_sensor)
        variances = self.sensor.variance(np.linalg.norm(points_sensor, axis=1))
        reset = self.clear_rays(pose.translation, points_world) if len(points_world) else \
            np.zeros(self.spec.shape, dtype=bool)
        fused = self.fuse_points(points_world, variances)
        return {"points": len(points_world), "fused": fused, "cleared": int(reset.sum()), "reset": reset}


def ray_trace_clear(emap: ElevationMap, m: ElevationMeasurement) -> np.ndarray:
    """Clear along one measurement ray (in place); returns the reset mask."""
    if np.allclose(m.ray_origin[:2], m.point[:2], rtol=0, atol=0):
        return np.zeros(emap.spec.shape, dtype=bool)
    return emap.clear_rays(m.ray_origin, m.point[None, :])


@dataclass
class ElevationImage:
    pixels: np.ndarray  # uint8, (cells_x, cells_y)
    spec: GridSpec
    window: tuple[float, float]
    elevation: np.ndarray  # meters after hole filling, NaN where still empty

    @property
    def valid(self) -> np.ndarray:
        return ~np.isnan(self.elevation)

    def as_float(self) -> np.ndarray:
        return self.pixels.astype(np.float32) / 255.0


def _neighbour_stack(a: np.ndarray, fill) -> np.ndarray:
    padded = np.pad(a, 1, constant_values=fill)
    h, w = a.shape
    return np.stack([padded[1 + di:1 + di + h, 1 + dj:1 + dj + w]
                     for di in (-1, 0, 1) for dj in (-1, 0, 1) if (di, dj) != (0, 0)])


def render_elevation_image(emap: ElevationMap, window: tuple[float, float],
                           min_neighbors: int = 3) -> ElevationImage:
    h_min, h_max = map(float, window)
    if not h_min < h_max:
        raise ValueError(f"degenerate height window ({h_min}, {h_max})")
    valid = emap.valid
    scaled = np.clip((emap.elevation - h_min) / (h_max - h_min), 0.0, 1.0)
    raw = np.where(valid, np.floor(255.0 * scaled + 0.5), 0.0)

    nb_valid = _neighbour_stack(valid, False)
    count = nb_valid.sum(axis=0)
    nb_pix = _neighbour_stack(raw, 0.0)
    nb_elev = _neighbour_stack(np.where(valid, emap.elevation, 0.0), 0.0)
    fill = ~valid & (count >= min_neighbors)
    safe = np.maximum(count, 1)
    pixels = raw.copy()
    pixels[fill] = np.floor(nb_pix.sum(axis=0)[fill] / safe[fill] + 0.5)
    elevation = np.full(emap.spec.shape, np.nan)
    elevation[valid] = emap.elevation[valid]
    elevation[fill] = nb_elev.sum(axis=0)[fill] / safe[fill]
    return ElevationImage(pixels.astype(np.uint8), emap.spec, (h_min, h_max), elevation)


def default_window(sensor_z: float, half_height: float = 5.0) -> tuple[float, float]:
    return sensor_z - half_height, sensor_z + half_height


def write_cloud(path: str | Path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    with open(path, "wb") as fh:
        fh.write(CLOUD_MAGIC + struct.pack("<I", len(pts)))
        fh.write(pts.tobytes())


def read_cloud(path: str | Path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read point cloud {path}: {exc.strerror}") from None
    if len(data) < 8 or data[:4] != CLOUD_MAGIC:
        raise DataError(f"{path}: not a PCL0 point cloud")
    (count,) = struct.unpack("<I", data[4:8])
    if len(data) != 8 + 12 * count:
        raise DataError(f"{path}: expected {count} points, file size {len(data)} disagrees")
    return np.frombuffer(data, dtype="<f4", offset=8).reshape(count, 3).astype(np.float64)


def write_pgm(path: str | Path, image: ElevationImage) -> None:
    # rows = first grid index (x), columns = second (y)
    h, w = image.pixels.shape
    comment = f"# coral {image.spec.describe()} window={image.window[0]!r},{image.window[1]!r}"
    with open(path, "wb") as fh:
        fh.write(f"P5\n{comment}\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image.pixels, dtype=np.uint8).tobytes())


def read_pgm(path: str | Path) -> tuple[np.ndarray, dict]:
    """Return (pixels, metadata) where metadata holds the parsed comment fields."""
    data = Path(path).read_bytes()
    tokens, meta, pos = [], {}, 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            end = data.index(b"\n", pos)
            for item in data[pos + 1:end].decode("ascii").split():
                if "=" in item:
                    key, value = item.split("=", 1)
                    meta[key] = value
            pos = end + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode("ascii"))
        pos = end
    if tokens[0] != "P5" or tokens[3] != "255":
        raise DataError(f"{path}: unsupported PGM header")
    w, h = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(data, dtype=np.uint8, offset=pos + 1, count=w * h).reshape(h, w)
    return pixels.copy(), meta


MAP_MAGIC = b"EMAP"


def write_map(path: str | Path, emap: ElevationMap) -> None:
    """``EMAP`` | cells_x, cells_y u32 | resolution, origin x, origin y f64 |
    elevation, variance f64 | valid u8 | outliers i64, row-major, little-endian."""
    spec = emap.spec
    with open(path, "wb") as fh:
        fh.write(MAP_MAGIC + struct.pack("<II3d", spec.cells_x, spec.cells_y, spec.resolution, *spec.origin))
        fh.write(emap.elevation.astype("<f8").tobytes())
        fh.write(emap.variance.astype("<f8").tobytes())
        fh.write(emap.valid.astype(np.uint8).tobytes())
        fh.write(emap.outliers.astype("<i8").tobytes())


def read_map(path: str | Path, **kwargs) -> ElevationMap:
    """Inverse of :func:`write_map`; ``kwargs`` go to the :class:`ElevationMap` constructor."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read elevation map {path}: {exc.strerror}") from None
    head = struct.calcsize("<II3d")
    if data[:4] != MAP_MAGIC or len(data) < 4 + head:
        raise DataError(f"{path}: not an EMAP file")
    nx, ny, res, ox, oy = struct.unpack_from("<II3d", data, 4)
    n = nx * ny
    if len(data) != 4 + head + n * 25:
        raise DataError(f"{path}: size does not match a {nx}x{ny} grid")
    emap = ElevationMap(GridSpec(nx, ny, res, (ox, oy)), **kwargs)
    pos = 4 + head
    emap.elevation = np.frombuffer(data, "<f8", n, pos).reshape(nx, ny).astype(np.float64)
    emap.variance = np.frombuffer(data, "<f8", n, pos + 8 * n).reshape(nx, ny).astype(np.float64)
    emap.valid = np.frombuffer(data, np.uint8, n, pos + 16 * n).reshape(nx, ny).astype(bool)
    emap.outliers = np.frombuffer(data, "<i8", n, pos + 17 * n).reshape(nx, ny).astype(np.int64)
    return emap
