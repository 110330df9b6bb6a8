"""Point-to-pixel correspondences between BEV cells and a camera image.

A :class:`ProjectionTable` lists, for every elevation cell that projects into
the image, the four pixels surrounding its (non-integer) projection and their
bilinear weights. Gathering a front-view feature map through the table is a
sparse linear map, so its backward pass scatters with the same weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import CameraModel, Pose, project_points


@dataclass(frozen=True)
class ProjectionTable:
    cells: np.ndarray  # (N, 2) BEV cell indices (i, j)
    uv: np.ndarray  # (N, 2) continuous pixel coordinates
    pixels: np.ndarray  # (N, 4) flat pixel indices v*width + u, order 00, 01, 10, 11
    weights: np.ndarray  # (N, 4) bilinear weights
    image_size: tuple[int, int]  # (height, width)
    grid_size: tuple[int, int]
    _rescaled: dict = field(default_factory=dict, compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.cells)

    @classmethod
    def from_uv(cls, cells, uv, image_size, grid_size) -> "ProjectionTable":
        cells = np.asarray(cells, np.int64).reshape(-1, 2)
        uv = np.asarray(uv, np.float64).reshape(-1, 2)
        pixels, weights = bilinear_footprint(uv, image_size)
        return cls(cells, uv, pixels, weights, tuple(image_size), tuple(grid_size))

    def rescaled(self, factor: int) -> "ProjectionTable":
        """Table for a feature map downsampled ``factor`` times (pixel-centre convention).

        Coordinates falling outside the smaller map after rescaling are clamped
        to its border.
        """
        if factor == 1:
            return self
        if factor not in self._rescaled:
            h, w = self.image_size
            if h % factor or w % factor:
                raise ValueError(f"image size {self.image_size} not divisible by {factor}")
            size = (h // factor, w // factor)
            uv = (self.uv + 0.5) / factor - 0.5
            uv = np.column_stack([np.clip(uv[:, 0], 0, size[1] - 1), np.clip(uv[:, 1], 0, size[0] - 1)])
            self._rescaled[factor] = ProjectionTable.from_uv(self.cells, uv, size, self.grid_size)
        return self._rescaled[factor]

    def dumps(self) -> str:
        """Debug text, one entry per line: ``i j u v w00 w01 w10 w11``."""
        lines = []
        for (i, j), (u, v), w in zip(self.cells, self.uv, self.weights):
            lines.append(f"{i} {j} {u:.6f} {v:.6f} " + " ".join(f"{x:.6f}" for x in w))
        return "\n".join(lines) + ("\n" if lines else "")


def bilinear_footprint(uv: np.ndarray, image_size) -> tuple[np.ndarray, np.ndarray]:
    h, w = image_size
    u, v = uv[:, 0], uv[:, 1]
    u0 = np.minimum(np.floor(u), w - 2).astype(np.int64) if w > 1 else np.zeros(len(u), np.int64)
    v0 = np.minimum(np.floor(v), h - 2).astype(np.int64) if h > 1 else np.zeros(len(v), np.int64)
    a = u - u0
    b = v - v0
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    pixels = np.stack([v0 * w + u0, v0 * w + u1, v1 * w + u0, v1 * w + u1], axis=1)
    weights = np.stack([(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b], axis=1)
    return pixels, weights


def build_projection_table(elevation, sensor_pose: Pose, cam: CameraModel) -> ProjectionTable:
    """Project every cell with a known elevation into the camera.

    ``elevation`` is an :class:`~coral.elevation.ElevationImage` (hole-filled
    elevations) or an :class:`~coral.elevation.ElevationMap`; both carry a
    ``spec``. ``sensor_pose`` maps the LiDAR frame into the world and
    ``cam.extrinsic`` maps the LiDAR frame into the camera.
    """
    spec = elevation.spec
    if hasattr(elevation, "valid") and hasattr(elevation, "variance"):
        heights = np.where(elevation.valid, elevation.elevation, np.nan)
    else:
        heights = elevation.elevation
    known = ~np.isnan(heights)
    ii, jj = np.nonzero(known)
    cx, cy = spec.cell_center(ii, jj)
    world = np.column_stack([cx, cy, heights[ii, jj]])
    world_to_cam = cam.extrinsic @ sensor_pose.inverse()
    p_cam = world_to_cam.apply(world)
    u, v, front = project_points(cam, p_cam)
    inside = front & (u >= 0) & (u <= cam.width - 1) & (v >= 0) & (v <= cam.height - 1)
    cells = np.column_stack([ii, jj])[inside]
    uv = np.column_stack([u, v])[inside]
    return ProjectionTable.from_uv(cells, uv, (cam.height, cam.width), spec.shape)


class _Gather(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, src, dst, w, n_out):
        # x: (P, C) source sites; rows of the output receive weighted source rows
        ctx.save_for_backward(src, dst, w)
        ctx.n_src = x.shape[0]
        out = x.new_zeros((n_out, x.shape[1]))
        out.index_add_(0, dst, x[src] * w[:, None])
        return out

    @staticmethod
    def backward(ctx, grad_out):
        src, dst, w = ctx.saved_tensors
        grad_x = grad_out.new_zeros((ctx.n_src, grad_out.shape[1]))
        grad_x.index_add_(0, src, grad_out[dst] * w[:, None])
        return grad_x, None, None, None, None


def _flat_indices(tables, image_size, grid_size, device):
    src, dst, w = [], [], []
    n_pix = image_size[0] * image_size[1]
    n_cells = grid_size[0] * grid_size[1]
    for b, table in enumerate(tables):
        flat_cell = table.cells[:, 0] * grid_size[1] + table.cells[:, 1]
        src.append((table.pixels + b * n_pix).reshape(-1))
        dst.append(np.repeat(flat_cell + b * n_cells, 4))
        w.append(table.weights.reshape(-1))
    return (torch.as_tensor(np.concatenate(src), device=device),
            torch.as_tensor(np.concatenate(dst), device=device),
            np.concatenate(w))


def gather_bev_features(tables, front_view):
    """Gather front-view features into the BEV grid.

    ``front_view`` is (C, H, W) with a single table, or (B, C, H, W) with a
    sequence of B tables. numpy in, numpy out; torch tensors keep their graph.
    Cells without an entry receive zeros.
    """
    as_numpy = isinstance(front_view, np.ndarray)
    x = torch.from_numpy(front_view) if as_numpy else front_view
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
        tables = [tables]
    if len(tables) != x.shape[0]:
        raise ValueError(f"{len(tables)} tables for a batch of {x.shape[0]}")
    B, C, H, W = x.shape
    grid_size = tables[0].grid_size
    for table in tables:
        if tuple(table.image_size) != (H, W):
            raise ValueError(f"feature map is {H}x{W}, table expects {table.image_size}")
        if table.grid_size != grid_size:
            raise ValueError("tables disagree on the grid size")
    src, dst, w = _flat_indices(tables, (H, W), grid_size, x.device)
    w = torch.as_tensor(w, dtype=x.dtype, device=x.device)
    sites = x.permute(0, 2, 3, 1).reshape(B * H * W, C)
    out = _Gather.apply(sites, src, dst, w, B * grid_size[0] * grid_size[1])
    out = out.reshape(B, grid_size[0], grid_size[1], C).permute(0, 3, 1, 2)
    if single:
        out = out[0]
    return out.contiguous().numpy() if as_numpy else out.contiguous()
