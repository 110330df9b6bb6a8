"""Two-stream CORAL network: visual ResNet18+FPN, structural stream, BEV fusion, NetVLAD."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import torch
from torch import nn

from .projection import gather_bev_features
from .tensor_nn import (BatchNorm2d, Conv2d, ConvBNReLU, Linear, avg_pool2d, l2_normalize, max_pool2d,
                        nearest_upsample, softmax)

WIDTHS = (1.0, 0.5, 0.25, 0.125)
STRUCT_CONVS = (2, 4, 4, 6, 6)
STRUCT_CHANNELS = (64, 64, 128, 192, 256)
VISUAL_CHANNELS = (64, 128, 256, 512)

VARIANTS = {
    "vis-vlad": dict(modality="vision_only"),
    "ele-vlad": dict(modality="structure_only"),
    "sum-first": dict(modality="fusion", fusion_mode="sum", fusion_depth="first"),
    "con-first": dict(modality="fusion", fusion_mode="concat", fusion_depth="first"),
    "sum-four": dict(modality="fusion", fusion_mode="sum", fusion_depth="four"),
    "con-four": dict(modality="fusion", fusion_mode="concat", fusion_depth="four"),
}


@dataclass(frozen=True)
class ArchConfig:
    width_multiplier: float = 0.125
    fusion_mode: str = "concat"
    fusion_depth: str = "four"
    modality: str = "fusion"
    vlad_clusters: int = 8
    descriptor_dim: int = 256
    visual_size: int = 56
    elevation_size: int = 48
    fpn_width: int = 64
    mlp_layers: int = 1

    def __post_init__(self):
        if not any(abs(self.width_multiplier - w) < 1e-12 for w in WIDTHS):
            raise ValueError(f"width_multiplier must be one of {WIDTHS}")
        if self.fusion_mode not in ("sum", "concat"):
            raise ValueError(f"bad fusion_mode {self.fusion_mode!r}")
        if self.fusion_depth not in ("first", "four"):
            raise ValueError(f"bad fusion_depth {self.fusion_depth!r}")
        if self.modality not in ("fusion", "vision_only", "structure_only"):
            raise ValueError(f"bad modality {self.modality!r}")
        if self.vlad_clusters < 1 or self.descriptor_dim < 1 or self.mlp_layers < 1:
            raise ValueError("vlad_clusters, descriptor_dim and mlp_layers must be >= 1")

    @classmethod
    def from_config(cls, cfg, **overrides) -> "ArchConfig":
        values = {f.name: cfg[f.name] for f in fields(cls) if f.name in cfg}
        values["visual_size"] = cfg["image_size"]
        values["elevation_size"] = cfg["grid_cells"]
        values.update(overrides)
        return cls(**values)

    @classmethod
    def variant(cls, name: str, **overrides) -> "ArchConfig":
        return cls(**{**VARIANTS[name.lower()], **overrides})

    def channels(self, base: int) -> int:
        return max(1, int(round(base * self.width_multiplier)))

    @property
    def lateral_width(self) -> int:
        return self.channels(self.fpn_width)

    @property
    def fusion_groups(self) -> tuple[int, ...]:
        if self.modality != "fusion":
            return ()
        return (2,) if self.fusion_depth == "first" else (2, 3, 4, 5)


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride)
        self.bn1 = BatchNorm2d(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3)
        self.bn2 = BatchNorm2d(out_ch)
        self.relu = nn.ReLU()
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(Conv2d(in_ch, out_ch, 1, stride), BatchNorm2d(out_ch))

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return self.relu(out + skip)


def residual_group(in_ch: int, out_ch: int, blocks: int, stride: int) -> nn.Sequential:
    layers = [BasicBlock(in_ch, out_ch, stride)]
    layers += [BasicBlock(out_ch, out_ch) for _ in range(blocks - 1)]
    return nn.Sequential(*layers)


class FPN(nn.Module):
    """Lateral 1x1 projections, nearest top-down merge, 3x3 smoothing of the finest level."""

    def __init__(self, in_channels, width: int):
        super().__init__()
        self.laterals = nn.ModuleList([Conv2d(c, width, 1, bias=True) for c in in_channels])
        self.smooth = Conv2d(width, width, 3, bias=True)

    def forward(self, feats):
        merged = self.laterals[-1](feats[-1])
        for lateral, feat in zip(reversed(self.laterals[:-1]), reversed(feats[:-1])):
            merged = lateral(feat) + nearest_upsample(merged, size=feat.shape[2:])
        return self.smooth(merged)


class VisualStream(nn.Module):
    """ResNet18 backbone (width-scaled) with an FPN back to the first residual scale."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.input_size = arch.visual_size
        c = [arch.channels(ch) for ch in VISUAL_CHANNELS]
        self.stem = ConvBNReLU(3, c[0], kernel=7, stride=2)
        self.groups = nn.ModuleList([
            residual_group(c[0], c[0], 2, 1),
            residual_group(c[0], c[1], 2, 2),
            residual_group(c[1], c[2], 2, 2),
            residual_group(c[2], c[3], 2, 2),
        ])
        self.fpn = FPN(c, arch.lateral_width)

    def forward(self, img):
        if img.dim() != 4 or img.shape[1] != 3 or tuple(img.shape[2:]) != (self.input_size, self.input_size):
            raise ValueError(f"visual input must be Bx3x{self.input_size}x{self.input_size}, got {tuple(img.shape)}")
        x = max_pool2d(self.stem(img), 3, 2, 1)
        feats = []
        for group in self.groups:
            x = group(x)
            feats.append(x)
        return feats, self.fpn(feats)


class FuseFeatures(nn.Module):
    """``[Conv(Pool(V)), S]`` (concat) or ``Conv(Pool(V)) + S`` (sum), average pooling."""

    def __init__(self, v_channels: int, s_channels: int, mode: str):
        super().__init__()
        self.mode = mode
        self.conv = Conv2d(v_channels, s_channels, 1)
        # start as the structural stream alone; visual evidence is blended in as it becomes useful
        nn.init.zeros_(self.conv.weight)

    def forward(self, s, v):
        ratio_h, rem_h = divmod(v.shape[2], s.shape[2])
        ratio_w, rem_w = divmod(v.shape[3], s.shape[3])
        if rem_h or rem_w or ratio_h != ratio_w or ratio_h < 1:
            raise ValueError(f"cannot pool BEV map {tuple(v.shape[2:])} onto {tuple(s.shape[2:])}")
        pooled = v if ratio_h == 1 else avg_pool2d(v, ratio_h)
        projected = self.conv(pooled)
        if self.mode == "concat":
            return torch.cat([projected, s], dim=1)
        return projected + s


class StructuralStream(nn.Module):
    def __init__(self, arch: ArchConfig, visual_channels: int | None = None):
        super().__init__()
        self.input_size = arch.elevation_size
        self.fusion_groups = arch.fusion_groups
        c = [arch.channels(ch) for ch in STRUCT_CHANNELS]
        self.group1 = nn.Sequential(ConvBNReLU(1, c[0]), ConvBNReLU(c[0], c[0]))
        groups, fuses, out_ch = [], nn.ModuleDict(), []
        in_ch = c[0]
        for g in range(2, 6):
            ch = c[g - 1]
            groups.append(residual_group(in_ch, ch, STRUCT_CONVS[g - 1] // 2, 2))
            if g in self.fusion_groups:
                fuses[str(g)] = FuseFeatures(visual_channels, ch, arch.fusion_mode)
                ch = 2 * ch if arch.fusion_mode == "concat" else ch
            out_ch.append(ch)
            in_ch = ch
        self.groups = nn.ModuleList(groups)
        self.fuse = fuses
        self.fpn = FPN(out_ch[1:], arch.lateral_width)

    def forward(self, elev, bev_visual=None):
        if elev.dim() != 4 or elev.shape[1] != 1 or tuple(elev.shape[2:]) != (self.input_size, self.input_size):
            raise ValueError(f"elevation input must be Bx1x{self.input_size}x{self.input_size}, got {tuple(elev.shape)}")
        if (bev_visual is not None) != bool(self.fusion_groups):
            raise ValueError("BEV visual features are required exactly when fusing")
        x = self.group1(elev)
        outs = []
        for g, group in zip(range(2, 6), self.groups):
            x = group(x)
            if str(g) in self.fuse:
                x = self.fuse[str(g)](x, bev_visual)
            outs.append(x)
        return outs, self.fpn(outs[1:])


class NetVLAD(nn.Module):
    def __init__(self, dim: int, clusters: int, eps: float = 1e-12):
        super().__init__()
        self.eps = eps
        self.assign = Conv2d(dim, clusters, 1, bias=True)
        self.centers = nn.Parameter(torch.randn(clusters, dim) * 0.1)

    def forward(self, x):
        B, D = x.shape[:2]
        a = softmax(self.assign(x).flatten(2), dim=1)  # (B, K, N)
        feats = x.flatten(2)  # (B, D, N)
        vlad = torch.bmm(a, feats.transpose(1, 2)) - a.sum(dim=2).unsqueeze(2) * self.centers
        vlad = l2_normalize(vlad, dim=2, eps=self.eps)
        return l2_normalize(vlad.reshape(B, -1), dim=1, eps=self.eps)


class CoralNet(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        width = arch.lateral_width
        self.visual = VisualStream(arch) if arch.modality != "structure_only" else None
        self.structural = None
        if arch.modality != "vision_only":
            self.structural = StructuralStream(arch, width if arch.modality == "fusion" else None)
        self.netvlad = NetVLAD(width, arch.vlad_clusters)
        layers, in_dim = [], arch.vlad_clusters * width
        for k in range(arch.mlp_layers):
            layers.append(Linear(in_dim, arch.descriptor_dim))
            if k < arch.mlp_layers - 1:
                layers.append(nn.ReLU())
            in_dim = arch.descriptor_dim
        self.mlp = nn.Sequential(*layers)

    def bev_visual(self, images, tables):
        _, fpn = self.visual(images)
        factor = self.arch.visual_size // fpn.shape[2]
        scaled = [table.rescaled(factor) for table in tables]
        return gather_bev_features(scaled, fpn)

    def forward(self, images=None, elevations=None, tables=None, bev_visual=None):
        if self.arch.modality == "vision_only":
            _, local = self.visual(images)
        else:
            if self.arch.modality == "fusion" and bev_visual is None:
                bev_visual = self.bev_visual(images, tables)
            _, local = self.structural(elevations, bev_visual if self.arch.modality == "fusion" else None)
        return l2_normalize(self.mlp(self.netvlad(local)), dim=1)

    def describe(self, samples, batch_size: int = 32) -> np.ndarray:
        """Inference-mode descriptors, one row per sample."""
        was_training = self.training
        self.eval()
        out = []
        with torch.no_grad():
            for start in range(0, len(samples), batch_size):
                out.append(self(**batch_inputs(samples[start:start + batch_size])).numpy())
        self.train(was_training)
        return np.concatenate(out) if out else np.zeros((0, self.arch.descriptor_dim), np.float32)


def batch_inputs(samples, dtype=torch.float32) -> dict:
    """Stack prepared samples (``image``, ``elevation``, ``table`` attributes) into network inputs."""
    images = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).to(dtype) / 255.0
    elevs = torch.from_numpy(np.stack([s.elevation.pixels for s in samples]))[:, None].to(dtype) / 255.0
    return {"images": images, "elevations": elevs, "tables": [s.table for s in samples]}


def build_model(arch: ArchConfig, seed: int = 0) -> CoralNet:
    torch.manual_seed(seed)
    return CoralNet(arch)
