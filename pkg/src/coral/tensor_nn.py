"""Layer set used by the network, finite-difference checking and checkpoints.

The arithmetic runs on torch's CPU kernels and autograd; this module pins down
the exact operator contracts (shapes, padding, eps guards), the parameter
initialisation, and the binary checkpoint format.
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import DataError

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


def _check_4d(x: torch.Tensor, name: str = "x") -> None:
    if x.dim() != 4:
        raise ValueError(f"{name} must be (batch, channels, height, width), got {tuple(x.shape)}")


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0):
    _check_4d(x)
    if weight.dim() != 4 or weight.shape[1] != x.shape[1]:
        raise ValueError(f"weight {tuple(weight.shape)} does not match input channels {x.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError("bias must have one entry per output channel")
    k_h, k_w = weight.shape[2:]
    out_h = (x.shape[2] + 2 * padding - k_h) // stride + 1
    out_w = (x.shape[3] + 2 * padding - k_w) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ValueError("kernel larger than padded input")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def batch_norm(x, running_mean, running_var, weight, bias, training: bool,
               momentum: float = 0.1, eps: float = 1e-5):
    _check_4d(x)
    return F.batch_norm(x, running_mean, running_var, weight, bias, training, momentum, eps)


def relu(x):
    return F.relu(x)


def _check_window(x, kernel: int, padding: int = 0):
    _check_4d(x)
    if kernel > x.shape[2] + 2 * padding or kernel > x.shape[3] + 2 * padding:
        raise ValueError(f"pooling window {kernel} larger than input {tuple(x.shape[2:])}")


def avg_pool2d(x, kernel: int, stride: int | None = None):
    _check_window(x, kernel)
    return F.avg_pool2d(x, kernel, stride or kernel)


def max_pool2d(x, kernel: int, stride: int | None = None, padding: int = 0):
    _check_window(x, kernel, padding)
    return F.max_pool2d(x, kernel, stride or kernel, padding)


def nearest_upsample(x, factor: int | None = None, size: Sequence[int] | None = None):
    """Nearest-neighbour upsampling by an integer factor or to an explicit size."""
    _check_4d(x)
    if (factor is None) == (size is None):
        raise ValueError("give exactly one of factor or size")
    if factor is not None:
        return x.repeat_interleave(factor, dim=2).repeat_interleave(factor, dim=3)
    return F.interpolate(x, size=tuple(size), mode="nearest")


def linear(x, weight, bias=None):
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"input dim {x.shape[-1]} does not match weight {tuple(weight.shape)}")
    return F.linear(x, weight, bias)


def softmax(x, dim: int):
    return torch.softmax(x, dim=dim)


def l2_normalize(x, dim: int = -1, eps: float = 1e-12):
    return x / x.norm(dim=dim, keepdim=True).clamp_min(eps)


class Conv2d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int | None = None,
                 bias: bool = False):
        super().__init__()
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        fan_in = in_ch * kernel * kernel
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel) * math.sqrt(2.0 / fan_in))
        self.bias = nn.Parameter(torch.zeros(out_ch)) if bias else None

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(nn.Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x):
        return batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias,
                          self.training, self.momentum, self.eps)


class Linear(nn.Module):
    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_dim, in_dim) * math.sqrt(1.0 / in_dim))
        self.bias = nn.Parameter(torch.zeros(out_dim))

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class ConvBNReLU(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, act: bool = True):
        layers = [Conv2d(in_ch, out_ch, kernel, stride), BatchNorm2d(out_ch)]
        if act:
            layers.append(nn.ReLU())
        super().__init__(*layers)


# ----------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    tolerance: float
    checked: int
    per_input: list[float] = field(default_factory=list)

    def __str__(self) -> str:
        state = "pass" if self.passed else "FAIL"
        return f"grad_check {state}: max rel err {self.max_rel_error:.3e} (tol {self.tolerance:g}, {self.checked} entries)"


def relative_error(analytic: float, numeric: float, floor: float = 1e-10) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(op: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], tolerance: float = 1e-4,
               eps: float = 1e-6, max_entries: int | None = 64, seed: int = 0) -> GradCheckReport:
    """Compare autograd gradients of ``op`` with central differences.

    The scalar checked is ``sum(op(*inputs) * R)`` for a fixed random ``R``.
    Inputs with ``requires_grad`` are checked, at most ``max_entries`` random
    entries each. Inputs should be float64.
    """
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        probe = op(*inputs)
    R = torch.randn(probe.shape, generator=gen, dtype=probe.dtype)

    def scalar() -> torch.Tensor:
        return (op(*inputs) * R).sum()

    targets = [x for x in inputs if x.requires_grad]
    analytic = torch.autograd.grad(scalar(), targets, allow_unused=True)
    per_input, checked = [], 0
    for x, g in zip(targets, analytic):
        g = torch.zeros_like(x).reshape(-1) if g is None else g.reshape(-1)
        flat = x.data.view(-1)
        idx = np.arange(flat.numel())
        if max_entries is not None and len(idx) > max_entries:
            idx = rng.choice(idx, max_entries, replace=False)
        worst = 0.0
        for k in idx:
            orig = flat[k].item()
            with torch.no_grad():
                flat[k] = orig + eps
                f_plus = scalar().item()
                flat[k] = orig - eps
                f_minus = scalar().item()
                flat[k] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            worst = max(worst, relative_error(g[k].item(), numeric))
            checked += 1
        per_input.append(worst)
    max_err = max(per_input, default=0.0)
    return GradCheckReport(max_err <= tolerance, max_err, tolerance, checked, per_input)


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, tensors: "OrderedDict[str, torch.Tensor] | dict") -> None:
    """``CKPT`` | version u32 | count u32 | per tensor: name, rank, dims, float32 data (LE)."""
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, tensor in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(torch.as_tensor(tensor).detach().cpu().numpy(), dtype="<f4")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> "OrderedDict[str, np.ndarray]":
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    if data[:4] != CKPT_MAGIC:
        raise DataError(f"{path}: not a CKPT file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos, out = 12, OrderedDict()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", data, pos)
            dims = struct.unpack_from(f"<{rank}I", data, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims).copy()
            pos += 4 * size
    except (struct.error, ValueError):
        raise DataError(f"{path}: truncated checkpoint") from None
    return out


def load_state(module: nn.Module, tensors: dict) -> None:
    state = module.state_dict()
    missing = sorted(set(state) - set(tensors))
    if missing:
        raise DataError(f"checkpoint lacks tensor {missing[0]}")
    for name, current in state.items():
        value = torch.from_numpy(np.asarray(tensors[name]))
        if tuple(value.shape) != tuple(current.shape):
            raise DataError(f"checkpoint tensor {name} has shape {tuple(value.shape)}, expected {tuple(current.shape)}")
        state[name] = value.to(current.dtype)
    module.load_state_dict(state)
