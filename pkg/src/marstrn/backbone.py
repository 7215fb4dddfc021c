"""Desk-scale ResNeXt-style encoder f(.) and GeM projection head g(.).

Convolutions are either ``nn.Conv2d`` or :class:`RICConv2d` (rotation-invariant
coordinate convolution), attention is either squeeze-and-excitation or
coordinate attention. Every block reports its post-attention feature tensor as
the block's attention map.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .transforms import apply_plan, bilinear_plan


class ModelConfigError(ValueError):
    pass


CONV_KINDS = ("standard", "ric")
ATTENTION_KINDS = ("se", "ca")


@dataclass
class ModelConfig:
    conv_kind: str = "ric"
    attention_kind: str = "ca"
    mars_enabled: bool = True
    num_blocks: int = 4
    channels: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    embedding_dim: int = 128
    gem_p_init: float = 3.0
    reduction_r: int = 4
    gamma_ch: float = 0.15
    gamma_sp: float = 0.15
    input_resolution: int = 64
    in_channels: int = 1
    cardinality: int = 4

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]
        self.validate()

    def validate(self):
        if self.conv_kind not in CONV_KINDS:
            raise ModelConfigError(f"conv_kind must be one of {CONV_KINDS}, got {self.conv_kind!r}")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ModelConfigError(
                f"attention_kind must be one of {ATTENTION_KINDS}, got {self.attention_kind!r}")
        if self.num_blocks < 1 or len(self.channels) != self.num_blocks:
            raise ModelConfigError(
                f"need num_blocks >= 1 channel counts, got num_blocks={self.num_blocks}, "
                f"channels={self.channels}")
        if any(c <= 0 for c in self.channels):
            raise ModelConfigError("channel counts must be positive")
        if self.mars_enabled and self.attention_kind != "ca":
            raise ModelConfigError("MARs requires coordinate attention (attention_kind='ca')")
        if self.reduction_r < 1 or any(c % self.reduction_r for c in self.channels):
            raise ModelConfigError(
                f"reduction_r={self.reduction_r} must divide every block channel count {self.channels}")
        if self.gem_p_init < 1:
            raise ModelConfigError("gem_p_init must be >= 1")
        if self.gamma_ch < 0 or self.gamma_sp < 0:
            raise ModelConfigError("gamma weights must be >= 0")
        if self.input_resolution % (2 ** (self.num_blocks + 1)):
            raise ModelConfigError(
                f"input_resolution {self.input_resolution} must be divisible by 2**(num_blocks+1)")
        if any(c % (2 * self.cardinality) for c in self.channels):
            raise ModelConfigError("channel counts must be divisible by 2 * cardinality")

    @classmethod
    def variant(cls, name: str, **overrides) -> "ModelConfig":
        """The three evaluated variants: ``conv2d_se``, ``ric_ca`` and ``mars``."""
        presets = {
            "conv2d_se": dict(conv_kind="standard", attention_kind="se", mars_enabled=False),
            "ric_ca": dict(conv_kind="ric", attention_kind="ca", mars_enabled=False),
            "mars": dict(conv_kind="ric", attention_kind="ca", mars_enabled=True),
        }
        if name not in presets:
            raise ModelConfigError(f"unknown variant {name!r}; expected one of {sorted(presets)}")
        return cls(**{**presets[name], **overrides})

    def block_shapes(self) -> list[tuple[int, int, int]]:
        res = self.input_resolution // 2
        shapes = []
        for c in self.channels:
            res //= 2
            shapes.append((c, res, res))
        return shapes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ModelConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class RICConv2d(nn.Module):
    """Rotation-invariant coordinate convolution.

    At output location ``p`` the k x k sampling grid is rotated by the polar
    angle of ``p`` about the feature-map centre and sampled bilinearly. Output
    positions map onto input positions about the shared centre, so quarter-turn
    rotations of the input rotate the output exactly (up to floating point),
    strided layers included. The exact centre pixel of odd maps keeps the
    axis-aligned grid.

    Weights have the standard ``(out, in/groups, k, k)`` shape.
    """

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=None,
                 groups=1, bias=True):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ModelConfigError(f"RIC convolution needs an odd kernel size, got {kernel_size}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = (kernel_size - 1) // 2 if padding is None else padding
        self.groups = groups
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels // groups, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.empty(out_channels)) if bias else None
        self._plans: dict = {}
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        if self.bias is not None:
            fan_in = self.weight[0].numel()
            bound = 1 / math.sqrt(fan_in)
            nn.init.uniform_(self.bias, -bound, bound)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel_size, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def sampling_positions(self, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
        """Input positions (x, y), shape (Ho*k, Wo*k), laid out tap-major inside each cell."""
        k, s = self.kernel_size, self.stride
        ho, wo = self.output_size(h, w)
        cin_x, cin_y = (w - 1) / 2.0, (h - 1) / 2.0
        cout_x, cout_y = (wo - 1) / 2.0, (ho - 1) / 2.0
        oy, ox = np.meshgrid(np.arange(ho, dtype=np.float64), np.arange(wo, dtype=np.float64), indexing="ij")
        rx, ry = ox - cout_x, oy - cout_y
        theta = np.arctan2(ry, rx)
        theta[(rx == 0) & (ry == 0)] = 0.0
        cos, sin = np.cos(theta), np.sin(theta)
        px = rx * s + cin_x
        py = ry * s + cin_y
        offs = np.arange(k, dtype=np.float64) - (k - 1) / 2.0
        dy, dx = np.meshgrid(offs, offs, indexing="ij")
        # (ho, wo, k, k)
        sx = px[..., None, None] + cos[..., None, None] * dx - sin[..., None, None] * dy
        sy = py[..., None, None] + sin[..., None, None] * dx + cos[..., None, None] * dy
        sx = sx.transpose(0, 2, 1, 3).reshape(ho * k, wo * k)
        sy = sy.transpose(0, 2, 1, 3).reshape(ho * k, wo * k)
        return sx, sy

    def forward(self, x):
        h, w = x.shape[-2:]
        if self.kernel_size == 1 and self.stride == 1 and self.padding == 0:
            return F.conv2d(x, self.weight, self.bias, groups=self.groups)
        key = (h, w)
        if key not in self._plans:
            sx, sy = self.sampling_positions(h, w)
            self._plans[key] = (bilinear_plan(sx, sy, h, w), sx.shape)
        plan, shape = self._plans[key]
        sampled = apply_plan(x, plan, shape)
        return F.conv2d(sampled, self.weight, self.bias, stride=self.kernel_size, groups=self.groups)

    def extra_repr(self):
        return (f"{self.in_channels}, {self.out_channels}, kernel_size={self.kernel_size}, "
                f"stride={self.stride}, groups={self.groups}")


def ric_conv_forward(feature, weight, stride=1, padding=None, bias=None, groups=1):
    """Functional RIC convolution on a (B, C, H, W) or (C, H, W) tensor."""
    squeeze = feature.dim() == 3
    if squeeze:
        feature = feature[None]
    out_c, in_per_group, k, _ = weight.shape
    conv = RICConv2d(in_per_group * groups, out_c, k, stride, padding, groups, bias=bias is not None)
    with torch.no_grad():
        conv.weight.data = weight.detach().clone()
        if bias is not None:
            conv.bias.data = bias.detach().clone()
    out = conv.to(feature.dtype)(feature)
    return out[0] if squeeze else out


def make_conv(kind, in_channels, out_channels, kernel_size, stride=1, groups=1, bias=False):
    padding = (kernel_size - 1) // 2
    if kind == "ric":
        return RICConv2d(in_channels, out_channels, kernel_size, stride, padding, groups, bias)
    return nn.Conv2d(in_channels, out_channels, kernel_size, stride, padding, groups=groups, bias=bias)


class SEAttention(nn.Module):
    def __init__(self, channels, reduction=4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        nn.init.zeros_(self.fc1.bias)
        nn.init.zeros_(self.fc2.bias)

    def gates(self, x):
        s = x.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(s))))[:, :, None, None]

    def forward(self, x):
        gated = x * self.gates(x)
        return gated, gated


class CAAttention(nn.Module):
    """Coordinate attention: height- and width-pooled descriptors through a shared bottleneck."""

    def __init__(self, channels, reduction=8, min_hidden=8):
        super().__init__()
        hidden = max(min_hidden, channels // reduction)
        self.conv1 = nn.Conv2d(channels, hidden, 1)
        self.bn1 = nn.BatchNorm2d(hidden)
        self.conv_h = nn.Conv2d(hidden, channels, 1)
        self.conv_w = nn.Conv2d(hidden, channels, 1)

    def gates(self, x):
        h, w = x.shape[-2:]
        pooled_h = x.mean(dim=3, keepdim=True)                  # B, C, H, 1
        pooled_w = x.mean(dim=2, keepdim=True).transpose(2, 3)  # B, C, W, 1
        y = torch.cat([pooled_h, pooled_w], dim=2)
        y = F.hardswish(self.bn1(self.conv1(y)))
        y_h, y_w = torch.split(y, [h, w], dim=2)
        gate_h = torch.sigmoid(self.conv_h(y_h))                  # B, C, H, 1
        gate_w = torch.sigmoid(self.conv_w(y_w.transpose(2, 3)))  # B, C, 1, W
        return gate_h, gate_w

    def forward(self, x):
        gate_h, gate_w = self.gates(x)
        gated = x * gate_h * gate_w
        return gated, gated


def se_attention(module: SEAttention, feature):
    return module(feature)


def ca_attention(module: CAAttention, feature):
    return module(feature)


def gem_pool(x, p, eps=1e-6, dims=(-2, -1)):
    """Generalized mean over ``dims``: (mean x^p)^(1/p) with x clamped at ``eps``."""
    if isinstance(p, torch.Tensor):
        if torch.any(p.detach() < 1):
            raise ModelConfigError(f"GeM exponent must be >= 1, got {p.detach().tolist()}")
    elif p < 1:
        raise ModelConfigError(f"GeM exponent must be >= 1, got {p}")
    return x.clamp(min=eps).pow(p).mean(dim=dims).pow(1.0 / p)


class GeM(nn.Module):
    def __init__(self, p=3.0, eps=1e-6, dims=(-2, -1)):
        super().__init__()
        if p < 1:
            raise ModelConfigError(f"GeM exponent must be >= 1, got {p}")
        self.p = nn.Parameter(torch.ones(1) * p)
        self.eps = eps
        self.dims = dims

    def forward(self, x):
        # the learnable exponent is kept >= 1 by clamping rather than raising mid-training
        return gem_pool(x, self.p.clamp(min=1.0), self.eps, self.dims)

    def extra_repr(self):
        return f"p={self.p.item():.4f}, eps={self.eps}"


class ResNeXtBlock(nn.Module):
    """Bottleneck block with grouped 3x3 conv, stride 2, attention before the residual sum."""

    def __init__(self, in_channels, out_channels, conv_kind, attention_kind, cardinality=4, stride=2):
        super().__init__()
        width = out_channels // 2
        self.conv1 = make_conv(conv_kind, in_channels, width, 1)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = make_conv(conv_kind, width, width, 3, stride=stride, groups=cardinality)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = make_conv(conv_kind, width, out_channels, 1)
        self.bn3 = nn.BatchNorm2d(out_channels)
        self.attention = SEAttention(out_channels) if attention_kind == "se" else CAAttention(out_channels)
        self.shortcut = nn.Sequential(
            make_conv(conv_kind, in_channels, out_channels, 1, stride=stride),
            nn.BatchNorm2d(out_channels),
        )

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = F.relu(self.bn2(self.conv2(y)))
        y = self.bn3(self.conv3(y))
        y, attention_map = self.attention(y)
        return F.relu(y + self.shortcut(x)), attention_map


class Encoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c0 = config.channels[0]
        self.stem = nn.Sequential(
            make_conv(config.conv_kind, config.in_channels, c0, 3, stride=2),
            nn.BatchNorm2d(c0),
            nn.ReLU(),
        )
        blocks = []
        in_c = c0
        for c in config.channels:
            blocks.append(ResNeXtBlock(in_c, c, config.conv_kind, config.attention_kind, config.cardinality))
            in_c = c
        self.blocks = nn.ModuleList(blocks)

    def forward(self, images):
        res = self.config.input_resolution
        if images.dim() != 4 or tuple(images.shape[1:]) != (self.config.in_channels, res, res):
            raise ValueError(
                f"expected images of shape (B, {self.config.in_channels}, {res}, {res}), "
                f"got {tuple(images.shape)}")
        x = self.stem(images)
        attention_maps = []
        for block in self.blocks:
            x, a = block(x)
            attention_maps.append(a)
        return x, attention_maps


class ProjectionHead(nn.Module):
    """GeM -> linear -> batch norm -> PReLU."""

    def __init__(self, in_channels, embedding_dim, gem_p=3.0):
        super().__init__()
        self.pool = GeM(gem_p)
        self.linear = nn.Linear(in_channels, embedding_dim)
        self.bn = nn.BatchNorm1d(embedding_dim)
        self.act = nn.PReLU()

    def forward(self, h):
        return self.act(self.bn(self.linear(self.pool(h))))
