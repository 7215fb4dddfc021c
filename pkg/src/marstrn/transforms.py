"""Augmentation family: brightness, rotation and translation, plus inverses.

Geometric convention (pixel coordinates, x = column, y = row, origin at the
top-left pixel centre, rotation about ``c = ((W-1)/2, (H-1)/2)``): the forward
warp moves a source point ``u`` to ``R(u + d - c) + c``, i.e. translate then
rotate. Positive angles rotate counter-clockwise as displayed, so a 90 degree
rotation matches ``numpy.rot90``. The inverse of a spec is again expressed in
the translate-then-rotate form with angle ``-theta`` and translation
``-R d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch


class TransformConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TransformRanges:
    brightness: tuple[float, float] = (0.6, 1.4)
    rotation: tuple[float, float] = (0.0, 360.0)
    max_translate_frac: float = 0.1
    ref_resolution: tuple[int, int] = (64, 64)

    def __post_init__(self):
        b_lo, b_hi = self.brightness
        if not (0 < b_lo <= b_hi):
            raise TransformConfigError(f"brightness range must satisfy 0 < lo <= hi, got {self.brightness}")
        r_lo, r_hi = self.rotation
        if not (0 <= r_lo <= r_hi <= 360):
            raise TransformConfigError(f"rotation range must lie in [0, 360], got {self.rotation}")
        if not (0 <= self.max_translate_frac <= 0.25):
            raise TransformConfigError(
                f"max_translate_frac must lie in [0, 0.25], got {self.max_translate_frac}")
        if min(self.ref_resolution) < 1:
            raise TransformConfigError(f"bad ref_resolution {self.ref_resolution}")

    def restricted(self, subset: str) -> "TransformRanges":
        """Keep a single component of the family (used by the ablation driver)."""
        if subset == "all":
            return self
        identity = replace(self, brightness=(1.0, 1.0), rotation=(0.0, 0.0), max_translate_frac=0.0)
        if subset == "identity":
            return identity
        if subset == "brightness":
            return replace(identity, brightness=self.brightness)
        if subset == "rotation":
            return replace(identity, rotation=self.rotation)
        if subset == "translation":
            return replace(identity, max_translate_frac=self.max_translate_frac)
        raise TransformConfigError(
            f"unknown transform subset {subset!r}; expected one of {TRANSFORM_SUBSETS}")


TRANSFORM_SUBSETS = ("all", "brightness", "rotation", "translation", "identity")


def _wrap_deg(angle: float) -> float:
    a = float(angle) % 360.0
    return 0.0 if a >= 360.0 else a


@dataclass(frozen=True)
class TransformSpec:
    brightness_factor: float = 1.0
    rotation_deg: float = 0.0
    translate_x: float = 0.0
    translate_y: float = 0.0
    ref_resolution: tuple[int, int] = field(default=(64, 64))

    def __post_init__(self):
        if not self.brightness_factor > 0:
            raise TransformConfigError(f"brightness_factor must be > 0, got {self.brightness_factor}")
        object.__setattr__(self, "rotation_deg", _wrap_deg(self.rotation_deg))
        object.__setattr__(self, "ref_resolution", tuple(int(v) for v in self.ref_resolution))

    @property
    def is_geometric_identity(self) -> bool:
        return self.rotation_deg == 0.0 and self.translate_x == 0.0 and self.translate_y == 0.0

    @property
    def is_identity(self) -> bool:
        return self.is_geometric_identity and self.brightness_factor == 1.0

    def to_dict(self) -> dict:
        return {
            "brightness_factor": self.brightness_factor,
            "rotation_deg": self.rotation_deg,
            "translate_x": self.translate_x,
            "translate_y": self.translate_y,
            "ref_resolution": list(self.ref_resolution),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransformSpec":
        return cls(
            brightness_factor=float(d.get("brightness_factor", 1.0)),
            rotation_deg=float(d.get("rotation_deg", 0.0)),
            translate_x=float(d.get("translate_x", 0.0)),
            translate_y=float(d.get("translate_y", 0.0)),
            ref_resolution=tuple(d.get("ref_resolution", (64, 64))),
        )


def sample_transform(rng_seed: int, config: TransformRanges | None = None) -> TransformSpec:
    """Draw one spec uniformly from the configured ranges. Same seed, same spec."""
    config = config or TransformRanges()
    rng = np.random.default_rng(rng_seed)
    b = rng.uniform(*config.brightness)
    rot = rng.uniform(*config.rotation)
    h, w = config.ref_resolution
    tx = rng.uniform(-1.0, 1.0) * config.max_translate_frac * w
    ty = rng.uniform(-1.0, 1.0) * config.max_translate_frac * h
    return TransformSpec(float(b), float(rot), float(tx), float(ty), config.ref_resolution)


def _rotation(deg: float) -> tuple[float, float]:
    if deg % 90.0 == 0.0:
        # exact values keep quarter-turns free of 1e-17 leakage
        k = int(deg // 90.0) % 4
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][k]
    rad = math.radians(deg)
    return math.cos(rad), math.sin(rad)


def invert_geometric(t: TransformSpec) -> TransformSpec:
    # forward rotation matrix R = [[cos, sin], [-sin, cos]] in (x, y-down)
    cos, sin = _rotation(t.rotation_deg)
    dx, dy = t.translate_x, t.translate_y
    inv_dx = -(cos * dx + sin * dy)
    inv_dy = -(-sin * dx + cos * dy)
    return TransformSpec(1.0, _wrap_deg(360.0 - t.rotation_deg), inv_dx + 0.0, inv_dy + 0.0,
                         t.ref_resolution)


def rescale_to_resolution(t: TransformSpec, target: Sequence[int]) -> TransformSpec:
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise ValueError(f"target resolution must be >= 1 in both dims, got {target}")
    rh, rw = t.ref_resolution
    return TransformSpec(t.brightness_factor, t.rotation_deg,
                         t.translate_x * tw / rw, t.translate_y * th / rh, (th, tw))


def _at_resolution(t: TransformSpec, h: int, w: int) -> TransformSpec:
    if tuple(t.ref_resolution) == (h, w):
        return t
    return rescale_to_resolution(t, (h, w))


def source_coords(t: TransformSpec, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Source sampling positions (x, y) for every output pixel of the forward warp."""
    t = _at_resolution(t, h, w)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    cos, sin = _rotation(t.rotation_deg)
    qx, qy = xs - cx, ys - cy
    # R^-1 = [[cos, -sin], [sin, cos]]
    sx = cos * qx - sin * qy + cx - t.translate_x
    sy = sin * qx + cos * qy + cy - t.translate_y
    return sx, sy


def forward_coords(t: TransformSpec, h: int, w: int,
                   xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Where the forward warp sends source points (xs, ys)."""
    t = _at_resolution(t, h, w)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    cos, sin = _rotation(t.rotation_deg)
    ux, uy = xs + t.translate_x - cx, ys + t.translate_y - cy
    return cos * ux + sin * uy + cx, -sin * ux + cos * uy + cy


def bilinear_plan(sx: np.ndarray, sy: np.ndarray, h: int, w: int):
    """Precompute the four (flat index, weight) pairs of bilinear sampling on an H x W grid."""
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    plan = []
    for ox, oy, wgt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                        (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi = x0.astype(np.int64) + ox
        yi = y0.astype(np.int64) + oy
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)
        plan.append((torch.from_numpy(idx.reshape(-1)), torch.from_numpy((wgt * inside).reshape(-1))))
    return plan


def apply_plan(x: torch.Tensor, plan, out_shape: Sequence[int]) -> torch.Tensor:
    h, w = x.shape[-2:]
    flat = x.reshape(-1, h * w)
    out = None
    for idx, wgt in plan:
        term = flat.index_select(1, idx) * wgt.to(x.dtype)
        out = term if out is None else out + term
    return out.reshape(*x.shape[:-2], *out_shape)


def bilinear_sample(x: torch.Tensor, sx: np.ndarray, sy: np.ndarray) -> torch.Tensor:
    """Sample ``x[..., H, W]`` at pixel positions ``(sx, sy)`` with zero fill outside.

    Integer positions reproduce the input exactly.
    """
    h, w = x.shape[-2:]
    return apply_plan(x, bilinear_plan(np.asarray(sx), np.asarray(sy), h, w), np.shape(sx))


def warp(x: torch.Tensor, t: TransformSpec) -> torch.Tensor:
    """Geometric part of ``t`` applied to every channel of ``x[..., H, W]``."""
    if t.is_geometric_identity:
        return x
    h, w = x.shape[-2:]
    sx, sy = source_coords(t, h, w)
    return bilinear_sample(x, sx, sy)


def warp_batch(x: torch.Tensor, transforms: Sequence[TransformSpec]) -> torch.Tensor:
    """Per-sample :func:`warp` of ``x[B, C, H, W]`` in one gather."""
    b, c, h, w = x.shape
    if len(transforms) != b:
        raise ValueError(f"{len(transforms)} transforms for a batch of {b}")
    if all(t.is_geometric_identity for t in transforms):
        return x
    coords = [source_coords(t, h, w) for t in transforms]
    sx = np.stack([cx for cx, _ in coords])
    sy = np.stack([cy for _, cy in coords])
    flat = x.reshape(b, c, h * w)
    out = None
    for idx, wgt in bilinear_plan(sx, sy, h, w):
        idx = idx.view(b, 1, h * w).expand(b, c, h * w)
        term = flat.gather(2, idx) * wgt.view(b, 1, h * w).to(x.dtype)
        out = term if out is None else out + term
    return out.reshape(b, c, h, w)


def apply_transform(image, t: TransformSpec, clip: tuple[float, float] = (0.0, 1.0)):
    """Brightness (multiplicative, clipped) followed by the geometric warp.

    Accepts numpy arrays or tensors shaped (H, W) or (C, H, W); returns the same type.
    """
    as_numpy = isinstance(image, np.ndarray)
    x = torch.from_numpy(np.asarray(image)) if as_numpy else image
    if x.numel() == 0:
        raise ValueError("cannot transform an empty image")
    if x.shape[-1] != x.shape[-2]:
        raise ValueError(f"patches must be square, got {tuple(x.shape[-2:])}")
    if t.brightness_factor != 1.0:
        x = (x * t.brightness_factor).clamp(*clip)
    x = warp(x, t)
    return x.numpy() if as_numpy else x


def valid_mask(t: TransformSpec, res: Sequence[int], tol: float = 1e-6) -> np.ndarray:
    """Pixels that survive forward-then-inverse warping without touching the fill value."""
    h, w = int(res[0]), int(res[1])
    if t.is_geometric_identity:
        return np.ones((h, w), dtype=bool)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    # the inverse warp reads the transformed image at M(q)
    mx, my = forward_coords(t, h, w, xs, ys)
    ok = np.ones((h, w), dtype=bool)
    x0, y0 = np.floor(mx), np.floor(my)
    fx, fy = mx - x0, my - y0
    t_inv = invert_geometric(_at_resolution(t, h, w))
    for ox, oy, wgt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                        (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        used = wgt > 1e-12
        rx, ry = x0 + ox, y0 + oy
        inside = (rx >= 0) & (rx <= w - 1) & (ry >= 0) & (ry <= h - 1)
        # transformed pixel r is clean iff its own source position lies in the support
        px, py = forward_coords(t_inv, h, w, rx, ry)
        clean = (px >= -tol) & (px <= w - 1 + tol) & (py >= -tol) & (py <= h - 1 + tol)
        ok &= ~used | (inside & clean)
    return ok
