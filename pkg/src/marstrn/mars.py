"""Multi-view attention regularization.

For each encoder block the attention maps of the two views of a positive pair
are pose-normalized (inverse geometric transform at block resolution), reduced
to C/r channels by a per-block 1x1 convolution shared by both views, and
embedded by three block-specific mini heads: a channel head over GeM-pooled
maps and two spatial heads over height- and width-pooled maps. The views are
aligned with cosine losses on those embeddings.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .backbone import GeM, ModelConfig, ModelConfigError
from .transforms import (TransformSpec, invert_geometric, rescale_to_resolution, valid_mask, warp,
                         warp_batch)

log = logging.getLogger(__name__)

COSINE_EPS = 1e-8


class DegenerateEmbeddingError(FloatingPointError):
    """Raised when a cosine comparison meets a (near) zero-norm vector."""


def cosine_loss(z1: torch.Tensor, z2: torch.Tensor, eps: float = COSINE_EPS) -> torch.Tensor:
    """``1 - cos(z1, z2)`` along the last dim; broadcasts over leading dims."""
    n1 = z1.norm(dim=-1)
    n2 = z2.norm(dim=-1)
    if bool((n1 < eps).any()) or bool((n2 < eps).any()):
        raise DegenerateEmbeddingError(f"embedding norm below {eps}; cosine loss undefined")
    return 1.0 - (z1 * z2).sum(dim=-1) / (n1 * n2)


def pose_normalize(attention: torch.Tensor, t: TransformSpec, with_mask: bool = False):
    """Undo the geometric part of ``t`` on a (..., C, H, W) attention map.

    Translation is rescaled from the transform's reference resolution to the
    map's own resolution. With ``with_mask`` the valid-pixel mask is returned too.
    """
    h, w = attention.shape[-2:]
    t_inv = rescale_to_resolution(invert_geometric(t), (h, w))
    out = warp(attention, t_inv)
    if with_mask:
        return out, valid_mask(rescale_to_resolution(t, (h, w)), (h, w))
    return out


def pose_normalize_batch(maps: torch.Tensor, transforms: Sequence[TransformSpec]) -> torch.Tensor:
    """:func:`pose_normalize` applied per sample of a (B, C, H, W) batch."""
    h, w = maps.shape[-2:]
    return warp_batch(maps, [rescale_to_resolution(invert_geometric(t), (h, w)) for t in transforms])


class MiniHead(nn.Module):
    """GeM over the spatial ``dims`` -> batch norm -> PReLU, no linear layer."""

    def __init__(self, channels: int, dims: Sequence[int], gem_p: float = 3.0):
        super().__init__()
        self.pool = GeM(gem_p, dims=tuple(dims))
        self.bn = nn.BatchNorm1d(channels)
        self.act = nn.PReLU()

    def forward(self, x):
        return self.act(self.bn(self.pool(x)))


@dataclass
class ReducedAttention:
    block_index: int
    tensor: torch.Tensor


class MarsBlockHead(nn.Module):
    """Reducer ``Conv_i`` plus mini heads ``gc_i``, ``gy_i``, ``gx_i`` for one block."""

    def __init__(self, channels: int, reduction_r: int = 4, gem_p: float = 3.0, block_index: int = 1):
        super().__init__()
        if channels % reduction_r:
            raise ModelConfigError(f"channels {channels} not divisible by reduction factor {reduction_r}")
        reduced = channels // reduction_r
        self.block_index = block_index
        self.reducer = nn.Conv2d(channels, reduced, kernel_size=1)
        self.gc = MiniHead(reduced, dims=(-2, -1), gem_p=gem_p)
        self.gy = MiniHead(reduced, dims=(-1,), gem_p=gem_p)
        self.gx = MiniHead(reduced, dims=(-1,), gem_p=gem_p)

    def reduce(self, normalized: torch.Tensor) -> torch.Tensor:
        return self.reducer(normalized)

    def channel_embed(self, reduced: torch.Tensor) -> torch.Tensor:
        return self.gc(reduced)

    def spatial_embed(self, reduced: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        hy = reduced.mean(dim=-2)  # Ypool: over height -> (B, C/r, W)
        hx = reduced.mean(dim=-1)  # Xpool: over width  -> (B, C/r, H)
        return self.gy(hy), self.gx(hx)

    def _pairwise(self, r1, r2):
        # both views share one pass so batch-norm statistics cover the pair
        n = r1.shape[0]
        both = torch.cat([r1, r2], dim=0)
        zc = self.channel_embed(both)
        zy, zx = self.spatial_embed(both)
        return (zc[:n], zc[n:]), (zy[:n], zy[n:]), (zx[:n], zx[n:])

    def chmars(self, r1, r2) -> torch.Tensor:
        """Per-pair channel loss for reduced maps of shape (P, C/r, H, W)."""
        n = r1.shape[0]
        zc = self.channel_embed(torch.cat([r1, r2], dim=0))
        return cosine_loss(zc[:n], zc[n:])

    def spmars(self, r1, r2) -> torch.Tensor:
        n = r1.shape[0]
        zy, zx = self.spatial_embed(torch.cat([r1, r2], dim=0))
        return cosine_loss(zy[:n], zy[n:]) + cosine_loss(zx[:n], zx[n:])

    def terms(self, r1, r2) -> tuple[torch.Tensor, torch.Tensor]:
        (c1, c2), (y1, y2), (x1, x2) = self._pairwise(r1, r2)
        return cosine_loss(c1, c2), cosine_loss(y1, y2) + cosine_loss(x1, x2)

    def mars_loss(self, r1, r2, gamma_ch: float, gamma_sp: float) -> torch.Tensor:
        ch, sp = self.terms(r1, r2)
        return gamma_ch * ch + gamma_sp * sp


@dataclass
class MarsLossRecord:
    ch: list[float] = field(default_factory=list)
    sp: list[float] = field(default_factory=list)
    mars: list[float] = field(default_factory=list)
    total: float = 0.0
    step: int = -1
    epoch: int = -1


def twin_pairs(ap: Sequence[int], p: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Unordered, de-duplicated (ap, p) pairs in first-seen order."""
    seen = set()
    a_out, p_out = [], []
    for a, b in zip(np.asarray(ap).tolist(), np.asarray(p).tolist()):
        key = (min(a, b), max(a, b))
        if a == b or key in seen:
            continue
        seen.add(key)
        a_out.append(key[0])
        p_out.append(key[1])
    return np.asarray(a_out, dtype=np.int64), np.asarray(p_out, dtype=np.int64)


class MarsRegularizer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.gamma_ch = config.gamma_ch
        self.gamma_sp = config.gamma_sp
        self.heads = nn.ModuleList(
            MarsBlockHead(c, config.reduction_r, config.gem_p_init, block_index=i + 1)
            for i, c in enumerate(config.channels))

    def normalize_and_reduce(self, block: int, maps: torch.Tensor,
                             transforms: Sequence[TransformSpec]) -> torch.Tensor:
        normed = pose_normalize_batch(maps, transforms)
        return self.heads[block].reduce(normed)

    def forward(self, attention_maps: Sequence[torch.Tensor], transforms: Sequence[TransformSpec],
                ap: Sequence[int], p: Sequence[int]):
        """Sum over blocks of the pair-averaged MARs term.

        Returns ``(total, ch_per_block, sp_per_block)``; per-block values are
        unweighted pair means as tensors.
        """
        a_idx, p_idx = twin_pairs(ap, p)
        n_blocks = len(self.heads)
        if len(a_idx) == 0:
            log.warning("no positive pairs mined; MARs term is 0")
            zero = attention_maps[0].new_zeros(())
            return zero, [zero] * n_blocks, [zero] * n_blocks
        views = np.concatenate([a_idx, p_idx])
        view_t = [transforms[k] for k in views]
        total = attention_maps[0].new_zeros(())
        chs, sps = [], []
        n = len(a_idx)
        sel = torch.from_numpy(views)
        for i, head in enumerate(self.heads):
            reduced = self.normalize_and_reduce(i, attention_maps[i].index_select(0, sel), view_t)
            ch, sp = head.terms(reduced[:n], reduced[n:])
            ch, sp = ch.mean(), sp.mean()
            chs.append(ch)
            sps.append(sp)
            total = total + self.gamma_ch * ch + self.gamma_sp * sp
        return total, chs, sps


def total_objective(ml_loss_fn, embeddings, labels, mined, attention_maps=None, transforms=None,
                    regularizer: MarsRegularizer | None = None, twins=None):
    """Metric-learning loss plus, when a regularizer is given, the summed per-block MARs terms.

    MARs pairs are ``twins`` (an ``(ap, p)`` pair of index arrays) when given,
    otherwise the miner's positive pairs.
    """
    ml = ml_loss_fn(embeddings, labels, mined)
    record = MarsLossRecord()
    total = ml
    if regularizer is not None:
        ap, p = twins if twins is not None else (mined.ap, mined.p)
        mars, chs, sps = regularizer(attention_maps, transforms, ap, p)
        total = ml + mars
        record.ch = [float(c.detach()) for c in chs]
        record.sp = [float(s.detach()) for s in sps]
        record.mars = [regularizer.gamma_ch * c + regularizer.gamma_sp * s
                       for c, s in zip(record.ch, record.sp)]
    record.total = float(total.detach())
    return total, ml, record
