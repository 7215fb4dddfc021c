"""Two-view batches, multi-similarity mining and the metric-learning losses.

All losses share ``loss(embeddings, labels, mined=None)``; cosine-geometry
losses L2-normalize internally, so raw projection outputs can be passed in.
"""

from __future__ import annotations

import inspect
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .transforms import TransformRanges, TransformSpec, apply_transform, sample_transform

log = logging.getLogger(__name__)


@dataclass
class PairBatch:
    images: np.ndarray          # (B, 1, H, W) float32
    labels: np.ndarray          # (B,) contiguous label indices
    transforms: list[TransformSpec]
    twin_index: np.ndarray      # view -> sibling view
    instance_ids: list

    def __len__(self):
        return len(self.labels)


@dataclass
class MinedIndices:
    ap: np.ndarray
    p: np.ndarray
    an: np.ndarray
    n: np.ndarray


def build_pair_batch(dataset, batch_size: int, rng_seed: int, ranges: TransformRanges | None = None,
                     labels: Sequence[int] | None = None, captures: Sequence[int] | None = None) -> PairBatch:
    """Sample B/2 distinct instances and augment each twice.

    Views ``k`` and ``k + B/2`` are twins. ``labels`` fixes the instances
    (used by the epoch iterator); otherwise they are drawn without replacement.
    ``captures`` picks which image of each instance is used (random otherwise).
    """
    if batch_size < 2 or batch_size % 2:
        raise ValueError(f"batch size must be even and >= 2, got {batch_size}")
    half = batch_size // 2
    rng = np.random.default_rng(rng_seed)
    if labels is None:
        if len(dataset) < half:
            raise ValueError(f"dataset has {len(dataset)} instances, need at least {half}")
        labels = rng.choice(len(dataset), size=half, replace=False)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != half:
        raise ValueError(f"expected {half} instances, got {len(labels)}")
    ranges = ranges or TransformRanges(ref_resolution=(dataset.resolution, dataset.resolution))
    if captures is not None:
        if len(captures) != half:
            raise ValueError("captures must align with labels")
        sources = [dataset.image(int(lbl), int(k)) for lbl, k in zip(labels, captures)]
    else:
        sources = [dataset.sample_image(int(lbl), rng) for lbl in labels]
    seeds = rng.integers(0, 2**63 - 1, size=batch_size)
    transforms = [sample_transform(int(s), ranges) for s in seeds]
    views = [apply_transform(sources[k % half], transforms[k]) for k in range(batch_size)]
    all_labels = np.concatenate([labels, labels])
    twin = (np.arange(batch_size) + half) % batch_size
    return PairBatch(
        images=np.stack(views)[:, None].astype(np.float32),
        labels=all_labels,
        transforms=transforms,
        twin_index=twin,
        instance_ids=[dataset.instance_ids[i] for i in all_labels],
    )


def _cosine_matrix(embeddings: torch.Tensor) -> torch.Tensor:
    z = F.normalize(embeddings, dim=1)
    return z @ z.T


@torch.no_grad()
def ms_mine(embeddings, labels, epsilon: float = 0.1) -> MinedIndices:
    """Multi-similarity mining.

    Positives are all same-label ordered pairs (the augmented twins). A
    cross-label pair (a, n) is kept when ``sim(a, n) > min_pos_sim(a) - epsilon``.
    """
    emb = torch.as_tensor(embeddings).detach().double()
    labels = np.asarray(labels)
    sim = _cosine_matrix(emb).numpy()
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    diff = labels[:, None] != labels[None, :]
    ap, p = np.nonzero(same)
    an, n = [], []
    for a in range(len(labels)):
        if not same[a].any():
            continue
        hardest = sim[a][same[a]].min()
        keep = np.nonzero(diff[a] & (sim[a] > hardest - epsilon))[0]
        an.extend([a] * len(keep))
        n.extend(keep.tolist())
    if not diff.any():
        log.warning("single-label batch: no negative pairs can be mined")
    return MinedIndices(ap.astype(np.int64), p.astype(np.int64),
                        np.asarray(an, dtype=np.int64), np.asarray(n, dtype=np.int64))


def all_pairs(labels) -> MinedIndices:
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    ap, p = np.nonzero(same)
    an, n = np.nonzero(labels[:, None] != labels[None, :])
    return MinedIndices(ap, p, an, n)


def _check_batch(embeddings, labels):
    if embeddings.shape[0] == 0:
        raise ValueError("empty batch")
    if len(labels) != embeddings.shape[0]:
        raise ValueError("labels and embeddings disagree in length")


class NTXentLoss(nn.Module):
    def __init__(self, temperature: float = 0.07):
        super().__init__()
        self.temperature = temperature

    def forward(self, embeddings, labels, mined: MinedIndices | None = None):
        _check_batch(embeddings, labels)
        mined = mined if mined is not None else all_pairs(labels)
        if len(mined.ap) == 0:
            return embeddings.sum() * 0
        sim = _cosine_matrix(embeddings) / self.temperature
        bsz = embeddings.shape[0]
        neg = torch.zeros(bsz, bsz, dtype=torch.bool)
        if len(mined.an):
            neg[torch.as_tensor(mined.an), torch.as_tensor(mined.n)] = True
        ap = torch.as_tensor(mined.ap)
        p = torch.as_tensor(mined.p)
        mask = neg[ap].clone()
        mask[torch.arange(len(ap)), p] = True
        rows = sim[ap].masked_fill(~mask, -math.inf)
        pos = sim[ap, p]
        return (torch.logsumexp(rows, dim=1) - pos).mean()


class SupConLoss(nn.Module):
    def __init__(self, temperature: float = 0.1):
        super().__init__()
        self.temperature = temperature

    def forward(self, embeddings, labels, mined: MinedIndices | None = None):
        _check_batch(embeddings, labels)
        labels_t = torch.as_tensor(np.asarray(labels))
        sim = _cosine_matrix(embeddings) / self.temperature
        bsz = embeddings.shape[0]
        eye = torch.eye(bsz, dtype=torch.bool)
        pos = (labels_t[:, None] == labels_t[None, :]) & ~eye
        log_prob = sim - torch.logsumexp(sim.masked_fill(eye, -math.inf), dim=1, keepdim=True)
        has_pos = pos.any(dim=1)
        if not bool(has_pos.any()):
            return embeddings.sum() * 0
        per_anchor = -(log_prob * pos).sum(dim=1)[has_pos] / pos.sum(dim=1)[has_pos]
        return per_anchor.mean()


class ProxyAnchorLoss(nn.Module):
    """Proxy Anchor: one learnable proxy per training instance."""

    def __init__(self, num_classes: int, embedding_dim: int, margin: float = 0.1, alpha: float = 32.0):
        super().__init__()
        self.num_classes = num_classes
        self.margin = margin
        self.alpha = alpha
        self.proxies = nn.Parameter(torch.randn(num_classes, embedding_dim))
        nn.init.kaiming_normal_(self.proxies, mode="fan_out")

    def forward(self, embeddings, labels, mined: MinedIndices | None = None):
        return _proxy_anchor(embeddings, labels, self.proxies, self.margin, self.alpha)


def _proxy_anchor(embeddings, labels, proxies, margin, alpha):
    _check_batch(embeddings, labels)
    num_classes = proxies.shape[0]
    labels_t = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if bool(((labels_t < 0) | (labels_t >= num_classes)).any()):
        raise ValueError(f"labels outside [0, {num_classes}) have no proxy")
    cos = F.normalize(embeddings, dim=1) @ F.normalize(proxies.to(embeddings.dtype), dim=1).T
    pos_mask = F.one_hot(labels_t, num_classes).bool()
    zero_row = cos.new_zeros(1, num_classes)
    pos_logits = (-alpha * (cos - margin)).masked_fill(~pos_mask, -math.inf)
    neg_logits = (alpha * (cos + margin)).masked_fill(pos_mask, -math.inf)
    # log(1 + sum exp) per proxy, over the samples of the batch
    pos_term = torch.logsumexp(torch.cat([zero_row, pos_logits]), dim=0)
    neg_term = torch.logsumexp(torch.cat([zero_row, neg_logits]), dim=0)
    with_pos = pos_mask.any(dim=0)
    return pos_term[with_pos].mean() + neg_term.mean()


class CircleLoss(nn.Module):
    def __init__(self, m: float = 0.4, gamma: float = 80.0):
        super().__init__()
        self.m = m
        self.gamma = gamma

    def forward(self, embeddings, labels, mined: MinedIndices | None = None):
        _check_batch(embeddings, labels)
        mined = mined if mined is not None else all_pairs(labels)
        sim = _cosine_matrix(embeddings)
        bsz = embeddings.shape[0]
        losses = []
        for a in range(bsz):
            sp = sim[a, torch.as_tensor(mined.p[mined.ap == a], dtype=torch.long)]
            sn = sim[a, torch.as_tensor(mined.n[mined.an == a], dtype=torch.long)]
            if len(sp) == 0 or len(sn) == 0:
                continue
            alpha_p = (1 + self.m - sp.detach()).clamp(min=0)
            alpha_n = (sn.detach() + self.m).clamp(min=0)
            lp = -self.gamma * alpha_p * (sp - (1 - self.m))
            ln = self.gamma * alpha_n * (sn - self.m)
            losses.append(F.softplus(torch.logsumexp(lp, 0) + torch.logsumexp(ln, 0)))
        if not losses:
            return embeddings.sum() * 0
        return torch.stack(losses).mean()


class ProxyNCAPPLoss(nn.Module):
    def __init__(self, num_classes: int, embedding_dim: int, temperature: float = 1 / 9):
        super().__init__()
        self.num_classes = num_classes
        self.temperature = temperature
        self.proxies = nn.Parameter(torch.randn(num_classes, embedding_dim) / 8)

    def forward(self, embeddings, labels, mined: MinedIndices | None = None):
        _check_batch(embeddings, labels)
        labels_t = torch.as_tensor(np.asarray(labels), dtype=torch.long)
        if bool(((labels_t < 0) | (labels_t >= self.num_classes)).any()):
            raise ValueError(f"labels outside [0, {self.num_classes}) have no proxy")
        z = F.normalize(embeddings, dim=1)
        prox = F.normalize(self.proxies.to(embeddings.dtype), dim=1)
        dist = torch.cdist(z, prox).pow(2)
        return F.cross_entropy(-dist / self.temperature, labels_t)


class LossNotAvailableError(KeyError):
    pass


MANDATORY_LOSSES = {
    "ntxent": NTXentLoss,
    "supcon": SupConLoss,
    "proxy_anchor": ProxyAnchorLoss,
}
OPTIONAL_LOSSES = {
    "circle": CircleLoss,
    "proxy_nca_pp": ProxyNCAPPLoss,
    # known names without an implementation in this build
    "dr_ms": None,
    "pnp": None,
    "subcenter_arcface": None,
    "proxy_synthesis": None,
}


class _Registry:
    def available(self) -> list[str]:
        return sorted([*MANDATORY_LOSSES, *(k for k, v in OPTIONAL_LOSSES.items() if v is not None)])

    def get(self, name: str):
        if name in MANDATORY_LOSSES:
            return MANDATORY_LOSSES[name]
        if OPTIONAL_LOSSES.get(name) is not None:
            return OPTIONAL_LOSSES[name]
        if name in OPTIONAL_LOSSES:
            raise LossNotAvailableError(
                f"loss {name!r} is not available in this build; available: {', '.join(self.available())}")
        raise LossNotAvailableError(
            f"unknown loss {name!r}; available: {', '.join(self.available())}")


loss_registry = _Registry()


def build_loss(name: str, num_classes: int, embedding_dim: int, **params) -> nn.Module:
    """Instantiate a registered loss; unknown hyperparameter keys are rejected."""
    cls = loss_registry.get(name)
    sig = inspect.signature(cls.__init__)
    accepted = set(sig.parameters) - {"self", "num_classes", "embedding_dim"}
    unknown = set(params) - accepted
    if unknown:
        raise ValueError(f"unknown parameters for loss {name!r}: {sorted(unknown)}; "
                         f"accepted: {sorted(accepted)}")
    if "num_classes" in sig.parameters:
        return cls(num_classes=num_classes, embedding_dim=embedding_dim, **params)
    return cls(**params)


def ntxent_loss(embeddings, mined: MinedIndices, temperature: float = 0.07, labels=None):
    labels = labels if labels is not None else np.zeros(len(embeddings), dtype=np.int64)
    return NTXentLoss(temperature)(embeddings, labels, mined)


def supcon_loss(embeddings, labels, temperature: float = 0.1):
    return SupConLoss(temperature)(embeddings, labels)


def proxy_anchor_loss(embeddings, labels, proxies, margin: float = 0.1, alpha: float = 32.0):
    return _proxy_anchor(embeddings, labels, proxies, margin, alpha)
