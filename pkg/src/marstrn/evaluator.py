"""Embedding database and the sequential landmark-recognition protocols.

An *embedder* is any callable ``embed(images, instance_ids) -> (N, D) array``
taking a float array of shape (N, H, W). Trained networks ignore the ids
(:class:`marstrn.model.ModelEmbedder`); the oracle and constant embedders
below use them to pin down protocol behaviour.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import BoundingBox, NavSequence, PatchDataset, resize_bilinear
from .transforms import TRANSFORM_SUBSETS, TransformRanges, apply_transform, sample_transform

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.9
DEFAULT_NMS_IOU = 0.5

Embedder = Callable[[np.ndarray, Sequence[str]], np.ndarray]


class OracleEmbedder:
    """One-hot embedding per instance id: a perfect recognizer."""

    def __init__(self, dim: int = 4096):
        self.dim = dim
        self._slots: dict[str, int] = {}

    def __call__(self, images, instance_ids):
        out = np.zeros((len(instance_ids), self.dim))
        for row, iid in enumerate(instance_ids):
            slot = self._slots.setdefault(str(iid), len(self._slots))
            if slot >= self.dim:
                raise ValueError(f"oracle embedder supports at most {self.dim} ids")
            out[row, slot] = 1.0
        return out


class ConstantEmbedder:
    def __init__(self, dim: int = 8):
        self.dim = dim

    def __call__(self, images, instance_ids):
        return np.ones((len(instance_ids), self.dim))


@dataclass
class Match:
    instance_id: str
    similarity: float
    order: int


class EmbeddingDB:
    """Flat exact cosine index; enrollment order breaks similarity ties."""

    def __init__(self, match_threshold: float = DEFAULT_THRESHOLD):
        if not 0 < match_threshold <= 1:
            raise ValueError(f"match threshold must lie in (0, 1], got {match_threshold}")
        self.match_threshold = match_threshold
        self.ids: list[str] = []
        self._vectors: list[np.ndarray] = []

    def __len__(self):
        return len(self.ids)

    @staticmethod
    def _unit(z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64).ravel()
        norm = np.linalg.norm(z)
        if not norm > 0:
            raise ValueError("zero-norm embedding cannot be enrolled or queried")
        return z / norm

    def add(self, instance_id, z) -> int:
        self.ids.append(str(instance_id))
        self._vectors.append(self._unit(z))
        return len(self.ids) - 1

    def similarities(self, z) -> np.ndarray:
        if not self.ids:
            return np.zeros(0)
        return np.stack(self._vectors) @ self._unit(z)

    def nearest(self, z) -> Match | None:
        sims = self.similarities(z)
        if len(sims) == 0:
            return None
        k = int(np.argmax(sims))  # first maximum == earliest enrollment
        return Match(self.ids[k], float(sims[k]), k)

    def query(self, z) -> Match | None:
        sims = self.similarities(z)
        if len(sims) == 0:
            return None
        masked = np.where(sims >= self.match_threshold, sims, -np.inf)
        k = int(np.argmax(masked))
        if not np.isfinite(masked[k]):
            return None
        return Match(self.ids[k], float(sims[k]), k)


def db_query(db: EmbeddingDB, z) -> Match | None:
    return db.query(z)


@dataclass
class RAReport:
    correct: int = 0
    incorrect: int = 0
    missed: int = 0
    protocol: str = ""
    seed: int | None = None
    transform_subset: str = "all"

    @property
    def scored(self) -> int:
        return self.correct + self.incorrect + self.missed

    @property
    def ra(self) -> float:
        return 100.0 * self.correct / self.scored if self.scored else 0.0

    def to_json(self) -> dict:
        return {
            "protocol": self.protocol,
            "seed": self.seed,
            "transform_subset": self.transform_subset,
            "correct": self.correct,
            "incorrect": self.incorrect,
            "missed": self.missed,
            "ra": self.ra,
        }


@dataclass
class StreamTrace:
    """Per-query log: ids and embeddings in stream order, plus the outcome."""

    ids: list = field(default_factory=list)
    embeddings: list = field(default_factory=list)
    outcomes: list = field(default_factory=list)


def _score_incremental(db: EmbeddingDB, ids, embeddings, report: RAReport, trace: StreamTrace | None):
    enrolled = set(db.ids)
    for iid, z in zip(ids, embeddings):
        match = db.query(z)
        if match is None:
            if iid in enrolled:
                report.missed += 1
                outcome = "missed"
            else:
                outcome = "enrolled"
            db.add(iid, z)
            enrolled.add(iid)
        elif match.instance_id == iid:
            report.correct += 1
            outcome = "correct"
        else:
            report.incorrect += 1
            outcome = "incorrect"
        if trace is not None:
            trace.ids.append(iid)
            trace.embeddings.append(np.asarray(z))
            trace.outcomes.append(outcome)


def _score_frozen(db: EmbeddingDB, ids, embeddings, report: RAReport, trace: StreamTrace | None):
    for iid, z in zip(ids, embeddings):
        match = db.query(z)
        if match is None:
            report.missed += 1
            outcome = "missed"
        elif match.instance_id == iid:
            report.correct += 1
            outcome = "correct"
        else:
            report.incorrect += 1
            outcome = "incorrect"
        if trace is not None:
            trace.ids.append(iid)
            trace.embeddings.append(np.asarray(z))
            trace.outcomes.append(outcome)


def _augment(images: Sequence[np.ndarray], rng: np.random.Generator, ranges: TransformRanges) -> np.ndarray:
    seeds = rng.integers(0, 2**63 - 1, size=len(images))
    out = [apply_transform(img, sample_transform(int(s), ranges)) for img, s in zip(images, seeds)]
    return np.stack(out).astype(np.float32) if out else np.zeros((0, ranges.ref_resolution[0],
                                                                  ranges.ref_resolution[1]), np.float32)


def _ranges_for(res: int, ranges: TransformRanges | None) -> TransformRanges:
    if ranges is None:
        return TransformRanges(ref_resolution=(res, res))
    return ranges


def recall_at_1(embedder: Embedder, dataset: PatchDataset, rng_seed: int = 0,
                ranges: TransformRanges | None = None) -> float:
    """Gallery of one view per instance, queried with a second view; nearest neighbour, no threshold."""
    if len(dataset) == 0:
        raise ValueError("empty test split")
    ranges = _ranges_for(dataset.resolution, ranges)
    rng = np.random.default_rng(rng_seed)
    ids = list(dataset.instance_ids)
    sources = [dataset.sample_image(k, rng) for k in range(len(ids))]
    gallery = embedder(_augment(sources, rng, ranges), ids)
    queries = embedder(_augment(sources, rng, ranges), ids)
    db = EmbeddingDB()
    for iid, z in zip(ids, gallery):
        db.add(iid, z)
    hits = sum(db.nearest(z).instance_id == iid for iid, z in zip(ids, queries))
    return 100.0 * hits / len(ids)


def incremental_recall(embedder: Embedder, dataset: PatchDataset, rng_seed: int = 0,
                       ranges: TransformRanges | None = None, threshold: float = DEFAULT_THRESHOLD,
                       return_trace: bool = False):
    """Every test landmark twice, shuffled, against a database that starts empty."""
    if len(dataset) == 0:
        raise ValueError("empty test split")
    ranges = _ranges_for(dataset.resolution, ranges)
    rng = np.random.default_rng(rng_seed)
    labels = rng.permutation(np.repeat(np.arange(len(dataset)), 2))
    ids = [dataset.instance_ids[k] for k in labels]
    sources = [dataset.sample_image(int(k), rng) for k in labels]
    embeddings = embedder(_augment(sources, rng, ranges), ids)
    report = RAReport(protocol="incremental", seed=rng_seed)
    trace = StreamTrace() if return_trace else None
    _score_incremental(EmbeddingDB(threshold), ids, embeddings, report, trace)
    return (report, trace) if return_trace else report


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def nms(boxes: Sequence[BoundingBox], iou_threshold: float = DEFAULT_NMS_IOU) -> list[BoundingBox]:
    """Greedy suppression in descending score order (stable for equal scores).

    Boxes without a score are ranked by area.
    """
    scored = [(b.score if b.score is not None else b.area, i, b) for i, b in enumerate(boxes)]
    scored.sort(key=lambda s: (-s[0], s[1]))
    kept: list[BoundingBox] = []
    for _, _, box in scored:
        if all(iou(box, k) <= iou_threshold for k in kept):
            kept.append(box)
    return kept


def crop_box(frame: np.ndarray, box: BoundingBox, res: int) -> np.ndarray:
    h, w = frame.shape
    x0, y0 = int(np.floor(box.x)), int(np.floor(box.y))
    x1, y1 = int(np.ceil(box.x + box.w)), int(np.ceil(box.y + box.h))
    x0, y0, x1, y1 = max(0, x0), max(0, y0), min(w, x1), min(h, y1)
    return resize_bilinear(frame[y0:y1, x0:x1], (res, res))


def frame_detections(nav: NavSequence, k: int, res: int, iou_threshold: float = DEFAULT_NMS_IOU):
    """NMS-filtered boxes of frame ``k`` (area as score) and their resized crops."""
    boxes = [BoundingBox(b.x, b.y, b.w, b.h, b.crater_id, b.area) for b in nav.boxes[k]]
    kept = nms(boxes, iou_threshold)
    frame = nav.frame(k) if kept else None
    return [b.crater_id for b in kept], [crop_box(frame, b, res) for b in kept]


def _detect_and_embed(embedder, nav, frames, rng, ranges, res, iou_threshold):
    ids, crops = [], []
    for k in frames:
        fids, fcrops = frame_detections(nav, k, res, iou_threshold)
        ids.extend(fids)
        crops.extend(fcrops)
    if not ids:
        return ids, np.zeros((0, 1))
    return ids, embedder(_augment(crops, rng, ranges), ids)


def _require_annotations(nav: NavSequence):
    if not any(nav.boxes):
        raise ValueError("navigation sequence has no crater annotations")


def moon_navigation_eval(embedder: Embedder, nav: NavSequence, rng_seed: int = 0,
                         ranges: TransformRanges | None = None, patch_res: int = 64,
                         threshold: float = DEFAULT_THRESHOLD, iou_threshold: float = DEFAULT_NMS_IOU,
                         return_trace: bool = False):
    """Frames in order; NMS-kept crops scored exactly like the incremental protocol."""
    _require_annotations(nav)
    ranges = _ranges_for(patch_res, ranges)
    rng = np.random.default_rng(rng_seed)
    ids, embeddings = _detect_and_embed(embedder, nav, range(len(nav)), rng, ranges, patch_res, iou_threshold)
    report = RAReport(protocol="navigation", seed=rng_seed)
    trace = StreamTrace() if return_trace else None
    _score_incremental(EmbeddingDB(threshold), ids, embeddings, report, trace)
    return (report, trace) if return_trace else report


def lost_in_space_eval(embedder: Embedder, nav: NavSequence, rng_seed: int = 0,
                       ranges: TransformRanges | None = None, patch_res: int = 64,
                       threshold: float = DEFAULT_THRESHOLD, iou_threshold: float = DEFAULT_NMS_IOU,
                       return_db: bool = False):
    """Seed the database with every first-orbit detection, freeze it, query the last orbit shuffled."""
    _require_annotations(nav)
    if len(nav.orbit_boundaries) < 2:
        raise ValueError("lost-in-space needs at least two orbits")
    ranges = _ranges_for(patch_res, ranges)
    rng = np.random.default_rng(rng_seed)
    db = EmbeddingDB(threshold)
    seed_ids, seed_emb = _detect_and_embed(embedder, nav, nav.orbit_frames(0), rng, ranges, patch_res,
                                           iou_threshold)
    for iid, z in zip(seed_ids, seed_emb):
        db.add(iid, z)
    last = list(nav.orbit_frames(len(nav.orbit_boundaries) - 1))
    order = [last[k] for k in rng.permutation(len(last))]
    ids, embeddings = _detect_and_embed(embedder, nav, order, rng, ranges, patch_res, iou_threshold)
    report = RAReport(protocol="lost-in-space", seed=rng_seed)
    _score_frozen(db, ids, embeddings, report, None)
    return (report, db) if return_db else report


ABLATION_SUBSETS = ("all", "brightness", "rotation", "translation")


def ablation_driver(protocol: Callable, embedder: Embedder, target, rng_seed: int = 0,
                    ranges: TransformRanges | None = None, subsets: Sequence[str] = ABLATION_SUBSETS,
                    **kwargs) -> dict[str, RAReport]:
    """Rerun ``protocol`` with the transform family restricted to each subset in turn."""
    base = ranges or TransformRanges()
    reports = {}
    for subset in subsets:
        if subset not in TRANSFORM_SUBSETS:
            raise ValueError(f"unknown transform subset {subset!r}; expected one of {TRANSFORM_SUBSETS}")
        report = protocol(embedder, target, rng_seed, ranges=base.restricted(subset), **kwargs)
        if isinstance(report, tuple):
            report = report[0]
        report.transform_subset = subset
        reports[subset] = report
    return reports
