"""Landmark patch datasets, navigation sequences and the procedural generator.

On-disk layouts::

    <root>/<instance_id>/<image>.png          patch dataset
    <root>/frames/<k>.png                      navigation frames
    <root>/frames/<k>.txt                      one "crater_id x y w h" line per box
    <root>/manifest.json                       {"orbit_boundaries": [0, k1, k2, ...]}

Pixels are 8-bit grayscale mapped to [0, 1].
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}


class DatasetError(ValueError):
    pass


class NavFormatError(DatasetError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float
    crater_id: str
    score: float | None = None

    @property
    def area(self) -> float:
        return self.w * self.h

    def clipped(self, frame_h: int, frame_w: int) -> "BoundingBox | None":
        x0, y0 = max(0.0, self.x), max(0.0, self.y)
        x1, y1 = min(float(frame_w), self.x + self.w), min(float(frame_h), self.y + self.h)
        if x1 <= x0 or y1 <= y0:
            return None
        return BoundingBox(x0, y0, x1 - x0, y1 - y0, self.crater_id, self.score)


def read_gray(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def write_gray(path, image: np.ndarray):
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def resize_bilinear(image: np.ndarray, size: Sequence[int]) -> np.ndarray:
    """Bilinear resize (half-pixel centres) of an (H, W) array."""
    h, w = int(size[0]), int(size[1])
    if image.shape == (h, w):
        return np.asarray(image, dtype=np.float64)
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float64))[None, None]
    return F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)[0, 0].numpy()


# ---------------------------------------------------------------------------
# patch datasets


@dataclass
class PatchDataset:
    """Instances with one or more patches each.

    ``records`` maps instance id -> list of sources: a file path or an integer
    synthetic seed. Labels are indices into ``instance_ids``.
    """

    records: dict[str, list]
    resolution: int = 64
    synth_seed: int | None = None
    instance_ids: list[str] = field(init=False)

    def __post_init__(self):
        self.instance_ids = sorted(self.records, key=_id_sort_key)
        for iid in self.instance_ids:
            if not self.records[iid]:
                raise DatasetError(f"instance {iid!r} has no images")
        self._index = {iid: k for k, iid in enumerate(self.instance_ids)}
        self._rendered: dict = {}

    def __len__(self):
        return len(self.instance_ids)

    def label_of(self, instance_id) -> int:
        return self._index[str(instance_id)]

    def load(self, source) -> np.ndarray:
        if isinstance(source, (int, np.integer, tuple)):
            # procedural patches are pure functions of their key, so memoise them
            key = source if isinstance(source, tuple) else (int(source), 0)
            if key not in self._rendered:
                self._rendered[key] = render_landmark(self.synth_seed, key[0], self.resolution, capture=key[1])
            return self._rendered[key].copy()
        img = read_gray(source)
        return resize_bilinear(img, (self.resolution, self.resolution))

    def image(self, label: int, k: int = 0) -> np.ndarray:
        return self.load(self.records[self.instance_ids[label]][k])

    def sample_image(self, label: int, rng: np.random.Generator) -> np.ndarray:
        sources = self.records[self.instance_ids[label]]
        k = int(rng.integers(len(sources))) if len(sources) > 1 else 0
        return self.load(sources[k])

    def subset(self, ids: Sequence[str]) -> "PatchDataset":
        return PatchDataset({str(i): list(self.records[str(i)]) for i in ids}, self.resolution,
                            self.synth_seed)


def _id_sort_key(iid: str):
    return (0, int(iid), "") if str(iid).isdigit() else (1, 0, str(iid))


def load_patch_dataset(root, resolution: int = 64) -> PatchDataset:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    records: dict[str, list] = {}
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        paths = []
        for f in sorted(sub.iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                log.warning("skipping non-image file %s", f)
                continue
            try:
                with Image.open(f) as im:
                    im.verify()
            except (UnidentifiedImageError, OSError):
                log.warning("skipping unreadable image %s", f)
                continue
            paths.append(f)
        if paths:
            records[sub.name] = paths
    if not records:
        raise DatasetError(f"no instance directories with images under {root}")
    return PatchDataset(records, resolution)


def split_train_test(dataset: PatchDataset, nav_ids: Sequence = (), rng_seed: int = 0):
    """Instance-disjoint halves; navigation-visible ids go to the test half first."""
    ids = list(dataset.instance_ids)
    nav = [i for i in dataset.instance_ids if i in {str(v) for v in nav_ids}]
    missing = {str(v) for v in nav_ids} - set(ids)
    if missing:
        raise DatasetError(f"navigation ids not in dataset: {sorted(missing, key=_id_sort_key)}")
    n_test = len(ids) // 2
    if len(nav) > n_test:
        log.warning("%d navigation ids exceed half of the dataset; test split grows to %d",
                    len(nav), len(nav))
        n_test = len(nav)
    rest = [i for i in ids if i not in set(nav)]
    rng = np.random.default_rng(rng_seed)
    order = rng.permutation(len(rest))
    fill = {rest[k] for k in order[: n_test - len(nav)]}
    test_ids = [i for i in ids if i in set(nav) or i in fill]
    train_ids = [i for i in ids if i not in set(test_ids)]
    return dataset.subset(train_ids), dataset.subset(test_ids)


# ---------------------------------------------------------------------------
# procedural landmarks

_SUN_ELEVATION, _SUN_AZIMUTH = 35.0, -45.0


def _light(elevation: float, azimuth: float) -> np.ndarray:
    el, az = math.radians(elevation), math.radians(azimuth)
    return np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])


def _crater_height(xx, yy, cx, cy, radius, depth, rim, sharpness):
    r = np.hypot(xx - cx, yy - cy) / radius
    bowl = np.where(r < 1.0, depth * (r ** 2 - 1.0), 0.0)
    rim_profile = rim * np.exp(-((r - 1.0) * sharpness) ** 2)
    return bowl + rim_profile


def _smooth_noise(rng, res, cells):
    coarse = rng.standard_normal((cells, cells))
    return resize_bilinear(coarse, (res, res))


def render_landmark(global_seed: int | None, instance_id: int, res: int = 64, capture: int = 0) -> np.ndarray:
    """Deterministic crater patch in [0, 1] for ``(global_seed, instance_id, capture)``.

    Height field = main crater bowl with rim + a few small craters + low-frequency
    terrain + per-instance high-frequency detail, shaded by a fixed light. Captures
    other than 0 re-observe the same surface with the sun jittered by a few
    degrees and fresh sensor noise.
    """
    rng = np.random.default_rng([int(global_seed or 0), int(instance_id)])
    lin = np.linspace(-1.0, 1.0, res)
    yy, xx = np.meshgrid(lin, lin, indexing="ij")

    height = _crater_height(xx, yy, *rng.uniform(-0.15, 0.15, 2), rng.uniform(0.35, 0.7),
                            rng.uniform(0.4, 1.0), rng.uniform(0.08, 0.3), rng.uniform(2.0, 6.0))
    for _ in range(int(rng.integers(2, 6))):
        height += _crater_height(xx, yy, *rng.uniform(-0.9, 0.9, 2), rng.uniform(0.06, 0.2),
                                 rng.uniform(0.1, 0.4), rng.uniform(0.02, 0.1), rng.uniform(3.0, 6.0))
    for _ in range(3):
        theta, freq, phase = rng.uniform(0, 2 * np.pi), rng.uniform(0.5, 2.0), rng.uniform(0, 2 * np.pi)
        height += rng.uniform(0.05, 0.2) * np.sin(freq * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    height += 0.08 * _smooth_noise(rng, res, 12) + 0.02 * _smooth_noise(rng, res, 32)
    albedo = 0.75 + 0.1 * _smooth_noise(rng, res, 6)

    scale = res / 2.0 / 4.0
    gy, gx = np.gradient(height * scale)
    normal = np.stack([-gx, -gy, np.ones_like(gx)])
    normal /= np.linalg.norm(normal, axis=0, keepdims=True)
    elevation, azimuth, noise = _SUN_ELEVATION, _SUN_AZIMUTH, 0.0
    if capture:
        crng = np.random.default_rng([int(global_seed or 0), int(instance_id), int(capture)])
        elevation += crng.uniform(-5.0, 5.0)
        azimuth += crng.uniform(-15.0, 15.0)
        noise = 0.02 * crng.standard_normal((res, res))
    shade = np.clip(np.tensordot(_light(elevation, azimuth), normal, axes=1), 0.0, 1.0)
    return np.clip(0.05 + 0.9 * albedo * shade + noise, 0.0, 1.0)


def synth_landmarks(n_instances: int, patch_res: int = 64, rng_seed: int = 0, captures: int = 1) -> PatchDataset:
    """``n_instances`` procedural craters with ids "0".."n-1", each observed ``captures`` times."""
    if n_instances < 1 or captures < 1:
        raise DatasetError("need at least one instance and one capture")
    records = {str(i): [i] + [(i, k) for k in range(1, captures)] for i in range(n_instances)}
    return PatchDataset(records, patch_res, synth_seed=rng_seed)


# ---------------------------------------------------------------------------
# navigation sequences


@dataclass
class NavSequence:
    frames: list                       # arrays (H, W) or paths
    boxes: list[list[BoundingBox]]
    orbit_boundaries: list[int]        # start frame of every orbit

    def __len__(self):
        return len(self.frames)

    def frame(self, k: int) -> np.ndarray:
        f = self.frames[k]
        return f if isinstance(f, np.ndarray) else read_gray(f)

    def orbit_of(self, k: int) -> int:
        return int(np.searchsorted(self.orbit_boundaries, k, side="right") - 1)

    def orbit_frames(self, orbit: int) -> range:
        start = self.orbit_boundaries[orbit]
        stop = self.orbit_boundaries[orbit + 1] if orbit + 1 < len(self.orbit_boundaries) else len(self)
        return range(start, stop)

    def crater_ids(self, frames: Sequence[int] | None = None) -> set[str]:
        frames = range(len(self)) if frames is None else frames
        return {b.crater_id for k in frames for b in self.boxes[k]}


def synth_navigation(landmarks: PatchDataset, n_frames: int = 30, n_orbits: int = 3,
                     frame_res: Sequence[int] = (96, 192), rng_seed: int = 0,
                     n_sites: int | None = None) -> NavSequence:
    """Repeated sweeps of one wrap-around ground strip carrying landmark craters.

    Every orbit covers the full strip, so later orbits re-observe the craters of
    the first. Crater centres sit one third of a frame width apart (with
    jitter), giving 2-4 visible craters per frame.
    """
    fh, fw = int(frame_res[0]), int(frame_res[1])
    if n_orbits < 1 or n_frames < n_orbits:
        raise DatasetError("need n_orbits >= 1 and at least one frame per orbit")
    rng = np.random.default_rng(rng_seed)
    spacing = fw / 3.0
    if n_sites is None:
        n_sites = max(4, min(len(landmarks) // 4, 16))
    n_sites = min(n_sites, len(landmarks))
    if n_sites < 4:
        raise DatasetError("navigation strip needs at least 4 landmark instances")
    strip_len = n_sites * spacing
    per_orbit = n_frames // n_orbits
    step = strip_len / per_orbit
    if step > fw:
        raise DatasetError(f"{per_orbit} frames per orbit cannot cover a strip of {strip_len:.0f}px")

    ids = [landmarks.instance_ids[k] for k in rng.choice(len(landmarks), size=n_sites, replace=False)]
    box_size = int(round(spacing * 0.7))
    centres_x = np.arange(n_sites) * spacing + rng.uniform(-0.12, 0.12, n_sites) * spacing
    centres_y = rng.uniform(box_size / 2 + 2, fh - box_size / 2 - 2, n_sites)
    sizes = np.round(box_size * rng.uniform(0.8, 1.0, n_sites)).astype(int)

    strip_w = int(math.ceil(strip_len))
    background = 0.35 + 0.1 * resize_bilinear(rng.standard_normal((6, max(2, strip_w // 24))), (fh, strip_w))
    patches = [resize_bilinear(landmarks.image(landmarks.label_of(i)), (s, s)) for i, s in zip(ids, sizes)]

    boundaries = [o * per_orbit for o in range(n_orbits)]
    frames, boxes = [], []
    for k in range(n_frames):
        orbit = min(k // per_orbit, n_orbits - 1)
        x0 = float(np.floor(((k - boundaries[orbit]) * step + orbit * 0.37 * step) % strip_len))
        cols = (np.floor(x0) + np.arange(fw)).astype(int) % strip_w
        frame = background[:, cols].copy()
        frame_boxes = []
        for site in range(n_sites):
            # nearest wrapped position of the crater relative to the frame's left edge
            rel = (centres_x[site] - x0) % strip_len
            if rel > strip_len - fw / 2:
                rel -= strip_len
            if not (0 <= rel < fw):
                continue
            s = int(sizes[site])
            bx = int(round(rel - s / 2))
            by = int(round(centres_y[site] - s / 2))
            xs = slice(max(bx, 0), min(bx + s, fw))
            frame[by:by + s, xs] = patches[site][:, xs.start - bx: xs.stop - bx]
            box = BoundingBox(bx, by, s, s, ids[site]).clipped(fh, fw)
            if box is not None:
                frame_boxes.append(box)
        frames.append(np.clip(frame, 0.0, 1.0))
        boxes.append(frame_boxes)
    return NavSequence(frames, boxes, boundaries)


def parse_annotation_line(line: str, path, lineno: int) -> BoundingBox:
    parts = line.split()
    if len(parts) != 5:
        raise NavFormatError(f"{path}:{lineno}: expected 'crater_id x y w h', got {line.strip()!r}")
    try:
        x, y, w, h = (float(v) for v in parts[1:])
    except ValueError:
        raise NavFormatError(f"{path}:{lineno}: non-numeric box in {line.strip()!r}") from None
    if w <= 0 or h <= 0:
        raise NavFormatError(f"{path}:{lineno}: box width and height must be positive")
    return BoundingBox(x, y, w, h, parts[0])


def load_nav_sequence(root) -> NavSequence:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise NavFormatError(f"missing manifest {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    frame_paths = sorted((root / "frames").glob("*.png"), key=lambda p: _id_sort_key(p.stem))
    if not frame_paths:
        raise NavFormatError(f"no frames under {root / 'frames'}")
    boxes = []
    for fp in frame_paths:
        ann = fp.with_suffix(".txt")
        with Image.open(fp) as im:
            fw, fh = im.size
        frame_boxes = []
        if ann.is_file():
            for lineno, line in enumerate(ann.read_text().splitlines(), start=1):
                if not line.strip() or line.lstrip().startswith("#"):
                    continue
                box = parse_annotation_line(line, ann, lineno)
                clipped = box.clipped(fh, fw)
                if clipped != box:
                    log.warning("%s:%d: box exceeds the %dx%d frame; clipped", ann, lineno, fw, fh)
                if clipped is not None:
                    frame_boxes.append(clipped)
        boxes.append(frame_boxes)
    boundaries = [int(b) for b in manifest.get("orbit_boundaries", [0])]
    if boundaries != sorted(set(boundaries)) or boundaries[0] != 0 or boundaries[-1] >= len(frame_paths):
        raise NavFormatError(f"invalid orbit_boundaries {boundaries} for {len(frame_paths)} frames")
    return NavSequence(list(frame_paths), boxes, boundaries)


def write_patch_dataset(dataset: PatchDataset, root):
    root = Path(root)
    for label, iid in enumerate(dataset.instance_ids):
        (root / iid).mkdir(parents=True, exist_ok=True)
        for k in range(len(dataset.records[iid])):
            write_gray(root / iid / f"{k}.png", dataset.image(label, k))


def write_nav_sequence(nav: NavSequence, root):
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    for k in range(len(nav)):
        write_gray(root / "frames" / f"{k}.png", nav.frame(k))
        lines = [f"{b.crater_id} {b.x:g} {b.y:g} {b.w:g} {b.h:g}" for b in nav.boxes[k]]
        (root / "frames" / f"{k}.txt").write_text("\n".join(lines) + ("\n" if lines else ""))
    manifest = {"orbit_boundaries": list(nav.orbit_boundaries), "n_frames": len(nav)}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
