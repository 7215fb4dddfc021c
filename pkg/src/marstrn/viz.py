"""EigenCAM heatmaps and the per-block MARs loss curve plot."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)


def eigencam(activations, out_size: Sequence[int] | None = None) -> np.ndarray:
    """Project a C x H x W activation onto its first principal direction.

    The C x (H*W) matrix is reduced to its leading right singular vector scaled
    by the singular value; the sign is chosen so the projection has a
    non-negative mean. The map is upsampled to ``out_size`` (bilinear) and
    min-max normalised to [0, 1].
    """
    a = np.asarray(activations.detach().cpu() if isinstance(activations, torch.Tensor) else activations,
                   dtype=np.float64)
    if a.ndim != 3:
        raise ValueError(f"expected a C x H x W activation, got shape {a.shape}")
    c, h, w = a.shape
    size = (h, w) if out_size is None else tuple(int(s) for s in out_size)
    m = a.reshape(c, h * w)
    if not np.any(m):
        log.warning("all-zero activations; returning a zero heatmap")
        return np.zeros(size)
    # leading eigenvector of the (small) C x C Gram matrix gives the left singular vector
    evals, evecs = np.linalg.eigh(m @ m.T)
    u = evecs[:, -1]
    cam = u @ m
    if cam.mean() < 0:
        cam = -cam
    cam = cam.reshape(h, w)
    if size != (h, w):
        cam = F.interpolate(torch.from_numpy(cam)[None, None], size=size, mode="bilinear",
                            align_corners=False)[0, 0].numpy()
    lo, hi = cam.min(), cam.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.zeros(size)
    return (cam - lo) / (hi - lo)


def side_by_side(path, left: np.ndarray, right: np.ndarray, title: str = ""):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(6, 3))
    for ax, img, name in zip(axes, (left, right), ("view 1", "view 2")):
        ax.imshow(img, cmap="jet", vmin=0, vmax=1)
        ax.set_title(name)
        ax.axis("off")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_mars_curves(per_epoch: np.ndarray, path, title: str = "MARs regularization loss per block"):
    """Line plot of an (epochs, blocks) array of mean weighted MARs losses."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = np.arange(1, len(per_epoch) + 1)
    for i in range(per_epoch.shape[1]):
        ax.plot(epochs, per_epoch[:, i], label=f"block {i + 1}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MARs loss")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
