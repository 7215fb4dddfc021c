"""Training loop: pair batches -> encoder/head -> mining -> metric loss (+ MARs).

Batches of epoch ``e`` depend only on ``(seed, e)``, so a run resumed from an
epoch checkpoint replays exactly the batches of an uninterrupted run.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .backbone import ModelConfig
from .data import PatchDataset
from .mars import total_objective
from .metric_losses import build_loss, build_pair_batch, ms_mine
from .model import LandmarkNet
from .transforms import TransformRanges

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "marstrn-checkpoint"
CHECKPOINT_VERSION = 1


class TrainConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    loss: str = "ntxent"
    loss_params: dict = field(default_factory=dict)
    miner_epsilon: float = 0.1
    checkpoint_every: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    transforms: TransformRanges = field(default_factory=TransformRanges)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.transforms, dict):
            self.transforms = TransformRanges(**{k: tuple(v) if isinstance(v, list) else v
                                                 for k, v in self.transforms.items()})
        if self.epochs < 1:
            raise TrainConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 4 or self.batch_size % 2:
            raise TrainConfigError(f"batch size must be even and >= 4, got {self.batch_size}")
        if self.optimizer not in ("adam", "sgd"):
            raise TrainConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.learning_rate < 0:
            raise TrainConfigError("learning rate must be >= 0")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = self.model.to_dict()
        d["transforms"] = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.transforms).items()}
        d["loss_params"] = dict(self.loss_params)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise TrainConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def metrics_columns(num_blocks: int) -> list[str]:
    cols = ["step", "epoch", "ml_loss"]
    for i in range(1, num_blocks + 1):
        cols += [f"mars_block_{i}_ch", f"mars_block_{i}_sp"]
    return cols


class TrainState:
    def __init__(self, config: TrainConfig, num_classes: int):
        self.config = config
        self.num_classes = num_classes
        torch.manual_seed(config.seed)
        self.model = LandmarkNet(config.model)
        self.loss_fn = build_loss(config.loss, num_classes, config.model.embedding_dim, **config.loss_params)
        params = list(self.model.parameters()) + list(self.loss_fn.parameters())
        if config.optimizer == "adam":
            self.optimizer = torch.optim.Adam(params, lr=config.learning_rate)
        else:
            self.optimizer = torch.optim.SGD(params, lr=config.learning_rate, momentum=0.9)
        self.epoch = 0
        self.step = 0
        self.metrics: list[dict] = []

    # -- checkpoints ------------------------------------------------------
    def state_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "train_config": self.config.to_dict(),
            "num_classes": self.num_classes,
            "model_state": self.model.state_dict(),
            "loss_state": self.loss_fn.state_dict(),
            "optimizer_state": self.optimizer.state_dict(),
            "epoch": self.epoch,
            "step": self.step,
            "torch_rng_state": torch.get_rng_state(),
            "metrics_offset": len(self.metrics),
            "metrics": list(self.metrics),
        }

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(self.state_dict(), tmp)
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "TrainState":
        blob = read_checkpoint(path)
        if blob.get("kind") == "oracle":
            raise CheckpointError(f"{path} is an oracle fixture, not a training checkpoint")
        state = cls(TrainConfig.from_dict(blob["train_config"]), blob["num_classes"])
        try:
            state.model.load_state_dict(blob["model_state"])
            state.loss_fn.load_state_dict(blob["loss_state"])
            state.optimizer.load_state_dict(blob["optimizer_state"])
        except (RuntimeError, KeyError, ValueError) as exc:
            raise CheckpointError(f"checkpoint {path} does not match its config: {exc}") from exc
        state.epoch = int(blob["epoch"])
        state.step = int(blob["step"])
        state.metrics = list(blob["metrics"])[: int(blob["metrics_offset"])]
        torch.set_rng_state(blob["torch_rng_state"])
        return state


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} not found")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises a zoo of unpickling errors
        raise CheckpointError(f"checkpoint {path} is unreadable: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    if blob.get("kind") != "oracle":
        missing = {"train_config", "model_state", "optimizer_state", "epoch"} - set(blob)
        if missing:
            raise CheckpointError(f"checkpoint {path} is missing {sorted(missing)}")
    return blob


def epoch_batches(dataset: PatchDataset, batch_size: int, seed: int, epoch: int):
    """Chunks of (label, capture) items and batch seeds covering every training image once.

    The epoch runs in rounds; round j holds the j-th (shuffled) capture of every
    instance that has one, so a chunk never repeats an instance and the only
    same-label pairs in a batch are the augmented twins. A trailing chunk is
    kept only if it spans at least two instances, so it still has negatives.
    """
    rng = np.random.default_rng([seed, epoch])
    caps = [rng.permutation(len(dataset.records[iid])) for iid in dataset.instance_ids]
    half = batch_size // 2
    chunks = []
    for j in range(max(len(c) for c in caps)):
        labels = np.array([lbl for lbl, c in enumerate(caps) if j < len(c)], dtype=np.int64)
        labels = labels[rng.permutation(len(labels))]
        items = np.stack([labels, np.array([caps[lbl][j] for lbl in labels], dtype=np.int64)], axis=1)
        chunks += [items[k:k + half] for k in range(0, len(items), half)]
    chunks = [c for c in chunks if len(c) >= 2]
    seeds = rng.integers(0, 2**63 - 1, size=len(chunks))
    return list(zip(chunks, (int(s) for s in seeds)))


def train_step(state: TrainState, batch) -> dict:
    model = state.model
    model.train()
    images = torch.from_numpy(batch.images).to(next(model.parameters()).dtype)
    z, maps = model(images)
    mined = ms_mine(z.detach(), batch.labels, state.config.miner_epsilon)
    half = len(batch.labels) // 2
    twins = (np.arange(half), np.arange(half) + half)
    total, ml, record = total_objective(state.loss_fn, z, batch.labels, mined, maps, batch.transforms,
                                        model.mars, twins=twins)
    if not torch.isfinite(total):
        raise TrainingDivergedError(f"non-finite loss {float(total.detach())} at step {state.step}")
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    row = {"step": state.step, "epoch": state.epoch + 1, "ml_loss": float(ml.detach())}
    for i in range(state.config.model.num_blocks):
        row[f"mars_block_{i + 1}_ch"] = record.ch[i] if record.ch else ""
        row[f"mars_block_{i + 1}_sp"] = record.sp[i] if record.sp else ""
    state.step += 1
    return row


def train_epoch(state: TrainState, dataset: PatchDataset) -> list[dict]:
    cfg = state.config
    ranges = cfg.transforms
    rows = []
    for chunk, batch_seed in epoch_batches(dataset, cfg.batch_size, cfg.seed, state.epoch):
        batch = build_pair_batch(dataset, 2 * len(chunk), batch_seed, ranges, labels=chunk[:, 0],
                                 captures=chunk[:, 1])
        try:
            rows.append(train_step(state, batch))
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(
                f"{exc} (epoch {state.epoch + 1}, batch seed {batch_seed}, "
                f"instances {[dataset.instance_ids[i] for i in chunk[:, 0]]})") from None
    state.epoch += 1
    state.metrics.extend(rows)
    return rows


def write_metrics(rows: list[dict], path, num_blocks: int):
    cols = metrics_columns(num_blocks)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def fit(config: TrainConfig, train_set: PatchDataset, out_dir=None, resume_from=None,
        stop_after: int | None = None) -> TrainState:
    """Train for ``config.epochs`` (or until ``stop_after`` epochs), checkpointing into ``out_dir``.

    ``resume_from`` continues a saved run; its config must match ``config``.
    """
    torch.use_deterministic_algorithms(True)
    if resume_from is not None:
        state = TrainState.load(resume_from)
        if state.config.to_dict() != config.to_dict():
            raise CheckpointError("checkpoint was written by a different training config")
    else:
        state = TrainState(config, len(train_set))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    target = config.epochs if stop_after is None else min(config.epochs, stop_after)
    while state.epoch < target:
        train_epoch(state, train_set)
        log.info("epoch %d/%d  ml=%.4f", state.epoch, config.epochs, state.metrics[-1]["ml_loss"])
        if out is not None:
            write_metrics(state.metrics, out / "metrics.csv", config.model.num_blocks)
            if config.checkpoint_every and state.epoch % config.checkpoint_every == 0:
                state.save(out / f"checkpoint_epoch{state.epoch:04d}.pt")
    if out is not None:
        state.save(out / "checkpoint.pt")
    return state


def epoch_mars_means(rows: list[dict], num_blocks: int, gamma_ch: float, gamma_sp: float) -> np.ndarray:
    """(epochs, blocks) array of mean weighted per-block MARs loss."""
    epochs = sorted({r["epoch"] for r in rows})
    out = np.zeros((len(epochs), num_blocks))
    for e_idx, e in enumerate(epochs):
        sel = [r for r in rows if r["epoch"] == e]
        for i in range(num_blocks):
            vals = [gamma_ch * float(r[f"mars_block_{i + 1}_ch"]) + gamma_sp * float(r[f"mars_block_{i + 1}_sp"])
                    for r in sel]
            out[e_idx, i] = float(np.mean(vals)) if vals else math.nan
    return out
