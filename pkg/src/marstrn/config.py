"""Run configuration: training, model, transforms, data source and evaluation selections."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .backbone import ModelConfigError
from .data import (PatchDataset, load_nav_sequence, load_patch_dataset, split_train_test,
                   synth_landmarks, synth_navigation)
from .evaluator import ABLATION_SUBSETS, DEFAULT_THRESHOLD
from .transforms import TRANSFORM_SUBSETS, TransformConfigError, TransformRanges
from .trainer import TrainConfig, TrainConfigError

PROTOCOLS = ("recall1", "incremental", "navigation", "lost-in-space", "ablation")


class RunConfigError(ValueError):
    pass


def _strict(cls, d, section: str):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise RunConfigError(f"section {section!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise RunConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    return cls(**d)


@dataclass
class DataConfig:
    """Either on-disk roots or the synthetic generator's knobs."""

    root: str | None = None
    nav_root: str | None = None
    resolution: int = 64
    instances: int = 60
    captures: int = 8
    frames: int = 30
    orbits: int = 3
    seed: int = 0
    split_seed: int = 0

    def landmarks(self) -> PatchDataset:
        if self.root is not None:
            return load_patch_dataset(self.root, self.resolution)
        return synth_landmarks(self.instances, self.resolution, self.seed, captures=self.captures)

    def navigation(self, landmarks: PatchDataset):
        if self.nav_root is not None:
            return load_nav_sequence(self.nav_root)
        if self.root is not None:
            return None
        return synth_navigation(landmarks, self.frames, self.orbits, rng_seed=self.seed)

    def splits(self):
        """(train, test, nav) with every navigation crater forced into the test split."""
        ds = self.landmarks()
        nav = self.navigation(ds)
        nav_ids = nav.crater_ids() if nav is not None else ()
        train, test = split_train_test(ds, nav_ids, self.split_seed)
        return train, test, nav


@dataclass
class EvalConfig:
    protocols: list = field(default_factory=lambda: ["incremental"])
    seed: int = 0
    transform_subset: str = "all"
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        bad = [p for p in self.protocols if p not in PROTOCOLS]
        if bad:
            raise RunConfigError(f"unknown protocols {bad}; expected any of {list(PROTOCOLS)}")
        if self.transform_subset not in ABLATION_SUBSETS:
            raise RunConfigError(f"transform_subset must be one of {list(ABLATION_SUBSETS)}")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out_dir: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise RunConfigError("run config must be a mapping")
        known = {"train", "model", "transforms", "data", "eval", "out_dir"}
        unknown = set(d) - known
        if unknown:
            raise RunConfigError(f"unknown top-level keys: {sorted(unknown)}")
        train = dict(d.get("train") or {})
        for key in ("model", "transforms"):
            if key in d:
                if key in train:
                    raise RunConfigError(f"{key!r} given both at top level and under 'train'")
                train[key] = d[key]
        if "transforms" in train and not isinstance(train["transforms"], dict):
            raise RunConfigError("section 'transforms' must be a mapping")
        if "transforms" in train:
            unknown_t = set(train["transforms"]) - {f.name for f in fields(TransformRanges)}
            if unknown_t:
                raise RunConfigError(f"unknown keys in 'transforms': {sorted(unknown_t)}")
        try:
            tc = TrainConfig.from_dict(train)
            data = _strict(DataConfig, d.get("data"), "data")
            ev = _strict(EvalConfig, d.get("eval"), "eval")
        except (TrainConfigError, ModelConfigError, TransformConfigError, TypeError) as exc:
            raise RunConfigError(str(exc)) from exc
        return cls(train=tc, data=data, eval=ev, out_dir=d.get("out_dir"))

    def to_dict(self) -> dict:
        t = self.train.to_dict()
        return {
            "train": {k: v for k, v in t.items() if k not in ("model", "transforms")},
            "model": t["model"],
            "transforms": t["transforms"],
            "data": asdict(self.data),
            "eval": asdict(self.eval),
            "out_dir": self.out_dir,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise RunConfigError(f"config file {path} not found")
    text = path.read_text()
    try:
        d = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise RunConfigError(f"cannot parse {path}: {exc}") from exc
    return RunConfig.from_dict(d or {})


__all__ = ["DataConfig", "EvalConfig", "RunConfig", "RunConfigError", "load_run_config", "PROTOCOLS",
           "TRANSFORM_SUBSETS"]
