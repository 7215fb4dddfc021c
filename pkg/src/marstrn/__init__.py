"""Multi-view attention regularizations for terrain landmark recognition."""

from .backbone import ModelConfig
from .config import RunConfig, load_run_config
from .data import (PatchDataset, NavSequence, load_nav_sequence, load_patch_dataset, split_train_test,
                   synth_landmarks, synth_navigation)
from .evaluator import (EmbeddingDB, RAReport, incremental_recall, lost_in_space_eval,
                        moon_navigation_eval, recall_at_1)
from .mars import MarsRegularizer, cosine_loss, pose_normalize, total_objective
from .model import LandmarkNet, ModelEmbedder
from .trainer import TrainConfig, fit
from .transforms import TransformRanges, TransformSpec, apply_transform, sample_transform

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "RunConfig", "load_run_config",
    "PatchDataset", "NavSequence", "load_nav_sequence", "load_patch_dataset", "split_train_test",
    "synth_landmarks", "synth_navigation",
    "EmbeddingDB", "RAReport", "incremental_recall", "lost_in_space_eval", "moon_navigation_eval", "recall_at_1",
    "MarsRegularizer", "cosine_loss", "pose_normalize", "total_objective",
    "LandmarkNet", "ModelEmbedder", "TrainConfig", "fit",
    "TransformRanges", "TransformSpec", "apply_transform", "sample_transform",
]
