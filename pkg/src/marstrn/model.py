from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .backbone import Encoder, ModelConfig, ProjectionHead
from .mars import MarsRegularizer


class LandmarkNet(nn.Module):
    """Encoder f, projection head g and (optionally) the MARs regularizer heads."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.head = ProjectionHead(config.channels[-1], config.embedding_dim, config.gem_p_init)
        self.mars = MarsRegularizer(config) if config.mars_enabled else None

    def forward(self, images):
        h, attention_maps = self.encoder(images)
        return self.head(h), attention_maps

    @torch.no_grad()
    def embed(self, images, batch_size: int = 64) -> np.ndarray:
        """Inference-mode embeddings for a (N, C, H, W) or (N, H, W) float array."""
        was_training = self.training
        self.eval()
        x = torch.as_tensor(np.asarray(images, dtype=np.float32))
        if x.dim() == 3:
            x = x[:, None]
        dtype = next(self.parameters()).dtype
        out = []
        for start in range(0, len(x), batch_size):
            z, _ = self(x[start:start + batch_size].to(dtype))
            out.append(z.double().numpy())
        self.train(was_training)
        return np.concatenate(out) if out else np.zeros((0, self.config.embedding_dim))


class ModelEmbedder:
    """Adapter giving a trained network the evaluator's embedder signature."""

    def __init__(self, model: LandmarkNet):
        self.model = model

    @property
    def input_resolution(self):
        return self.model.config.input_resolution

    def __call__(self, images, instance_ids=None) -> np.ndarray:
        return self.model.embed(images)
