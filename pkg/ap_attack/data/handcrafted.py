"""
Zero-training victim/surrogate feature extractor.

Mean colours of the five body regions (each box shrunk towards its centre so
edges and neighbouring regions do not bleed in), centred at 0.5 and passed
through a fixed seeded projection with orthonormal rows. The projection keeps
distances between region statistics, so every seed retrieves alike. The
extractor is differentiable and has no trainable parameters.
"""
from __future__ import annotations

import logging

from typing import Tuple

import torch

from torch import nn

from ap_attack.core.default.constants import DEFAULT_ATTRIBUTES
from ap_attack.core.errors import ConfigError
from ap_attack.data.synthdata import REGION_BOXES, region_pixels

logger = logging.getLogger(__name__)

REGION_SHRINK = 0.15


class HandcraftedExtractor(nn.Module):
    def __init__(self, image_size: Tuple[int, int] = (128, 64), feature_dim: int = 64, seed: int = 0):
        super().__init__()
        self.image_size = tuple(int(v) for v in image_size)
        self.seed = seed
        self.boxes = [
            region_pixels(REGION_BOXES[name], self.image_size, REGION_SHRINK)
            for name in DEFAULT_ATTRIBUTES
        ]
        num_stats = 3 * len(self.boxes)
        if feature_dim < num_stats:
            raise ConfigError(
                f"Handcrafted feature_dim must be at least {num_stats}, got {feature_dim}"
            )
        generator = torch.Generator().manual_seed(seed)
        basis, _ = torch.linalg.qr(torch.randn(feature_dim, num_stats, generator=generator))
        self.register_buffer("projection", basis.T.contiguous())

    def region_means(self, images: torch.Tensor) -> torch.Tensor:
        """(N, 15) mean colour of every region."""
        return torch.cat(
            [images[:, :, r0:r1, c0:c1].mean(dim=(2, 3)) for r0, r1, c0, c1 in self.boxes],
            dim=1,
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        single = images.dim() == 3
        batch = images.unsqueeze(0) if single else images
        if batch.dim() != 4 or tuple(batch.shape[-2:]) != self.image_size:
            raise ConfigError(
                f"Handcrafted extractor expects images of size {list(self.image_size)}, "
                f"got shape {list(images.shape)}"
            )
        features = (self.region_means(batch) - 0.5) @ self.projection.to(batch.dtype)
        return features[0] if single else features
