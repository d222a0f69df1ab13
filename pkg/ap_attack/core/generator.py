"""
Perturbation generator.

A ResNet-style encoder-decoder: a reflect-padded 7x7 stem, stride-2
downsampling convolutions, residual blocks, transposed-convolution
upsampling and a 7x7 head with tanh, so the raw output lies in (-1, 1) and
has the input's shape.
"""
from __future__ import annotations

import logging

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Tuple, Union

import torch

from dataclasses_json import dataclass_json
from torch import nn

from ap_attack.core.checkpoint import (
    load_checkpoint,
    load_module_arrays,
    module_arrays,
    save_checkpoint,
)
from ap_attack.core.errors import CheckpointError, ConfigError

logger = logging.getLogger(__name__)


@dataclass_json
@dataclass
class GeneratorConfig:
    """
    Attributes
    ----------
    preset : str
        ``reference`` (3 down, 4 residual, 3 up) or ``tiny`` (1, 2, 1).
    base_channels : int
        Channels after the stem; doubled by every downsampling block.
    seed : int
        Seed of the weight initialization.
    """

    preset: str = "reference"
    base_channels: int = 16
    seed: int = 0

    def validate(self) -> "GeneratorConfig":
        if self.preset not in GENERATOR_PRESETS:
            raise ConfigError(
                f"Unknown generator preset '{self.preset}', "
                f"expected one of {sorted(GENERATOR_PRESETS)}"
            )
        if self.base_channels < 1:
            raise ConfigError("generator.base_channels must be positive")
        return self

    @property
    def blocks(self) -> Tuple[int, int]:
        return GENERATOR_PRESETS[self.preset]


# preset -> (downsampling blocks, residual blocks); upsampling mirrors downsampling
GENERATOR_PRESETS: Dict[str, Tuple[int, int]] = {
    "reference": (3, 4),
    "tiny": (1, 2),
}


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, kernel_size=3),
            nn.InstanceNorm2d(channels, affine=True),
            nn.ReLU(),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, kernel_size=3),
            nn.InstanceNorm2d(channels, affine=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


class PerturbationGenerator(nn.Module):
    """Image (N, 3, H, W) -> perturbation field of the same shape in (-1, 1)."""

    def __init__(self, config: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.config = config.validate()
        num_down, num_residual = config.blocks
        channels = config.base_channels

        layers = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(3, channels, kernel_size=7),
            nn.InstanceNorm2d(channels, affine=True),
            nn.ReLU(),
        ]
        for _ in range(num_down):
            layers += [
                nn.Conv2d(channels, channels * 2, kernel_size=3, stride=2, padding=1),
                nn.InstanceNorm2d(channels * 2, affine=True),
                nn.ReLU(),
            ]
            channels *= 2
        layers += [ResidualBlock(channels) for _ in range(num_residual)]
        for _ in range(num_down):
            layers += [
                nn.ConvTranspose2d(
                    channels, channels // 2, kernel_size=3, stride=2, padding=1, output_padding=1
                ),
                nn.InstanceNorm2d(channels // 2, affine=True),
                nn.ReLU(),
            ]
            channels //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(channels, 3, kernel_size=7), nn.Tanh()]
        self.model = nn.Sequential(*layers)
        self._init_weights(config.seed)

    @property
    def stride(self) -> int:
        return 2 ** self.config.blocks[0]

    def _init_weights(self, seed: int) -> None:
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for module in self.model.modules():
                if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
                    module.weight.normal_(0.0, 0.02, generator=generator)
                    module.bias.zero_()
                elif isinstance(module, nn.InstanceNorm2d):
                    module.weight.normal_(1.0, 0.02, generator=generator)
                    module.bias.zero_()

    def check_image_size(self, image_size: Tuple[int, int]) -> None:
        if any(side % self.stride for side in image_size):
            raise ConfigError(
                f"Image size {list(image_size)} is not divisible by the generator "
                f"stride {self.stride} of preset '{self.config.preset}'"
            )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.model(images)


def save_generator(
    generator: PerturbationGenerator, path: Union[str, Path], config_digest: str = ""
) -> Path:
    return save_checkpoint(
        module_arrays(generator),
        path,
        config_digest=config_digest,
        metadata={"generator": generator.config.to_dict()},
    )


def load_generator(path: Union[str, Path]) -> PerturbationGenerator:
    """Restore a generator in eval mode from a checkpoint container."""
    checkpoint = load_checkpoint(path)
    if "generator" not in checkpoint.metadata:
        raise CheckpointError(f"Checkpoint '{path}' carries no generator config")
    generator = PerturbationGenerator(GeneratorConfig.from_dict(checkpoint.metadata["generator"]))
    load_module_arrays(generator, checkpoint.arrays)
    generator.requires_grad_(False)
    return generator.eval()
