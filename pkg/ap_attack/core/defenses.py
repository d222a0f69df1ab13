"""
Input-transformation defenses applied to images before a victim encodes them.

Defenses are written in config and on the command line as tokens:
``jpeg:60`` (JPEG round trip at quality 60) and ``randomization:0.875-1.0``
(random bilinear downscale to a fraction of the size in that range, then
random zero padding back to the original size).
"""
from __future__ import annotations

import io
import logging

from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from PIL import Image

from ap_attack.core.errors import ConfigError, InputError

logger = logging.getLogger(__name__)

DEFAULT_JPEG_QUALITY = 60
DEFAULT_SCALE_RANGE = (0.875, 1.0)


def _as_batch(images: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    if images.dim() == 3:
        return images.unsqueeze(0), True
    if images.dim() == 4:
        return images, False
    raise InputError(f"Expected image(s) of shape (3, H, W) or (N, 3, H, W), got {list(images.shape)}")


def _jpeg_round_trip(image: torch.Tensor, quality: int) -> torch.Tensor:
    array = np.round(image.detach().cpu().clamp(0, 1).numpy().transpose(1, 2, 0) * 255.0)
    buffer = io.BytesIO()
    Image.fromarray(array.astype(np.uint8), mode="RGB").save(
        buffer, format="JPEG", quality=quality, subsampling=2
    )
    buffer.seek(0)
    with Image.open(buffer) as decoded:
        result = np.asarray(decoded.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(result.transpose(2, 0, 1).copy()).to(image.dtype)


def jpeg_defense(images: torch.Tensor, quality: int = DEFAULT_JPEG_QUALITY) -> torch.Tensor:
    """
    JPEG encode/decode round trip (baseline codec, 4:2:0 chroma subsampling).

    Accepts one image (3, H, W) or a batch; the output has the same shape with
    values in [0, 1].
    """
    if not 1 <= quality <= 100:
        raise InputError(f"JPEG quality must lie in [1, 100], got {quality}")
    batch, single = _as_batch(images)
    result = torch.stack([_jpeg_round_trip(image, quality) for image in batch])
    return result[0] if single else result


@dataclass(frozen=True)
class RandomizationDraw:
    """Resized height/width and the top/left padding of one randomization."""

    height: int
    width: int
    top: int
    left: int


def _check_scale_range(scale_range: Tuple[float, float]) -> None:
    low, high = scale_range
    if not 0 < low <= high <= 1:
        raise InputError(f"Scale range must satisfy 0 < low <= high <= 1, got {scale_range}")


def sample_randomization(
    image_size: Tuple[int, int], scale_range: Tuple[float, float], seed: int
) -> RandomizationDraw:
    """Draw the resize fraction and pad offsets of one image from `seed`."""
    _check_scale_range(scale_range)
    height, width = image_size
    rng = np.random.default_rng(seed)
    scale = rng.uniform(scale_range[0], scale_range[1])
    new_height = min(height, max(1, int(round(height * scale))))
    new_width = min(width, max(1, int(round(width * scale))))
    top = int(rng.integers(0, height - new_height + 1))
    left = int(rng.integers(0, width - new_width + 1))
    return RandomizationDraw(new_height, new_width, top, left)


def randomization_defense(
    images: torch.Tensor,
    scale_range: Tuple[float, float] = DEFAULT_SCALE_RANGE,
    seed: int = 0,
) -> torch.Tensor:
    """
    Random bilinear resize followed by random zero padding to the original size.

    Image i of a batch draws from ``seed + i``.
    """
    _check_scale_range(scale_range)
    batch, single = _as_batch(images)
    height, width = batch.shape[-2:]
    outputs = []
    for index, image in enumerate(batch):
        draw = sample_randomization((height, width), scale_range, seed + index)
        resized = F.interpolate(
            image.unsqueeze(0),
            size=(draw.height, draw.width),
            mode="bilinear",
            align_corners=False,
        )
        padded = F.pad(
            resized,
            [draw.left, width - draw.left - draw.width, draw.top, height - draw.top - draw.height],
            value=0.0,
        )
        outputs.append(padded[0].clamp(0.0, 1.0))
    result = torch.stack(outputs)
    return result[0] if single else result


@dataclass(frozen=True)
class JpegDefense:
    quality: int = DEFAULT_JPEG_QUALITY

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        return jpeg_defense(images, self.quality)

    @property
    def token(self) -> str:
        return f"jpeg:{self.quality}"


@dataclass(frozen=True)
class RandomizationDefense:
    low: float = DEFAULT_SCALE_RANGE[0]
    high: float = DEFAULT_SCALE_RANGE[1]
    seed: int = 0

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        return randomization_defense(images, (self.low, self.high), self.seed)

    @property
    def token(self) -> str:
        return f"randomization:{self.low}-{self.high}"


Defense = Union[JpegDefense, RandomizationDefense]


def parse_defense(token: str, seed: int = 0) -> Defense:
    """
    Build a defense from its token.

    Raises
    ------
    ConfigError
        If the token names an unknown defense or has malformed parameters.
    """
    name, _, argument = token.strip().partition(":")
    try:
        if name == "jpeg":
            quality = int(argument) if argument else DEFAULT_JPEG_QUALITY
            if not 1 <= quality <= 100:
                raise ValueError(f"quality {quality} outside [1, 100]")
            return JpegDefense(quality)
        if name == "randomization":
            if argument:
                low, high = (float(part) for part in argument.split("-"))
            else:
                low, high = DEFAULT_SCALE_RANGE
            _check_scale_range((low, high))
            return RandomizationDefense(low, high, seed)
    except ValueError as e:
        raise ConfigError(f"Malformed defense token '{token}': {e}")
    raise ConfigError(f"Unknown defense '{name}' in token '{token}'")


def parse_defense_chain(tokens: Sequence[str], seed: int = 0) -> Tuple[Defense, ...]:
    return tuple(parse_defense(token, seed) for token in tokens)


def apply_defense_chain(images: torch.Tensor, chain: Sequence[Defense]) -> torch.Tensor:
    """Apply each defense in order; an empty chain returns the input unchanged."""
    for defense in chain:
        images = defense(images)
    return images
