"""
Frozen joint vision-language space.

This module provides the visual encoder V (images -> features) and the text
encoder T (token-embedding sequences -> features) that the inversion and
attack stages work in. The reference implementations are tiny, seeded and
deterministic; `load_encoder_adapter` restores encoders from a checkpoint
container so external weights can be plugged in behind the same interface.

Images are float tensors of shape (3, H, W) or (N, 3, H, W) with values in
[0, 1]. Token-embedding sequences are tensors of shape (L, E) or (N, L, E).

Classes
-------
JointSpaceConfig
    Dimensionalities shared by both encoders.
ReferenceVisualEncoder
    Patch averaging -> linear -> tanh -> linear.
ReferenceTextEncoder
    Token rows + positional rows -> mean pooling -> linear.
EncoderPair
    The two encoders of one joint space.
AttributeGrounding
    Region and word colours of one attribute, for grounded encoders.

Functions
---------
build_reference_encoders(seed, config, grounding, vocab) -> EncoderPair
slot_masks(grounding, token_embedding_dim) -> torch.Tensor
save_encoders(encoders, path, config_digest) -> Path
load_encoder_adapter(path) -> EncoderPair
"""
from __future__ import annotations

import logging
import math

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from dataclasses_json import dataclass_json
from torch import nn

from ap_attack.core.checkpoint import (
    load_checkpoint,
    load_module_arrays,
    module_arrays,
    save_checkpoint,
    weights_checksum,
)
from ap_attack.core.errors import CheckpointError, ConfigError, InputError
from ap_attack.core.prompt import Vocabulary

logger = logging.getLogger(__name__)

REFERENCE_ARCHITECTURE = "reference"

# tanh argument of a colour unit at its prototype colour, counted from the threshold
GROUNDING_GAIN = 2.5
# weight of the shared syntax direction that non-attribute words map to
SYNTAX_SCALE = 0.1


@dataclass_json
@dataclass
class JointSpaceConfig:
    """
    Dimensionalities of the joint space.

    Attributes
    ----------
    feature_dim : int
        Dimension d of image and text features.
    token_embedding_dim : int
        Dimension of token-embedding rows (and of pseudo-tokens).
    max_sequence_length : int
        Longest token sequence the text encoder accepts, markers included.
    image_size : tuple of int
        (height, width) in pixels.
    patch_size : int
        Side of the non-overlapping averaging patches of the visual encoder.
    hidden_dim : int
        Width of the visual encoder's hidden layer.
    vocab_size : int
        Rows of the token-embedding table.
    """

    feature_dim: int = 32
    token_embedding_dim: int = 32
    max_sequence_length: int = 64
    image_size: Tuple[int, int] = (128, 64)
    patch_size: int = 4
    hidden_dim: int = 64
    vocab_size: int = 128

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)

    def validate(self) -> "JointSpaceConfig":
        for name in (
            "feature_dim",
            "token_embedding_dim",
            "max_sequence_length",
            "patch_size",
            "hidden_dim",
            "vocab_size",
        ):
            if getattr(self, name) <= 0:
                raise ConfigError(f"joint_space.{name} must be positive")
        if len(self.image_size) != 2 or min(self.image_size) <= 0:
            raise ConfigError("joint_space.image_size must be two positive integers")
        if any(side % self.patch_size for side in self.image_size):
            raise ConfigError(
                f"joint_space.image_size {list(self.image_size)} is not divisible "
                f"by patch_size {self.patch_size}"
            )
        if self.max_sequence_length < 3:
            raise ConfigError("joint_space.max_sequence_length must hold markers")
        return self


@dataclass
class EncoderWeights:
    """Named float32 arrays of an encoder and whether they are frozen."""

    arrays: Dict[str, np.ndarray] = field(default_factory=dict)
    frozen: bool = True


def freeze_(module: nn.Module) -> nn.Module:
    """Disable gradients for every parameter and switch to eval mode."""
    module.requires_grad_(False)
    module.eval()
    return module


def is_frozen(module: nn.Module) -> bool:
    return not any(p.requires_grad for p in module.parameters())


def _check_finite(tensor: torch.Tensor, what: str) -> None:
    if not torch.isfinite(tensor).all():
        raise InputError(f"{what} contains non-finite values")


class ReferenceVisualEncoder(nn.Module):
    """Patch averaging -> linear -> tanh -> linear to d."""

    def __init__(self, config: JointSpaceConfig):
        super().__init__()
        self.config = config
        height, width = config.image_size
        self.num_patches = (height // config.patch_size) * (width // config.patch_size)
        self.patch_proj = nn.Linear(self.num_patches * 3, config.hidden_dim)
        self.head = nn.Linear(config.hidden_dim, config.feature_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        patches = F.avg_pool2d(images, self.config.patch_size)
        return self.head(torch.tanh(self.patch_proj(patches.flatten(1))))

    def encode_image(self, image: torch.Tensor) -> torch.Tensor:
        """
        Map an image (or a batch) to features v = V(x).

        Raises
        ------
        ConfigError
            If the image size differs from the configured size.
        InputError
            If any pixel is non-finite.
        """
        single = image.dim() == 3
        batch = image.unsqueeze(0) if single else image
        if batch.dim() != 4 or batch.shape[1] != 3:
            raise ConfigError(f"Expected image(s) of shape (N, 3, H, W), got {list(image.shape)}")
        if tuple(batch.shape[-2:]) != tuple(self.config.image_size):
            raise ConfigError(
                f"Image size {list(batch.shape[-2:])} does not match the configured "
                f"size {list(self.config.image_size)}"
            )
        _check_finite(batch, "Image")
        features = self.forward(batch)
        return features[0] if single else features


class ReferenceTextEncoder(nn.Module):
    """Token rows + positional rows -> mean pooling over the sequence -> linear to d."""

    def __init__(self, config: JointSpaceConfig):
        super().__init__()
        self.config = config
        self.token_embedding = nn.Embedding(config.vocab_size, config.token_embedding_dim)
        self.positional_embedding = nn.Parameter(
            torch.zeros(config.max_sequence_length, config.token_embedding_dim)
        )
        self.projection = nn.Linear(config.token_embedding_dim, config.feature_dim)

    @property
    def token_embedding_table(self) -> torch.Tensor:
        return self.token_embedding.weight

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        length = embeddings.shape[-2]
        pooled = (embeddings + self.positional_embedding[:length]).mean(dim=-2)
        return self.projection(pooled)

    def encode_token_sequence(self, embeddings: torch.Tensor) -> torch.Tensor:
        """
        Map a token-embedding sequence (or a batch) to the text feature t.

        Raises
        ------
        InputError
            If the sequence is longer than max_sequence_length or the rows have
            the wrong width.
        """
        if embeddings.dim() not in (2, 3):
            raise InputError(
                f"Expected embeddings of shape (L, E) or (N, L, E), got {list(embeddings.shape)}"
            )
        length, width = embeddings.shape[-2:]
        if length > self.config.max_sequence_length:
            raise InputError(
                f"Sequence of length {length} exceeds max_sequence_length "
                f"{self.config.max_sequence_length}"
            )
        if width != self.config.token_embedding_dim:
            raise InputError(
                f"Embedding rows have {width} entries, expected "
                f"{self.config.token_embedding_dim}"
            )
        _check_finite(embeddings, "Token embeddings")
        return self.forward(embeddings)


class EncoderPair(NamedTuple):
    visual: ReferenceVisualEncoder
    text: ReferenceTextEncoder

    @property
    def config(self) -> JointSpaceConfig:
        return self.visual.config

    def freeze(self) -> "EncoderPair":
        freeze_(self.visual)
        freeze_(self.text)
        return self

    def checksum(self) -> str:
        return weights_checksum(self.visual) + weights_checksum(self.text)

    def weights(self) -> EncoderWeights:
        arrays = module_arrays(self.visual, "visual.")
        arrays.update(module_arrays(self.text, "text."))
        return EncoderWeights(
            arrays=arrays, frozen=is_frozen(self.visual) and is_frozen(self.text)
        )


def uniform_fan_in_(module: nn.Linear, generator: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(module.in_features)
    with torch.no_grad():
        module.weight.uniform_(-bound, bound, generator=generator)
        module.bias.uniform_(-bound, bound, generator=generator)


@dataclass(frozen=True)
class AttributeGrounding:
    """
    Where an attribute is drawn and which colour every candidate word names.

    Attributes
    ----------
    name : str
        Attribute (slot) name.
    box : tuple of float
        (row start, row end, column start, column end) as image fractions.
    words : tuple of str
        Candidate words; each must be a single vocabulary token.
    colors : tuple of (r, g, b)
        Prototype colour of every word.
    """

    name: str
    box: Tuple[float, float, float, float]
    words: Tuple[str, ...]
    colors: Tuple[Tuple[float, float, float], ...]


def grounding_blocks(grounding: Sequence[AttributeGrounding]) -> List[Tuple[int, int]]:
    """[start, end) of the code coordinates owned by every attribute, in slot order."""
    offsets = np.cumsum([0] + [len(g.words) for g in grounding])
    return [(int(a), int(b)) for a, b in zip(offsets[:-1], offsets[1:])]


def slot_masks(grounding: Sequence[AttributeGrounding], token_embedding_dim: int) -> torch.Tensor:
    """(I, E) masks restricting pseudo-token i to the coordinates of attribute i."""
    masks = torch.zeros(len(grounding), token_embedding_dim)
    for slot, (start, end) in enumerate(grounding_blocks(grounding)):
        masks[slot, start:end] = 1.0
    return masks


def _check_grounding_fits(grounding: Sequence[AttributeGrounding], config: JointSpaceConfig) -> int:
    num_codes = sum(len(g.words) for g in grounding)
    if not grounding or any(len(g.words) != len(g.colors) or len(g.words) < 2 for g in grounding):
        raise ConfigError("Every grounded attribute needs at least two words, one colour each")
    if (
        num_codes > config.hidden_dim
        or num_codes + 1 > config.feature_dim
        or num_codes + 2 > config.token_embedding_dim
    ):
        raise ConfigError(
            f"Grounding {num_codes} attribute words needs joint_space.hidden_dim >= {num_codes}, "
            f"feature_dim >= {num_codes + 1} and token_embedding_dim >= {num_codes + 2}; "
            "enlarge them or set encoders.grounded to false"
        )
    return num_codes


def _region_patch_weights(
    box: Tuple[float, float, float, float], config: JointSpaceConfig
) -> torch.Tensor:
    """
    (rows, cols) patch weights averaging a region, summing to 1.

    Patches lying wholly inside the box share the weight; when there are none,
    every patch is weighted by the fraction of it the box covers.
    """
    height, width = config.image_size
    size = config.patch_size
    r0, r1, c0, c1 = box

    def overlap(start: float, end: float, length: int) -> torch.Tensor:
        edges = torch.arange(length // size, dtype=torch.float64) * size
        covered = torch.minimum(edges + size, torch.tensor(end * length, dtype=torch.float64)) - torch.maximum(
            edges, torch.tensor(start * length, dtype=torch.float64)
        )
        return covered.clamp(min=0.0) / size

    coverage = overlap(r0, r1, height)[:, None] * overlap(c0, c1, width)[None, :]
    inside = coverage >= 1.0 - 1e-9
    weights = inside.to(torch.float64) if inside.any() else coverage
    if weights.sum() <= 0:
        raise ConfigError(f"Region box {list(box)} covers no pixel of the image")
    return weights / weights.sum()


def _colour_units(grounding: AttributeGrounding) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    One-vs-rest colour units of an attribute.

    Unit j fires on <mean - centre, u_j> > theta_j, where u_j points from the
    centre of the candidate colours' bounding box to colour j and theta_j sits
    halfway between colour j and the closest other candidate along u_j.

    Returns
    -------
    directions : (K, 3), thresholds : (K,), gains : (K,)
    """
    colors = np.asarray(grounding.colors, dtype=np.float64)
    centre = (colors.min(axis=0) + colors.max(axis=0)) / 2
    offsets = colors - centre
    lengths = np.linalg.norm(offsets, axis=1)
    if (lengths == 0).any():
        raise ConfigError(f"Attribute '{grounding.name}' has a colour at the centre of its palette")
    directions = offsets / lengths[:, None]
    projections = offsets @ directions.T
    np.fill_diagonal(projections, -np.inf)
    nearest = projections.max(axis=0)
    margins = (lengths - nearest) / 2
    if (margins <= 0).any():
        raise ConfigError(f"The colours of attribute '{grounding.name}' are not separable")
    thresholds = (lengths + nearest) / 2 + directions @ centre
    return directions, thresholds, GROUNDING_GAIN / margins


def _ground_visual(
    visual: ReferenceVisualEncoder,
    grounding: Sequence[AttributeGrounding],
    rotation: torch.Tensor,
) -> None:
    config = visual.config
    weight = torch.zeros(config.hidden_dim, 3, visual.num_patches, dtype=torch.float64)
    bias = torch.zeros(config.hidden_dim, dtype=torch.float64)
    for g, (start, _) in zip(grounding, grounding_blocks(grounding)):
        patches = _region_patch_weights(g.box, config).flatten()
        directions, thresholds, gains = _colour_units(g)
        for j in range(len(g.words)):
            unit = start + j
            weight[unit] = gains[j] * torch.from_numpy(directions[j])[:, None] * patches[None, :]
            bias[unit] = -gains[j] * thresholds[j]
    num_codes = sum(len(g.words) for g in grounding)
    head = torch.zeros(config.feature_dim, config.hidden_dim, dtype=torch.float64)
    head[:, :num_codes] = rotation[:, :num_codes]
    with torch.no_grad():
        visual.patch_proj.weight.copy_(weight.flatten(1))
        visual.patch_proj.bias.copy_(bias)
        visual.head.weight.copy_(head)
        visual.head.bias.zero_()


def _ground_text(
    text: ReferenceTextEncoder,
    grounding: Sequence[AttributeGrounding],
    vocab: Vocabulary,
    rotation: torch.Tensor,
    generator: torch.Generator,
) -> None:
    config = text.config
    num_codes = sum(len(g.words) for g in grounding)
    filler, syntax = num_codes, num_codes + 1

    rows = torch.zeros(config.vocab_size, config.token_embedding_dim, dtype=torch.float64)
    rows[:, syntax] = torch.empty(config.vocab_size, dtype=torch.float64).uniform_(
        0.5, 1.5, generator=generator
    )
    codes: Dict[int, List[int]] = {}
    for g, (start, _) in zip(grounding, grounding_blocks(grounding)):
        for j, word in enumerate(g.words):
            row = vocab.row_index(vocab.word_id(word))
            if row >= config.vocab_size:
                raise ConfigError(
                    f"Word '{word}' maps to embedding row {row}; joint_space.vocab_size is "
                    f"{config.vocab_size}"
                )
            codes.setdefault(row, []).append(start + j)
    # equal norms for every attribute word, whatever the number of slots it appears in
    most = max(len(coords) for coords in codes.values())
    for row, coords in codes.items():
        rows[row] = 0.0
        rows[row, coords] = 1.0
        rows[row, filler] = math.sqrt(most - len(coords))

    positions = torch.zeros(config.max_sequence_length, config.token_embedding_dim, dtype=torch.float64)
    positions[:, syntax] = torch.empty(config.max_sequence_length, dtype=torch.float64).normal_(
        0.0, 0.1, generator=generator
    )
    projection = torch.zeros(config.feature_dim, config.token_embedding_dim, dtype=torch.float64)
    projection[:, :num_codes] = rotation[:, :num_codes]
    projection[:, syntax] = SYNTAX_SCALE * rotation[:, num_codes]
    with torch.no_grad():
        text.token_embedding.weight.copy_(rows)
        text.positional_embedding.copy_(positions)
        text.projection.weight.copy_(projection)
        text.projection.bias.zero_()


def build_reference_encoders(
    seed: int,
    config: JointSpaceConfig,
    grounding: Optional[Sequence[AttributeGrounding]] = None,
    vocab: Optional[Vocabulary] = None,
) -> EncoderPair:
    """
    Build frozen, seeded reference encoders.

    The same seed always gives bit-identical weights: every tensor is drawn
    from one `torch.Generator` in a fixed order.

    Parameters
    ----------
    seed : int
        Seed of every random draw.
    config : JointSpaceConfig
        Dimensionalities of the space.
    grounding : sequence of AttributeGrounding, optional
        When given, both encoders share a code of one coordinate per
        (attribute, word): the visual encoder reads the mean colour of every
        attribute's region and scores each candidate colour, and every word's
        embedding row marks the coordinates of the attributes it names. A
        seeded rotation maps the code into the feature space. Without it,
        every weight is random.
    vocab : Vocabulary, optional
        Word ids of the grounding words; required with `grounding`.

    Raises
    ------
    ConfigError
        If the grounding does not fit the configured dimensions or its colours
        cannot be told apart.
    """
    config.validate()
    generator = torch.Generator().manual_seed(seed)
    visual = ReferenceVisualEncoder(config)
    text = ReferenceTextEncoder(config)

    if grounding is None:
        uniform_fan_in_(visual.patch_proj, generator)
        uniform_fan_in_(visual.head, generator)
        with torch.no_grad():
            text.token_embedding.weight.normal_(
                0.0, 1.0 / math.sqrt(config.token_embedding_dim), generator=generator
            )
            text.positional_embedding.normal_(0.0, 0.1, generator=generator)
        uniform_fan_in_(text.projection, generator)
        logger.debug(f"Built reference encoders with seed {seed}")
        return EncoderPair(visual, text).freeze()

    if vocab is None:
        raise ConfigError("Grounded encoders need the vocabulary of the attribute words")
    _check_grounding_fits(grounding, config)
    rotation, _ = torch.linalg.qr(
        torch.randn(config.feature_dim, config.feature_dim, generator=generator, dtype=torch.float64)
    )
    _ground_visual(visual, grounding, rotation)
    _ground_text(text, grounding, vocab, rotation, generator)
    logger.debug(
        f"Built reference encoders with seed {seed}, grounded on "
        f"{', '.join(g.name for g in grounding)}"
    )
    return EncoderPair(visual, text).freeze()


def save_encoders(
    encoders: EncoderPair, path: Union[str, Path], config_digest: str = ""
) -> Path:
    """Write both encoders into one checkpoint container."""
    return save_checkpoint(
        encoders.weights().arrays,
        path,
        config_digest=config_digest,
        metadata={
            "architecture": REFERENCE_ARCHITECTURE,
            "joint_space": encoders.config.to_dict(),
        },
    )


def _build_reference_from_arrays(
    config: JointSpaceConfig, arrays: Dict[str, np.ndarray]
) -> EncoderPair:
    visual = ReferenceVisualEncoder(config)
    text = ReferenceTextEncoder(config)
    load_module_arrays(visual, arrays, "visual.")
    load_module_arrays(text, arrays, "text.")
    return EncoderPair(visual, text)


ADAPTERS: Dict[str, Callable[[JointSpaceConfig, Dict[str, np.ndarray]], EncoderPair]] = {
    REFERENCE_ARCHITECTURE: _build_reference_from_arrays,
}


def load_encoder_adapter(path: Union[str, Path]) -> EncoderPair:
    """
    Restore frozen encoders from a checkpoint container.

    The manifest metadata names the architecture and carries the joint-space
    config; the architecture must be registered in `ADAPTERS`.

    Raises
    ------
    CheckpointError
        If the file is missing or garbled, or an expected array is absent
        (the message names the array).
    """
    checkpoint = load_checkpoint(path)
    architecture = checkpoint.metadata.get("architecture")
    if architecture not in ADAPTERS:
        raise CheckpointError(
            f"Checkpoint '{path}' has unsupported encoder architecture {architecture!r}"
        )
    if "joint_space" not in checkpoint.metadata:
        raise CheckpointError(f"Checkpoint '{path}' carries no joint_space config")
    config = JointSpaceConfig.from_dict(checkpoint.metadata["joint_space"]).validate()
    return ADAPTERS[architecture](config, checkpoint.arrays).freeze()
