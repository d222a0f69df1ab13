"""
Attribute inversion networks and their contrastive training.

Each of the I inversion networks maps an image feature v to one pseudo-token
in token-embedding space. The pseudo-tokens are written into the prompt
template and encoded by the frozen text encoder; the networks are trained so
that the composed text embedding retrieves images of the same identity and
vice versa.

Classes
-------
InversionNetwork
    d -> 2e -> 2e -> e fully-connected map with GELU in between.
InversionNetworks
    The I networks of one template, applied side by side.
InversionConfig
    Stage-1 hyperparameters.
InversionEpochLog
    One training-log record.

Functions
---------
invert(v, nets) -> pseudo-tokens
compose_prompt_batch(pseudo_batch, tokens, text_encoder) -> text features
inversion_contrastive_loss(image_feats, text_feats, pids, tau) -> scalar
train_inversion(dataset, encoders, nets, tokens, config) -> InversionResult
save_inversion(nets, path) / load_inversion(path)
"""
from __future__ import annotations

import logging

from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple, Union

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
from ap_attack.core.default.constants import DEFAULT_LEARNING_RATE, DEFAULT_TAU
from ap_attack.core.encoders import (
    EncoderPair,
    ReferenceTextEncoder,
    freeze_,
    is_frozen,
    uniform_fan_in_,
)
from ap_attack.core.errors import (
    BatchCompositionError,
    CheckpointError,
    ConfigError,
    FreezeViolationError,
    InputError,
    TrainingDivergedError,
)
from ap_attack.core.prompt import (
    TokenizedPrompt,
    Vocabulary,
    inject_pseudo_tokens,
    similarity_logits,
)
from ap_attack.core.sampler import PKSampler

if TYPE_CHECKING:
    from ap_attack.data.reid_folder import ReidDataset

logger = logging.getLogger(__name__)


class InversionNetwork(nn.Module):
    """Three fully-connected layers; the last one is linear."""

    def __init__(self, feature_dim: int, token_embedding_dim: int):
        super().__init__()
        hidden = 2 * token_embedding_dim
        self.layers = nn.Sequential(
            nn.Linear(feature_dim, hidden),
            nn.GELU(),
            nn.Linear(hidden, hidden),
            nn.GELU(),
            nn.Linear(hidden, token_embedding_dim),
        )

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return self.layers(v)

    def linear_layers(self) -> List[nn.Linear]:
        return [layer for layer in self.layers if isinstance(layer, nn.Linear)]


class InversionNetworks(nn.Module):
    """
    The I attribute inversion networks of one template.

    Calling the module maps features (N, d) to pseudo-tokens (N, I, e).
    Pseudo-token i is multiplied by row i of `slot_masks` (I, e), which keeps
    each slot to the coordinates of its own attribute in a grounded space; the
    default mask lets every coordinate through.
    """

    def __init__(
        self,
        num_slots: int,
        feature_dim: int,
        token_embedding_dim: int,
        seed: int = 0,
        slot_masks: Optional[torch.Tensor] = None,
    ):
        super().__init__()
        if num_slots < 1:
            raise ConfigError(f"Need at least one inversion network, got {num_slots}")
        self.feature_dim = feature_dim
        self.token_embedding_dim = token_embedding_dim
        self.nets = nn.ModuleList(
            InversionNetwork(feature_dim, token_embedding_dim) for _ in range(num_slots)
        )
        generator = torch.Generator().manual_seed(seed)
        for net in self.nets:
            for layer in net.linear_layers():
                uniform_fan_in_(layer, generator)
        if slot_masks is None:
            slot_masks = torch.ones(num_slots, token_embedding_dim)
        if tuple(slot_masks.shape) != (num_slots, token_embedding_dim):
            raise ConfigError(
                f"Slot masks of shape {list(slot_masks.shape)} do not match "
                f"{num_slots} slots of width {token_embedding_dim}"
            )
        self.register_buffer("slot_masks", slot_masks.detach().to(torch.float32).clone())

    @property
    def num_slots(self) -> int:
        return len(self.nets)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        pseudo = torch.stack([net(v) for net in self.nets], dim=-2)
        return pseudo * self.slot_masks.to(pseudo.dtype)

    def freeze(self) -> "InversionNetworks":
        freeze_(self)
        return self


def invert(v: torch.Tensor, nets: InversionNetworks) -> torch.Tensor:
    """
    Map image features to attribute pseudo-tokens, S_i = f_i(v).

    Parameters
    ----------
    v : torch.Tensor
        One feature (d,) or a batch (N, d).
    nets : InversionNetworks
        The inversion networks.

    Returns
    -------
    torch.Tensor
        (I, e) for a single feature, (N, I, e) for a batch.

    Raises
    ------
    InputError
        If the feature dimension differs from the networks' input size.
    """
    if v.dim() not in (1, 2) or v.shape[-1] != nets.feature_dim:
        raise InputError(
            f"Expected features of dimension {nets.feature_dim}, got shape {list(v.shape)}"
        )
    return nets(v)


def compose_prompt_batch(
    pseudo_batch: torch.Tensor,
    tokens: TokenizedPrompt,
    text_encoder: ReferenceTextEncoder,
    vocab: Optional[Vocabulary] = None,
) -> torch.Tensor:
    """Composed text embeddings t_hat (N, d): inject each pseudo set, then encode."""
    sequences = inject_pseudo_tokens(
        tokens, pseudo_batch, text_encoder.token_embedding_table, vocab
    )
    return text_encoder.encode_token_sequence(sequences)


def _positive_mask(pids: Sequence[int], include_self: bool, device) -> torch.Tensor:
    labels = torch.as_tensor(list(pids), device=device)
    mask = labels.unsqueeze(0) == labels.unsqueeze(1)
    if not include_self:
        mask = mask & ~torch.eye(len(labels), dtype=torch.bool, device=device)
    return mask


def _mean_positive_nll(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    log_prob = F.log_softmax(logits, dim=1)
    per_sample = -(log_prob * mask).sum(dim=1) / mask.sum(dim=1)
    return per_sample.mean()


def inversion_contrastive_terms(
    image_feats: torch.Tensor,
    text_feats: torch.Tensor,
    pids: Sequence[int],
    tau: float = DEFAULT_TAU,
    include_self: bool = True,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Identity-aware image->text and text->image contrastive terms.

    Each anchor's term is the negative mean log-softmax over its positive set
    (batch members sharing its pid), averaged over the batch.

    Raises
    ------
    BatchCompositionError
        If N < 2 or an anchor has no positive.
    """
    if image_feats.shape[0] < 2:
        raise BatchCompositionError(
            f"Contrastive training needs at least 2 samples, got {image_feats.shape[0]}"
        )
    if len(pids) != image_feats.shape[0]:
        raise InputError(f"Got {len(pids)} pids for {image_feats.shape[0]} samples")
    mask = _positive_mask(pids, include_self, image_feats.device)
    empty = (mask.sum(dim=1) == 0).nonzero().flatten().tolist()
    if empty:
        raise BatchCompositionError(f"Samples {empty} have no positive in the batch")

    logits = similarity_logits(image_feats, text_feats, tau)
    mask = mask.to(logits.dtype)
    return _mean_positive_nll(logits, mask), _mean_positive_nll(logits.T, mask.T)


def inversion_contrastive_loss(
    image_feats: torch.Tensor,
    text_feats: torch.Tensor,
    pids: Sequence[int],
    tau: float = DEFAULT_TAU,
    include_self: bool = True,
) -> torch.Tensor:
    """Total inversion loss L_i2t + L_t2i."""
    loss_i2t, loss_t2i = inversion_contrastive_terms(
        image_feats, text_feats, pids, tau, include_self
    )
    return loss_i2t + loss_t2i


@dataclass_json
@dataclass
class InversionConfig:
    """Stage-1 hyperparameters."""

    epochs: int = 300
    p: int = 4
    k: int = 2
    lr: float = DEFAULT_LEARNING_RATE
    tau: float = DEFAULT_TAU
    include_self: bool = True
    seed: int = 0

    def validate(self) -> "InversionConfig":
        if self.epochs < 0:
            raise ConfigError("stage1.epochs must not be negative")
        if self.p < 2 or self.k < 1:
            raise ConfigError("stage1.p must be at least 2 and stage1.k at least 1")
        if self.lr < 0:
            raise ConfigError("stage1.lr must not be negative")
        if self.tau <= 0:
            raise ConfigError("stage1.tau must be positive")
        return self


@dataclass_json
@dataclass
class InversionEpochLog:
    epoch: int
    loss_i2t: float
    loss_t2i: float
    total: float


@dataclass
class InversionResult:
    nets: InversionNetworks
    log: List[InversionEpochLog] = field(default_factory=list)


@torch.no_grad()
def encode_images(visual, images: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    """Visual features of a whole image tensor, in chunks."""
    return torch.cat(
        [visual.encode_image(images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
    )


def train_inversion(
    dataset: "ReidDataset",
    encoders: EncoderPair,
    nets: InversionNetworks,
    tokens: TokenizedPrompt,
    config: InversionConfig,
    vocab: Optional[Vocabulary] = None,
    checkpoint_path: Optional[Union[str, Path]] = None,
    config_digest: str = "",
) -> InversionResult:
    """
    Train the inversion networks with Adam on P x K identity batches.

    Parameters
    ----------
    dataset : ReidDataset
        Training images and labels.
    encoders : EncoderPair
        The frozen joint space.
    nets : InversionNetworks
        Networks to train, updated in place.
    tokens : TokenizedPrompt
        The tokenized template; it must have one placeholder per network.
    config : InversionConfig
        Hyperparameters.
    checkpoint_path : str or Path, optional
        Where to save the trained networks.

    Returns
    -------
    InversionResult
        The frozen networks and one log record per epoch.

    Raises
    ------
    TrainingDivergedError
        On a non-finite loss, naming the epoch, batch and loss terms.
    FreezeViolationError
        If an encoder is not frozen on entry or its weights changed during
        training.
    """
    config.validate()
    for name, module in (("visual encoder", encoders.visual), ("text encoder", encoders.text)):
        if not is_frozen(module):
            raise FreezeViolationError(f"The {name} must be frozen before inversion training")
    if len(tokens.placeholder_positions) != nets.num_slots:
        raise ConfigError(
            f"Template has {len(tokens.placeholder_positions)} slots but there are "
            f"{nets.num_slots} inversion networks"
        )
    encoder_checksum = encoders.checksum()
    sampler = PKSampler(dataset.pids, config.p, config.k, seed=config.seed)
    features = encode_images(encoders.visual, dataset.images)

    nets.requires_grad_(True)
    nets.train()
    optimizer = torch.optim.Adam(nets.parameters(), lr=config.lr)
    log: List[InversionEpochLog] = []

    for epoch in range(config.epochs):
        sums = torch.zeros(2, dtype=torch.float64)
        num_batches = 0
        for batch_index, batch in enumerate(sampler.batches(epoch)):
            v = features[batch]
            pids = [dataset.pids[i] for i in batch]
            t_hat = compose_prompt_batch(invert(v, nets), tokens, encoders.text, vocab)
            loss_i2t, loss_t2i = inversion_contrastive_terms(
                v, t_hat, pids, config.tau, config.include_self
            )
            loss = loss_i2t + loss_t2i
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"Inversion loss is not finite at epoch {epoch}, batch {batch_index}: "
                    f"loss_i2t={loss_i2t.item()}, loss_t2i={loss_t2i.item()}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            sums += torch.tensor([loss_i2t.item(), loss_t2i.item()], dtype=torch.float64)
            num_batches += 1

        means = (sums / max(num_batches, 1)).tolist()
        record = InversionEpochLog(
            epoch=epoch, loss_i2t=means[0], loss_t2i=means[1], total=means[0] + means[1]
        )
        log.append(record)
        logger.info(f"inversion epoch {epoch}: loss {record.total:.4f}")

    if encoders.checksum() != encoder_checksum:
        raise FreezeViolationError("Encoder weights changed during inversion training")
    nets.freeze()
    if checkpoint_path is not None:
        save_inversion(nets, checkpoint_path, config_digest)
    return InversionResult(nets=nets, log=log)


def save_inversion(
    nets: InversionNetworks, path: Union[str, Path], config_digest: str = ""
) -> Path:
    return save_checkpoint(
        module_arrays(nets),
        path,
        config_digest=config_digest,
        metadata={
            "num_slots": nets.num_slots,
            "feature_dim": nets.feature_dim,
            "token_embedding_dim": nets.token_embedding_dim,
        },
    )


def load_inversion(path: Union[str, Path]) -> InversionNetworks:
    """Restore frozen inversion networks from a checkpoint container."""
    checkpoint = load_checkpoint(path)
    try:
        meta = checkpoint.metadata
        nets = InversionNetworks(
            meta["num_slots"], meta["feature_dim"], meta["token_embedding_dim"]
        )
    except KeyError as e:
        raise CheckpointError(f"Checkpoint '{path}' lacks inversion metadata {e}")
    load_module_arrays(nets, checkpoint.arrays)
    return nets.freeze()


def inversion_checksum(nets: InversionNetworks) -> str:
    return weights_checksum(nets)
