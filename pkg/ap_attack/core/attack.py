"""
Prompt-driven semantic attack (second training stage).

The generator G produces a perturbation field that is scaled by epsilon and
added to the image. It is trained to push the adversarial image's
attribute pseudo-tokens, and its surrogate re-id feature, towards the least
similar identity of the batch and away from the clean image.

Classes
-------
AttackConfig
    Stage-2 hyperparameters.
AttackEpochLog
    One training-log record.

Functions
---------
apply_perturbation(G, x, epsilon) -> x_adv
hardest_negative(anchors, pids, metric) -> index per anchor
triplet_hinge(clean, adv, pids, alpha, metric) -> scalar
semantic_attack_loss(clean_tokens, adv_tokens, pids, alpha) -> scalar
surrogate_attack_loss(clean_feats, adv_feats, pids, alpha) -> scalar
total_loss(surrogate_loss, semantic_loss) -> scalar
train_attack(dataset, encoders, nets, surrogate, generator, config) -> AttackResult
"""
from __future__ import annotations

import logging

from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from dataclasses_json import dataclass_json
from torch import nn

from ap_attack.core.checkpoint import weights_checksum
from ap_attack.core.default.constants import (
    DEFAULT_EPSILON,
    DEFAULT_LEARNING_RATE,
    DEFAULT_MARGIN,
)
from ap_attack.core.encoders import EncoderPair, is_frozen
from ap_attack.core.errors import (
    BatchCompositionError,
    ConfigError,
    FreezeViolationError,
    InputError,
    TrainingDivergedError,
)
from ap_attack.core.generator import GeneratorConfig, PerturbationGenerator, save_generator
from ap_attack.core.inversion import InversionNetworks, compose_prompt_batch
from ap_attack.core.prompt import TokenizedPrompt, Vocabulary
from ap_attack.core.sampler import PKSampler

if TYPE_CHECKING:
    from ap_attack.data.reid_folder import ReidDataset

logger = logging.getLogger(__name__)

FeatureExtractor = Callable[[torch.Tensor], torch.Tensor]

METRICS = ("l2", "cosine")
LOSS_VARIANTS = ("surrogate", "global_visual", "integral_text", "semantic")


def apply_perturbation(
    generator: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    epsilon: float = DEFAULT_EPSILON,
) -> torch.Tensor:
    """
    Adversarial image x' = clip(x + epsilon * G(x), 0, 1).

    The generator output is clamped to [-1, 1] first, so ||x' - x||_inf <= epsilon
    holds whatever the generator returns.

    Raises
    ------
    InputError
        If epsilon is outside (0, 1) or x leaves [0, 1].
    """
    if not 0 < epsilon < 1:
        raise InputError(f"epsilon must lie in (0, 1), got {epsilon}")
    if not torch.isfinite(x).all() or x.min() < 0 or x.max() > 1:
        raise InputError("Images must be finite with values in [0, 1]")
    delta = epsilon * generator(x).clamp(-1.0, 1.0)
    return (x + delta).clamp(0.0, 1.0)


def _pairwise_distances(anchors: torch.Tensor, metric: str) -> torch.Tensor:
    flat = anchors.reshape(anchors.shape[0], -1)
    if metric == "l2":
        return torch.linalg.vector_norm(flat.unsqueeze(1) - flat.unsqueeze(0), dim=-1)
    if metric == "cosine":
        return 1.0 - F.cosine_similarity(flat.unsqueeze(1), flat.unsqueeze(0), dim=-1)
    raise ConfigError(f"Unknown distance metric '{metric}', expected one of {METRICS}")


@torch.no_grad()
def hardest_negative(
    anchors: torch.Tensor, pids: Sequence[int], metric: str = "l2"
) -> torch.Tensor:
    """
    Index of the least similar different-identity batch member of each anchor.

    Ties go to the lowest index.

    Raises
    ------
    BatchCompositionError
        If some anchor has no different-identity member in the batch.
    """
    if len(pids) != anchors.shape[0]:
        raise InputError(f"Got {len(pids)} pids for {anchors.shape[0]} anchors")
    labels = torch.as_tensor(list(pids), device=anchors.device)
    negative = labels.unsqueeze(0) != labels.unsqueeze(1)
    missing = (~negative.any(dim=1)).nonzero().flatten().tolist()
    if missing:
        raise BatchCompositionError(f"Anchors {missing} have no negative in the batch")
    distances = _pairwise_distances(anchors, metric)
    distances = distances.masked_fill(~negative, float("-inf"))
    return distances.argmax(dim=1)


def triplet_hinge(
    clean: torch.Tensor,
    adv: torch.Tensor,
    pids: Sequence[int],
    alpha: float = DEFAULT_MARGIN,
    metric: str = "l2",
) -> torch.Tensor:
    """
    Batch mean of max(0, ||adv - clean[neg]|| - ||adv - clean|| + alpha).

    Negatives are picked on the clean representations.
    """
    if clean.shape != adv.shape:
        raise InputError(
            f"Clean and adversarial batches differ in shape: {list(clean.shape)} vs {list(adv.shape)}"
        )
    clean = clean.reshape(clean.shape[0], -1)
    adv = adv.reshape(adv.shape[0], -1)
    negatives = clean[hardest_negative(clean, pids, metric)]
    to_negative = torch.linalg.vector_norm(adv - negatives, dim=-1)
    to_clean = torch.linalg.vector_norm(adv - clean, dim=-1)
    return F.relu(to_negative - to_clean + alpha).mean()


def semantic_attack_loss(
    clean_tokens: torch.Tensor,
    adv_tokens: torch.Tensor,
    pids: Sequence[int],
    alpha: float = DEFAULT_MARGIN,
    metric: str = "l2",
) -> torch.Tensor:
    """
    Sum over attribute spaces of the per-attribute triplet hinge.

    Parameters
    ----------
    clean_tokens, adv_tokens : torch.Tensor
        Pseudo-token batches (N, I, e), aligned samplewise.
    pids : Sequence[int]
        Identity labels of the batch.
    alpha : float
        Margin.
    metric : str
        Negative-selection distance, ``l2`` or ``cosine``.
    """
    if clean_tokens.dim() != 3 or clean_tokens.shape != adv_tokens.shape:
        raise InputError(
            f"Expected aligned (N, I, e) pseudo-token batches, got "
            f"{list(clean_tokens.shape)} and {list(adv_tokens.shape)}"
        )
    terms = [
        triplet_hinge(clean_tokens[:, i], adv_tokens[:, i], pids, alpha, metric)
        for i in range(clean_tokens.shape[1])
    ]
    return torch.stack(terms).sum()


def surrogate_attack_loss(
    clean_feats: torch.Tensor,
    adv_feats: torch.Tensor,
    pids: Sequence[int],
    alpha: float = DEFAULT_MARGIN,
    metric: str = "l2",
) -> torch.Tensor:
    """Triplet hinge in the surrogate's feature space."""
    return triplet_hinge(clean_feats, adv_feats, pids, alpha, metric)


def total_loss(
    surrogate_loss: torch.Tensor, semantic_loss: torch.Tensor, semantic_weight: float = 1.0
) -> torch.Tensor:
    return surrogate_loss + semantic_weight * semantic_loss


@dataclass_json
@dataclass
class AttackConfig:
    """
    Stage-2 hyperparameters.

    Attributes
    ----------
    loss_variant : str
        ``surrogate`` trains on the surrogate hinge alone; ``global_visual``
        adds a hinge on joint-space image features; ``integral_text`` adds a
        hinge on composed text embeddings; ``semantic`` adds the per-attribute
        pseudo-token hinge.
    betas : tuple of float
        Adam betas of the generator optimizer.
    """

    epsilon: float = DEFAULT_EPSILON
    alpha: float = DEFAULT_MARGIN
    lr: float = DEFAULT_LEARNING_RATE
    epochs: int = 40
    p: int = 4
    k: int = 2
    metric: str = "l2"
    semantic_weight: float = 1.0
    loss_variant: str = "semantic"
    betas: Tuple[float, float] = (0.5, 0.999)
    seed: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)

    def validate(self) -> "AttackConfig":
        if not 0 < self.epsilon < 1:
            raise ConfigError(f"stage2.epsilon must lie in (0, 1), got {self.epsilon}")
        if self.alpha < 0:
            raise ConfigError(f"stage2.alpha must not be negative, got {self.alpha}")
        if self.epochs < 0 or self.lr < 0:
            raise ConfigError("stage2.epochs and stage2.lr must not be negative")
        if self.p < 2 or self.k < 1:
            raise ConfigError("stage2.p must be at least 2 and stage2.k at least 1")
        if self.metric not in METRICS:
            raise ConfigError(f"stage2.metric must be one of {METRICS}, got '{self.metric}'")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ConfigError(
                f"stage2.loss_variant must be one of {LOSS_VARIANTS}, got '{self.loss_variant}'"
            )
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"stage2.betas must be two values in [0, 1), got {self.betas}")
        self.generator.validate()
        return self


@dataclass_json
@dataclass
class AttackEpochLog:
    epoch: int
    surrogate_loss: float
    semantic_loss: float
    total: float
    max_perturbation: float


@dataclass
class AttackResult:
    generator: PerturbationGenerator
    log: List[AttackEpochLog] = field(default_factory=list)


def _frozen_checksums(
    encoders: EncoderPair, nets: InversionNetworks, surrogate: FeatureExtractor
) -> Dict[str, str]:
    checksums = {"encoders": encoders.checksum(), "inversion": weights_checksum(nets)}
    if isinstance(surrogate, nn.Module):
        checksums["surrogate"] = weights_checksum(surrogate)
    return checksums


def _require_frozen(
    encoders: EncoderPair, nets: InversionNetworks, surrogate: FeatureExtractor
) -> None:
    components = {
        "visual encoder": encoders.visual,
        "text encoder": encoders.text,
        "inversion networks": nets,
    }
    if isinstance(surrogate, nn.Module):
        components["surrogate"] = surrogate
    for name, module in components.items():
        if not is_frozen(module):
            raise FreezeViolationError(f"The {name} must be frozen before attack training")


class AttackObjective:
    """Evaluates the configured stage-2 loss on one batch."""

    def __init__(
        self,
        config: AttackConfig,
        encoders: EncoderPair,
        nets: InversionNetworks,
        surrogate: FeatureExtractor,
        tokens: Optional[TokenizedPrompt] = None,
        vocab: Optional[Vocabulary] = None,
    ):
        if config.loss_variant == "integral_text" and tokens is None:
            raise ConfigError("The integral_text loss variant needs the tokenized template")
        self.config = config
        self.encoders = encoders
        self.nets = nets
        self.surrogate = surrogate
        self.tokens = tokens
        self.vocab = vocab

    def _semantic_spaces(
        self, x: torch.Tensor, x_adv: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        visual = self.encoders.visual
        with torch.no_grad():
            v = visual(x)
        v_adv = visual(x_adv)
        if self.config.loss_variant == "global_visual":
            return v, v_adv
        with torch.no_grad():
            s = self.nets(v)
        s_adv = self.nets(v_adv)
        if self.config.loss_variant == "semantic":
            return s, s_adv
        with torch.no_grad():
            t = compose_prompt_batch(s, self.tokens, self.encoders.text, self.vocab)
        t_adv = compose_prompt_batch(s_adv, self.tokens, self.encoders.text, self.vocab)
        return t, t_adv

    def __call__(
        self, x: torch.Tensor, x_adv: torch.Tensor, pids: Sequence[int]
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(total, surrogate term, semantic term) of one batch."""
        config = self.config
        with torch.no_grad():
            m = self.surrogate(x)
        m_adv = self.surrogate(x_adv)
        surrogate_term = surrogate_attack_loss(m, m_adv, pids, config.alpha, config.metric)

        if config.loss_variant == "surrogate":
            semantic_term = torch.zeros((), dtype=surrogate_term.dtype)
        elif config.loss_variant == "semantic":
            clean, adv = self._semantic_spaces(x, x_adv)
            semantic_term = semantic_attack_loss(clean, adv, pids, config.alpha, config.metric)
        else:
            clean, adv = self._semantic_spaces(x, x_adv)
            semantic_term = triplet_hinge(clean, adv, pids, config.alpha, config.metric)
        return (
            total_loss(surrogate_term, semantic_term, config.semantic_weight),
            surrogate_term,
            semantic_term,
        )


def train_attack(
    dataset: "ReidDataset",
    encoders: EncoderPair,
    nets: InversionNetworks,
    surrogate: FeatureExtractor,
    generator: PerturbationGenerator,
    config: AttackConfig,
    tokens: Optional[TokenizedPrompt] = None,
    vocab: Optional[Vocabulary] = None,
    checkpoint_path: Optional[Union[str, Path]] = None,
    config_digest: str = "",
) -> AttackResult:
    """
    Train the perturbation generator with Adam on P x K identity batches.

    Per batch: generate x', extract m and m' with the surrogate, extract v and
    v' and invert them to clean and adversarial pseudo-tokens, evaluate the
    configured objective and step G.

    Raises
    ------
    FreezeViolationError
        If the encoders, inversion networks or surrogate are not frozen on entry
        or changed during training.
    TrainingDivergedError
        On a non-finite loss, naming the epoch, batch and loss terms.
    """
    config.validate()
    generator.check_image_size(tuple(dataset.images.shape[-2:]))
    _require_frozen(encoders, nets, surrogate)
    checksums = _frozen_checksums(encoders, nets, surrogate)

    objective = AttackObjective(config, encoders, nets, surrogate, tokens, vocab)
    sampler = PKSampler(dataset.pids, config.p, config.k, seed=config.seed)
    generator.requires_grad_(True)
    generator.train()
    optimizer = torch.optim.Adam(generator.parameters(), lr=config.lr, betas=config.betas)
    log: List[AttackEpochLog] = []

    for epoch in range(config.epochs):
        sums = torch.zeros(2, dtype=torch.float64)
        max_perturbation = 0.0
        num_batches = 0
        for batch_index, batch in enumerate(sampler.batches(epoch)):
            x = dataset.images[batch]
            pids = [dataset.pids[i] for i in batch]
            x_adv = apply_perturbation(generator, x, config.epsilon)
            loss, surrogate_term, semantic_term = objective(x, x_adv, pids)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"Attack loss is not finite at epoch {epoch}, batch {batch_index}: "
                    f"surrogate={surrogate_term.item()}, semantic={semantic_term.item()}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            sums += torch.tensor(
                [surrogate_term.item(), semantic_term.item()], dtype=torch.float64
            )
            max_perturbation = max(max_perturbation, (x_adv - x).abs().max().item())
            num_batches += 1

        means = (sums / max(num_batches, 1)).tolist()
        record = AttackEpochLog(
            epoch=epoch,
            surrogate_loss=means[0],
            semantic_loss=means[1],
            total=means[0] + config.semantic_weight * means[1],
            max_perturbation=max_perturbation,
        )
        log.append(record)
        logger.info(f"attack epoch {epoch}: loss {record.total:.4f}")

    changed = [
        name
        for name, checksum in _frozen_checksums(encoders, nets, surrogate).items()
        if checksums[name] != checksum
    ]
    if changed:
        raise FreezeViolationError(f"Frozen components changed during attack training: {changed}")

    generator.requires_grad_(False)
    generator.eval()
    if checkpoint_path is not None:
        save_generator(generator, checkpoint_path, config_digest)
    return AttackResult(generator=generator, log=log)


@torch.no_grad()
def attack_images(
    generator: PerturbationGenerator,
    images: torch.Tensor,
    epsilon: float = DEFAULT_EPSILON,
    batch_size: int = 32,
) -> torch.Tensor:
    """Adversarial versions of a whole image tensor, in chunks."""
    return torch.cat(
        [
            apply_perturbation(generator, images[i : i + batch_size], epsilon)
            for i in range(0, len(images), batch_size)
        ]
    )
