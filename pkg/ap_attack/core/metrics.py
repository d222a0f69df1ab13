"""
Retrieval evaluation.

Average precision, mAP over a query/gallery split with the re-id junk rule
(gallery entries sharing both pid and camid with the query are dropped),
Rank-k accuracy, the average mAP across victims (aAP) and the mAP drop rate
(mDR), plus `evaluate`, which runs clean and adversarial retrieval for a set
of victim feature extractors and collects an `EvaluationReport`.

All scores are kept unrounded; `round_half_up` applies the one-decimal rule
only when a report is displayed.
"""
from __future__ import annotations

import csv
import json
import logging

from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Iterator, List, Mapping, Optional, Sequence, Union

import numpy as np
import torch

from dataclasses_json import dataclass_json
from tabulate import tabulate

from ap_attack.core.attack import attack_images
from ap_attack.core.default.constants import DEFAULT_EPSILON
from ap_attack.core.defenses import Defense, apply_defense_chain
from ap_attack.core.errors import (
    ConfigError,
    EvaluationError,
    InputError,
    NoRelevantItemsError,
    NormalizationError,
)

if TYPE_CHECKING:
    from ap_attack.core.generator import PerturbationGenerator
    from ap_attack.data.reid_folder import ReidDataset

logger = logging.getLogger(__name__)

DISTANCES = ("cosine", "l2")


def average_precision(ranked_relevance: Sequence[bool]) -> float:
    """
    Mean over relevant items of the precision at their rank.

    Raises
    ------
    NoRelevantItemsError
        If no item is relevant.
    """
    relevance = np.asarray(ranked_relevance, dtype=bool)
    num_relevant = int(relevance.sum())
    if num_relevant == 0:
        raise NoRelevantItemsError("Ranking has no relevant item")
    hits = np.cumsum(relevance)
    ranks = np.flatnonzero(relevance) + 1
    return float(np.mean(hits[relevance] / ranks))


@dataclass
class RetrievalSplit:
    """Query and gallery features with their identity and camera labels."""

    query_feats: np.ndarray
    query_pids: np.ndarray
    query_camids: np.ndarray
    gallery_feats: np.ndarray
    gallery_pids: np.ndarray
    gallery_camids: np.ndarray

    def __post_init__(self):
        self.query_feats = np.asarray(self.query_feats, dtype=np.float64)
        self.gallery_feats = np.asarray(self.gallery_feats, dtype=np.float64)
        for name in ("query_pids", "query_camids", "gallery_pids", "gallery_camids"):
            setattr(self, name, np.asarray(getattr(self, name)))
        if len(self.query_feats) == 0 or len(self.gallery_feats) == 0:
            raise InputError("Query and gallery must both be non-empty")
        if not (len(self.query_feats) == len(self.query_pids) == len(self.query_camids)):
            raise InputError("Query features and labels differ in length")
        if not (len(self.gallery_feats) == len(self.gallery_pids) == len(self.gallery_camids)):
            raise InputError("Gallery features and labels differ in length")


def distance_matrix(query: np.ndarray, gallery: np.ndarray, distance: str = "cosine") -> np.ndarray:
    """(Q, G) distances; cosine distance is 1 - cosine similarity."""
    if distance == "cosine":
        q_norm = np.linalg.norm(query, axis=1, keepdims=True)
        g_norm = np.linalg.norm(gallery, axis=1, keepdims=True)
        if (q_norm == 0).any() or (g_norm == 0).any():
            raise NormalizationError("Cannot normalize a zero-norm feature vector")
        return 1.0 - (query / q_norm) @ (gallery / g_norm).T
    if distance == "l2":
        diff = query[:, None, :] - gallery[None, :, :]
        return np.sqrt((diff**2).sum(axis=-1))
    raise ConfigError(f"Unknown retrieval distance '{distance}', expected one of {DISTANCES}")


def ranked_matches(
    split: RetrievalSplit, distance: str = "cosine", exclude_same_camera: bool = True
) -> Iterator[np.ndarray]:
    """Per query, the relevance of the ranked gallery after junk removal."""
    distances = distance_matrix(split.query_feats, split.gallery_feats, distance)
    order = np.argsort(distances, axis=1, kind="stable")
    for q in range(len(split.query_feats)):
        ranked = order[q]
        same_pid = split.gallery_pids[ranked] == split.query_pids[q]
        if exclude_same_camera:
            keep = ~(same_pid & (split.gallery_camids[ranked] == split.query_camids[q]))
            same_pid = same_pid[keep]
        yield same_pid


def mean_average_precision(
    split: RetrievalSplit, distance: str = "cosine", exclude_same_camera: bool = True
) -> float:
    """
    Mean AP over the queries that keep at least one relevant gallery item.

    Raises
    ------
    EvaluationError
        If every query is excluded.
    """
    aps = []
    for relevance in ranked_matches(split, distance, exclude_same_camera):
        try:
            aps.append(average_precision(relevance))
        except NoRelevantItemsError:
            continue
    if not aps:
        raise EvaluationError("No query has a valid gallery match")
    skipped = len(split.query_feats) - len(aps)
    if skipped:
        logger.debug(f"Skipped {skipped} queries without a valid gallery match")
    return float(np.mean(aps))


def rank_k_accuracy(
    split: RetrievalSplit, k: int = 1, distance: str = "cosine", exclude_same_camera: bool = True
) -> float:
    """Fraction of valid queries with a relevant item among the top k."""
    hits = [
        bool(relevance[:k].any())
        for relevance in ranked_matches(split, distance, exclude_same_camera)
        if relevance.any()
    ]
    if not hits:
        raise EvaluationError("No query has a valid gallery match")
    return float(np.mean(hits))


def aap(maps: Sequence[float]) -> float:
    """Average mAP across victim models."""
    if len(maps) == 0:
        raise InputError("aAP needs at least one mAP")
    return float(np.mean(maps))


def mdr(aap_clean: float, aap_adv: float) -> float:
    """mAP drop rate in percent, 100 * (aAP - aAP_adv) / aAP."""
    if aap_clean <= 0:
        raise InputError(f"Clean aAP must be positive, got {aap_clean}")
    return 100.0 * (aap_clean - aap_adv) / aap_clean


def round_half_up(value: float, digits: int = 1) -> float:
    quantum = Decimal(1).scaleb(-digits)
    return float(Decimal(repr(value)).quantize(quantum, rounding=ROUND_HALF_UP))


@dataclass_json
@dataclass
class VictimResult:
    """mAP (in [0, 1]) and Rank-1 of one victim, clean and under attack."""

    name: str
    clean_map: float
    clean_rank1: float
    adversarial_map: Optional[float] = None
    adversarial_rank1: Optional[float] = None


@dataclass_json
@dataclass
class EvaluationReport:
    """
    Per-victim results plus aAP (percent) and mDR (percent).

    `aap_adversarial` and `mdr` stay None when no generator was evaluated.
    """

    victims: List[VictimResult] = field(default_factory=list)
    aap_clean: float = 0.0
    aap_adversarial: Optional[float] = None
    mdr: Optional[float] = None
    defenses: List[str] = field(default_factory=list)
    distance: str = "cosine"
    attack_gallery: bool = False
    epsilon: Optional[float] = None
    config_digest: str = ""
    seed: int = 0

    def save_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        return path

    @classmethod
    def load_json(cls, path: Union[str, Path]) -> "EvaluationReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(
                ["victim", "clean_map", "clean_rank1", "adversarial_map", "adversarial_rank1"]
            )
            for victim in self.victims:
                writer.writerow(
                    [
                        victim.name,
                        victim.clean_map,
                        victim.clean_rank1,
                        "" if victim.adversarial_map is None else victim.adversarial_map,
                        "" if victim.adversarial_rank1 is None else victim.adversarial_rank1,
                    ]
                )
        return path

    def to_table(self) -> str:
        """Percentages rounded half-up to one decimal."""

        def pct(value: Optional[float]) -> str:
            return "-" if value is None else f"{round_half_up(100.0 * value):.1f}"

        rows = [
            [v.name, pct(v.clean_map), pct(v.adversarial_map), pct(v.clean_rank1), pct(v.adversarial_rank1)]
            for v in self.victims
        ]
        table = tabulate(
            rows, headers=["victim", "mAP", "mAP (adv)", "Rank-1", "Rank-1 (adv)"], tablefmt="github"
        )
        summary = f"aAP {round_half_up(self.aap_clean):.1f}"
        if self.aap_adversarial is not None:
            summary += f" | aAP (adv) {round_half_up(self.aap_adversarial):.1f}"
        if self.mdr is not None:
            summary += f" | mDR {round_half_up(self.mdr):.1f}"
        return f"{table}\n{summary}"


FeatureExtractor = Callable[[torch.Tensor], torch.Tensor]


@torch.no_grad()
def extract_features(
    extractor: FeatureExtractor,
    images: torch.Tensor,
    defenses: Sequence[Defense] = (),
    batch_size: int = 64,
) -> np.ndarray:
    """Victim features of (defended) images, float64."""
    images = apply_defense_chain(images, defenses)
    features = [
        extractor(images[i : i + batch_size]) for i in range(0, len(images), batch_size)
    ]
    return torch.cat(features).double().cpu().numpy()


def evaluate(
    victims: Mapping[str, FeatureExtractor],
    query: "ReidDataset",
    gallery: "ReidDataset",
    generator: Optional["PerturbationGenerator"] = None,
    epsilon: float = DEFAULT_EPSILON,
    defenses: Sequence[Defense] = (),
    attack_gallery: bool = False,
    distance: str = "cosine",
    exclude_same_camera: bool = True,
    config_digest: str = "",
    seed: int = 0,
) -> EvaluationReport:
    """
    Clean and, given a generator, adversarial retrieval for every victim.

    Parameters
    ----------
    victims : Mapping[str, FeatureExtractor]
        Victim name -> frozen feature extractor.
    query, gallery : ReidDataset
        The retrieval split.
    generator : PerturbationGenerator, optional
        When given, queries (and the gallery if `attack_gallery`) are attacked.
    defenses : Sequence[Defense]
        Applied to every image a victim encodes, clean or adversarial.

    Returns
    -------
    EvaluationReport
    """
    if not victims:
        raise InputError("Evaluation needs at least one victim")

    adv_query = adv_gallery = None
    if generator is not None:
        adv_query = attack_images(generator, query.images, epsilon)
        adv_gallery = attack_images(generator, gallery.images, epsilon) if attack_gallery else None

    def split_for(extractor, query_images, gallery_images) -> RetrievalSplit:
        return RetrievalSplit(
            query_feats=extract_features(extractor, query_images, defenses),
            query_pids=query.pids,
            query_camids=query.camids,
            gallery_feats=extract_features(extractor, gallery_images, defenses),
            gallery_pids=gallery.pids,
            gallery_camids=gallery.camids,
        )

    results = []
    for name, extractor in victims.items():
        clean = split_for(extractor, query.images, gallery.images)
        result = VictimResult(
            name=name,
            clean_map=mean_average_precision(clean, distance, exclude_same_camera),
            clean_rank1=rank_k_accuracy(clean, 1, distance, exclude_same_camera),
        )
        if adv_query is not None:
            adversarial = split_for(
                extractor, adv_query, adv_gallery if adv_gallery is not None else gallery.images
            )
            result.adversarial_map = mean_average_precision(adversarial, distance, exclude_same_camera)
            result.adversarial_rank1 = rank_k_accuracy(adversarial, 1, distance, exclude_same_camera)
        logger.debug(f"victim {name}: {result}")
        results.append(result)

    report = EvaluationReport(
        victims=results,
        aap_clean=aap([100.0 * r.clean_map for r in results]),
        defenses=[defense.token for defense in defenses],
        distance=distance,
        attack_gallery=attack_gallery,
        config_digest=config_digest,
        seed=seed,
    )
    if generator is not None:
        report.epsilon = epsilon
        report.aap_adversarial = aap([100.0 * r.adversarial_map for r in results])
        report.mdr = mdr(report.aap_clean, report.aap_adversarial)
    return report
