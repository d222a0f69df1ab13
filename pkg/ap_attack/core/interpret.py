"""
Pseudo-token interpretation.

Every pseudo-token lives in token-embedding space, so it can be compared with
the embedding-table rows of candidate words. For each attribute a small
vocabulary of candidate words is ranked by cosine similarity to the
attribute's pseudo-token; the top words per image and attribute are exported
as word-cloud data (similarity drives the font size downstream).
"""
from __future__ import annotations

import csv
import json
import logging

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from dataclasses_json import dataclass_json
from tabulate import tabulate

from ap_attack.core.default.paths import ATTRIBUTE_VOCABULARY_FILE
from ap_attack.core.errors import InputError, TokenizationError
from ap_attack.core.prompt import Vocabulary, l2_normalize, tokenize_words

logger = logging.getLogger(__name__)

WORDCLOUD_COLUMNS = ["image_id", "attribute", "rank", "word", "cosine"]


class AttributeVocabulary:
    """Attribute name -> candidate words, in file order."""

    def __init__(self, words: Mapping[str, Sequence[str]]):
        self.words: Dict[str, Tuple[str, ...]] = {}
        for attribute, candidates in words.items():
            if not candidates:
                raise InputError(f"Attribute '{attribute}' has no candidate words")
            self.words[attribute] = tuple(candidates)

    @classmethod
    def from_file(cls, path: Union[str, Path] = ATTRIBUTE_VOCABULARY_FILE) -> "AttributeVocabulary":
        with open(path, "r", encoding="utf-8") as f:
            return cls(json.load(f))

    def __getitem__(self, attribute: str) -> Tuple[str, ...]:
        if attribute not in self.words:
            raise InputError(f"Attribute '{attribute}' is not in the attribute vocabulary")
        return self.words[attribute]

    def __contains__(self, attribute: str) -> bool:
        return attribute in self.words

    def check_covers(self, attribute_names: Iterable[str]) -> None:
        missing = [name for name in attribute_names if name not in self.words]
        if missing:
            raise InputError(f"Attribute vocabulary lacks entries for {missing}")


def word_token_embedding(
    word: str, vocab: Vocabulary, embedding_table: torch.Tensor
) -> torch.Tensor:
    """
    Embedding of a word: the mean of its sub-token rows.

    Raises
    ------
    TokenizationError
        Naming the word if it does not tokenize under the vocabulary.
    """
    try:
        ids = tokenize_words(word, vocab)
    except TokenizationError as e:
        raise TokenizationError(f"Word '{word}' does not tokenize: {e}")
    if not ids:
        raise TokenizationError(f"Word '{word}' has no tokens")
    rows = torch.tensor([vocab.row_index(i) for i in ids], dtype=torch.long)
    return embedding_table.detach().index_select(0, rows).mean(dim=0)


@dataclass_json
@dataclass(frozen=True)
class RankedWord:
    word: str
    cosine: float


def rank_words(
    pseudo_token: torch.Tensor,
    attribute: str,
    attribute_vocab: AttributeVocabulary,
    vocab: Vocabulary,
    embedding_table: torch.Tensor,
) -> List[RankedWord]:
    """
    Candidate words of an attribute by descending cosine to the pseudo-token.

    Ties keep the vocabulary file order.
    """
    words = attribute_vocab[attribute]
    embeddings = torch.stack(
        [word_token_embedding(word, vocab, embedding_table) for word in words]
    ).double()
    cosines = (
        l2_normalize(embeddings) @ l2_normalize(pseudo_token.detach().double().reshape(1, -1)).T
    ).flatten().numpy()
    order = np.argsort(-cosines, kind="stable")
    return [RankedWord(words[i], float(cosines[i])) for i in order]


@dataclass_json
@dataclass(frozen=True)
class WordcloudRow:
    image_id: str
    attribute: str
    rank: int
    word: str
    cosine: float


def interpret_pseudo_tokens(
    image_id: str,
    pseudo_tokens: torch.Tensor,
    attribute_names: Sequence[str],
    attribute_vocab: AttributeVocabulary,
    vocab: Vocabulary,
    embedding_table: torch.Tensor,
    top_k: int = 2,
) -> List[WordcloudRow]:
    """Top-k words of every attribute of one image's pseudo-token set (I, e)."""
    if pseudo_tokens.shape[0] != len(attribute_names):
        raise InputError(
            f"Got {pseudo_tokens.shape[0]} pseudo-tokens for {len(attribute_names)} attributes"
        )
    rows = []
    for attribute, token in zip(attribute_names, pseudo_tokens):
        ranking = rank_words(token, attribute, attribute_vocab, vocab, embedding_table)
        rows.extend(
            WordcloudRow(image_id, attribute, rank, ranked.word, ranked.cosine)
            for rank, ranked in enumerate(ranking[:top_k], start=1)
        )
    return rows


def export_wordcloud_data(
    rows: Sequence[WordcloudRow],
    csv_path: Union[str, Path],
    json_path: Optional[Union[str, Path]] = None,
) -> Path:
    """Write ranking rows as CSV (and optionally JSON); an empty set writes the header only."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(WORDCLOUD_COLUMNS)
        for row in rows:
            writer.writerow([row.image_id, row.attribute, row.rank, row.word, repr(row.cosine)])
    if json_path is not None:
        Path(json_path).write_text(
            json.dumps([row.to_dict() for row in rows], indent=2), encoding="utf-8"
        )
    return csv_path


def read_wordcloud_data(csv_path: Union[str, Path]) -> List[WordcloudRow]:
    with open(csv_path, "r", newline="", encoding="utf-8") as f:
        return [
            WordcloudRow(
                image_id=record["image_id"],
                attribute=record["attribute"],
                rank=int(record["rank"]),
                word=record["word"],
                cosine=float(record["cosine"]),
            )
            for record in csv.DictReader(f)
        ]


def interpretation_accuracy(
    rows: Sequence[WordcloudRow], truth: Mapping[str, Mapping[str, str]]
) -> Dict[str, float]:
    """
    Per-attribute top-1 accuracy against ground-truth words.

    Parameters
    ----------
    rows : Sequence[WordcloudRow]
        Rankings; only rank-1 rows are scored.
    truth : Mapping[str, Mapping[str, str]]
        image_id -> attribute -> expected word.

    Returns
    -------
    Dict[str, float]
        attribute -> accuracy, plus ``macro`` for the mean over attributes.
    """
    hits: Dict[str, List[bool]] = {}
    for row in rows:
        if row.rank != 1 or row.image_id not in truth:
            continue
        expected = truth[row.image_id].get(row.attribute)
        if expected is None:
            continue
        hits.setdefault(row.attribute, []).append(row.word == expected)
    accuracy = {attribute: float(np.mean(values)) for attribute, values in hits.items()}
    if accuracy:
        accuracy["macro"] = float(np.mean(list(accuracy.values())))
    return accuracy


def accuracy_table(accuracy: Mapping[str, float]) -> str:
    return tabulate(
        [[attribute, f"{100.0 * value:.1f}"] for attribute, value in accuracy.items()],
        headers=["attribute", "top-1 (%)"],
        tablefmt="github",
    )
