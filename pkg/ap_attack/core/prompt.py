"""
Attribute prompt template, tokenizer and pseudo-token injection.

A template is plain text with ordered placeholder markers ``<S1>`` ... ``<SI>``,
one per pedestrian attribute. Tokenization is a lowercase word/punctuation
split against a closed vocabulary; placeholders get reserved ids. Pseudo-tokens
are written into the placeholder rows of the embedded sequence, so vectors
that are not vocabulary words still flow through the text encoder.

The module also holds the image<->text contrastive loss used as the reference
form of the inversion loss.
"""
from __future__ import annotations

import json
import logging

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import regex
import torch
import torch.nn.functional as F

from ap_attack.core.default.constants import DEFAULT_ATTRIBUTES, DEFAULT_TAU
from ap_attack.core.default.paths import VOCABULARY_FILE
from ap_attack.core.errors import (
    InputError,
    NormalizationError,
    TemplateError,
    TokenizationError,
)

logger = logging.getLogger(__name__)

PLACEHOLDER_PATTERN = regex.compile(r"<S(\d+)>")
TOKEN_PATTERN = regex.compile(r"<S\d+>|[\p{L}\p{N}]+|[^\s\p{L}\p{N}]")


@dataclass(frozen=True)
class PromptTemplate:
    text: str
    attribute_names: Tuple[str, ...]

    @property
    def num_slots(self) -> int:
        return len(self.attribute_names)


@dataclass(frozen=True)
class TokenizedPrompt:
    token_ids: Tuple[int, ...]
    placeholder_positions: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.token_ids)


class Vocabulary:
    """
    Closed word vocabulary with reserved marker and placeholder ids.

    Token ids index the embedding table directly unless the vocabulary file
    carries an explicit ``rows`` section mapping ids to table rows.
    """

    def __init__(
        self,
        tokens: Dict[str, int],
        begin_id: int,
        end_id: int,
        pad_id: int,
        placeholder_ids: Dict[str, int],
        rows: Optional[Dict[int, int]] = None,
    ):
        self.tokens = dict(tokens)
        self.begin_id = begin_id
        self.end_id = end_id
        self.pad_id = pad_id
        self.placeholder_ids = dict(placeholder_ids)
        self.rows = dict(rows or {})

        reserved = [begin_id, end_id, pad_id, *self.placeholder_ids.values()]
        all_ids = reserved + list(self.tokens.values())
        if len(set(all_ids)) != len(all_ids):
            raise TokenizationError("Vocabulary ids are not unique")
        self.id_to_token = {v: k for k, v in self.tokens.items()}
        self.id_to_token.update({v: k for k, v in self.placeholder_ids.items()})

    @classmethod
    def from_file(cls, path: Union[str, Path] = VOCABULARY_FILE) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        reserved = data["reserved"]
        return cls(
            tokens=data["tokens"],
            begin_id=reserved["begin"],
            end_id=reserved["end"],
            pad_id=reserved["pad"],
            placeholder_ids=reserved["placeholders"],
            rows={int(k): v for k, v in data.get("rows", {}).items()},
        )

    def __len__(self) -> int:
        return max(self.id_to_token.keys() | {self.begin_id, self.end_id, self.pad_id}) + 1

    def __contains__(self, word: str) -> bool:
        return word in self.tokens

    def word_id(self, word: str) -> int:
        if word not in self.tokens:
            raise TokenizationError(f"Word '{word}' is not in the vocabulary")
        return self.tokens[word]

    def placeholder_id(self, marker: str) -> int:
        if marker not in self.placeholder_ids:
            raise TokenizationError(f"Placeholder '{marker}' has no reserved id")
        return self.placeholder_ids[marker]

    def row_index(self, token_id: int) -> int:
        return self.rows.get(token_id, token_id)


def parse_template(
    text: str, attribute_names: Optional[Sequence[str]] = None
) -> PromptTemplate:
    """
    Discover the placeholder slots of a template.

    Raises
    ------
    TemplateError
        If there is no placeholder, a placeholder is duplicated, one of
        <S1>..<SI> is missing, the markers are out of order, or the number of
        attribute names does not match.
    """
    found = [int(m) for m in PLACEHOLDER_PATTERN.findall(text)]
    if not found:
        raise TemplateError("Template has no placeholder <S1>")
    for index in found:
        if found.count(index) > 1:
            raise TemplateError(f"Placeholder <S{index}> appears {found.count(index)} times")
    for index in range(1, max(found) + 1):
        if index not in found:
            raise TemplateError(f"Placeholder <S{index}> is missing")
    if found != sorted(found):
        raise TemplateError(
            "Placeholders are out of order: "
            + ", ".join(f"<S{index}>" for index in found)
        )

    num_slots = len(found)
    if attribute_names is None:
        if num_slots == len(DEFAULT_ATTRIBUTES):
            attribute_names = DEFAULT_ATTRIBUTES
        else:
            attribute_names = [f"attribute_{index}" for index in range(1, num_slots + 1)]
    if len(attribute_names) != num_slots:
        raise TemplateError(
            f"Template has {num_slots} slots but {len(attribute_names)} attribute names"
        )
    return PromptTemplate(text=text, attribute_names=tuple(attribute_names))


def split_words(text: str) -> List[str]:
    """Split text into lowercase words, punctuation and placeholder markers."""
    return [
        piece if PLACEHOLDER_PATTERN.fullmatch(piece) else piece.lower()
        for piece in TOKEN_PATTERN.findall(text)
    ]


def tokenize_words(text: str, vocab: Vocabulary) -> List[int]:
    """Word ids of free text, without begin/end markers."""
    return [vocab.word_id(word) for word in split_words(text)]


def tokenize(template: PromptTemplate, vocab: Vocabulary) -> TokenizedPrompt:
    """
    Tokenize a template, bracketing it with begin/end markers.

    Raises
    ------
    TokenizationError
        Naming the first out-of-vocabulary word.
    """
    token_ids = [vocab.begin_id]
    positions = []
    for piece in split_words(template.text):
        if PLACEHOLDER_PATTERN.fullmatch(piece):
            positions.append(len(token_ids))
            token_ids.append(vocab.placeholder_id(piece))
        else:
            token_ids.append(vocab.word_id(piece))
    token_ids.append(vocab.end_id)
    return TokenizedPrompt(token_ids=tuple(token_ids), placeholder_positions=tuple(positions))


def embed_tokens(
    tokens: TokenizedPrompt, embedding_table: torch.Tensor, vocab: Optional[Vocabulary] = None
) -> torch.Tensor:
    """Embedding-table rows of a token sequence, shape (L, E)."""
    ids = tokens.token_ids
    if vocab is not None:
        ids = tuple(vocab.row_index(token_id) for token_id in ids)
    index = torch.tensor(ids, dtype=torch.long, device=embedding_table.device)
    return embedding_table.index_select(0, index)


def inject_pseudo_tokens(
    tokens: TokenizedPrompt,
    pseudo: torch.Tensor,
    embedding_table: torch.Tensor,
    vocab: Optional[Vocabulary] = None,
) -> torch.Tensor:
    """
    Write pseudo-tokens into the placeholder rows of the embedded template.

    Parameters
    ----------
    tokens : TokenizedPrompt
        The tokenized template.
    pseudo : torch.Tensor
        One pseudo-token set (I, E) or a batch of them (N, I, E).
    embedding_table : torch.Tensor
        The text encoder's token-embedding table (V, E).

    Returns
    -------
    torch.Tensor
        (L, E) or (N, L, E); rows outside the placeholder positions are the
        plain embedded template.
    """
    batched = pseudo.dim() == 3
    pseudo_batch = pseudo if batched else pseudo.unsqueeze(0)
    num_slots = len(tokens.placeholder_positions)
    if pseudo_batch.dim() != 3 or pseudo_batch.shape[1] != num_slots:
        raise InputError(
            f"Expected {num_slots} pseudo-tokens per set, got shape {list(pseudo.shape)}"
        )
    if pseudo_batch.shape[2] != embedding_table.shape[1]:
        raise InputError(
            f"Pseudo-tokens have {pseudo_batch.shape[2]} entries, the embedding "
            f"table has {embedding_table.shape[1]}"
        )

    base = embed_tokens(tokens, embedding_table, vocab).to(pseudo_batch.dtype)
    sequences = base.unsqueeze(0).expand(pseudo_batch.shape[0], -1, -1)
    positions = torch.tensor(tokens.placeholder_positions, dtype=torch.long, device=base.device)
    sequences = sequences.index_copy(1, positions, pseudo_batch)
    return sequences if batched else sequences[0]


def l2_normalize(features: torch.Tensor) -> torch.Tensor:
    """
    Scale every row to unit L2 norm.

    Raises
    ------
    NormalizationError
        If any row has zero norm.
    """
    norms = torch.linalg.vector_norm(features, dim=-1, keepdim=True)
    if (norms == 0).any():
        raise NormalizationError("Cannot normalize a zero-norm feature vector")
    return features / norms


def similarity_logits(
    image_feats: torch.Tensor, text_feats: torch.Tensor, tau: float
) -> torch.Tensor:
    """Cosine similarities sim(v_n, t_i) / tau, shape (N, N)."""
    if tau <= 0:
        raise InputError(f"Temperature must be positive, got {tau}")
    if image_feats.shape[0] != text_feats.shape[0] or image_feats.shape[0] < 1:
        raise InputError(
            f"Batch sizes differ or are empty: {image_feats.shape[0]} images, "
            f"{text_feats.shape[0]} texts"
        )
    return l2_normalize(image_feats) @ l2_normalize(text_feats).T / tau


def clip_contrastive_loss(
    image_feats: torch.Tensor, text_feats: torch.Tensor, tau: float = DEFAULT_TAU
) -> torch.Tensor:
    """
    Symmetric image<->text contrastive loss over diagonal-matched pairs.

    Returns L_i2t + L_t2i, each the mean over the batch of the negative
    log-softmax of the matching pair.
    """
    logits = similarity_logits(image_feats, text_feats, tau)
    targets = torch.arange(logits.shape[0], device=logits.device)
    loss_i2t = F.cross_entropy(logits, targets)
    loss_t2i = F.cross_entropy(logits.T, targets)
    return loss_i2t + loss_t2i
