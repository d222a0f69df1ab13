"""
Exception hierarchy shared by every stage of the toolkit.

All errors raised on purpose derive from `ApAttackError`, so the CLI can turn
them into a single diagnostic line and a nonzero exit code. Errors about bad
values also derive from `ValueError` to stay catchable by generic callers.
"""


class ApAttackError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(ApAttackError, ValueError):
    """Invalid configuration: unknown keys, out-of-range values, shape mismatches."""


class InputError(ApAttackError, ValueError):
    """Invalid input values: non-finite pixels, wrong dimensions, bad ranges."""


class TemplateError(ApAttackError, ValueError):
    """A prompt template has missing, duplicated or misordered placeholders."""


class TokenizationError(ApAttackError, ValueError):
    """A word could not be mapped to the vocabulary."""


class BatchCompositionError(ApAttackError, ValueError):
    """A batch lacks the positives or negatives a loss requires."""


class NormalizationError(ApAttackError, ValueError):
    """A zero-norm vector reached a cosine similarity."""


class TrainingDivergedError(ApAttackError):
    """A training loss became non-finite."""


class FreezeViolationError(ApAttackError):
    """A component that must stay frozen changed during training."""


class CheckpointError(ApAttackError):
    """A checkpoint container is missing, truncated or of the wrong version."""


LoadError = CheckpointError


class DatasetError(ApAttackError):
    """A dataset folder or file name could not be parsed."""


class EvaluationError(ApAttackError):
    """Retrieval evaluation could not produce a score."""


class NoRelevantItemsError(EvaluationError):
    """A query has no relevant gallery item; callers skip the query."""
