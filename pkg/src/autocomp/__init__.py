"""Concept-driven generation, validation, and scoring of compositional
vision-language benchmarks."""

from .concepts import (
    Concept,
    TaskKind,
    Vocabulary,
    concept_id,
    default_vocabulary,
    load_vocabulary,
    sample_concepts,
)
from .captions import CaptionEngine, CaptionRecord, Discarded, MatchResult, Track
from .negatives import (
    Arrangement,
    ErrorCategory,
    NegativeSet,
    Scheme,
    chance_baseline,
    classify_error,
    confusion_arrangements,
    swap_arrangements,
)

__version__ = "0.1.0"

__all__ = [
    "Arrangement",
    "CaptionEngine",
    "CaptionRecord",
    "Concept",
    "Discarded",
    "ErrorCategory",
    "MatchResult",
    "NegativeSet",
    "Scheme",
    "TaskKind",
    "Track",
    "Vocabulary",
    "chance_baseline",
    "classify_error",
    "concept_id",
    "confusion_arrangements",
    "default_vocabulary",
    "load_vocabulary",
    "sample_concepts",
    "swap_arrangements",
    "__version__",
]
