"""Trial scoring and every downstream analysis of benchmark results.

A trial presents one positive caption (kept at index 0 in storage; any
shuffling happens at prompt-construction time) against a candidate set, with
one real-valued score per candidate. The chosen candidate is the argmax;
exact ties are conservatively scored incorrect and flagged for audit.

Aggregation produces per-cell accuracies keyed by (task, n, track, scheme),
per-relation breakdowns for the two-object position swap cell, and the
error-category histogram over incorrect color-confusion trials. Paired
deltas and Monte Carlo chance baselines mirror the benchmark's reporting
conventions.
"""

from __future__ import annotations

import math
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .captions import Track, norm_tokens
from .concepts import TaskKind
from .errors import EmptyCell
from .negatives import (
    Arrangement,
    ErrorCategory,
    Scheme,
    confusion_count,
    swap_count,
)

CellKey = tuple[str, int, str, str]  # (task, n, track, scheme)


@dataclass(frozen=True)
class ScoreMatrix:
    """Per-candidate scores for one trial; index 0 is the positive."""

    trial_id: str
    scores: tuple[float, ...]
    arrangements: tuple[Arrangement | None, ...] = ()

    def __post_init__(self) -> None:
        if len(self.scores) < 2:
            raise ValueError("a trial needs at least two candidates")
        if any(not math.isfinite(s) for s in self.scores):
            raise ValueError("scores must be finite")
        if self.arrangements and len(self.arrangements) != len(self.scores):
            raise ValueError("arrangements must parallel scores")


@dataclass(frozen=True)
class TrialOutcome:
    correct: bool
    chosen_index: int
    tie: bool
    chosen_arrangement: Arrangement | None = None


def score_trial(matrix: ScoreMatrix) -> TrialOutcome:
    """Argmax selection with ties scored incorrect."""
    best = max(matrix.scores)
    winners = [i for i, s in enumerate(matrix.scores) if s == best]
    chosen = winners[0]
    tie = len(winners) > 1
    chosen_arrangement = None
    if matrix.arrangements:
        chosen_arrangement = matrix.arrangements[chosen]
    return TrialOutcome(
        correct=(chosen == 0 and not tie),
        chosen_index=chosen,
        tie=tie,
        chosen_arrangement=chosen_arrangement,
    )


@dataclass(frozen=True)
class Trial:
    """A score matrix tagged with its benchmark cell."""

    task: TaskKind
    n: int
    track: Track
    scheme: Scheme
    matrix: ScoreMatrix
    relation: str | None = None


@dataclass(frozen=True)
class CellScore:
    correct: int
    count: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.count

    @property
    def percent(self) -> float:
        return 100.0 * self.correct / self.count


@dataclass(frozen=True)
class BenchmarkScores:
    """Aggregated accuracies plus the analyses derived from raw choices."""

    cells: dict[CellKey, CellScore]
    per_relation: dict[str, CellScore] = field(default_factory=dict)
    error_taxonomy: dict[tuple[str, int, str], Counter] = field(default_factory=dict)

    def accuracy(self, task: TaskKind, n: int, track: Track, scheme: Scheme) -> float:
        key = (task.value, n, track.value, scheme.value)
        if key not in self.cells:
            raise EmptyCell(f"no trials for cell {key}")
        return self.cells[key].accuracy

    def percent_cells(self, track: Track) -> dict[tuple[str, int, str], float]:
        return {
            (task, n, scheme): cell.percent
            for (task, n, cell_track, scheme), cell in self.cells.items()
            if cell_track == track.value
        }

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "cells": [
                {
                    "task": task,
                    "n": n,
                    "track": track,
                    "scheme": scheme,
                    "correct": cell.correct,
                    "count": cell.count,
                    "accuracy": cell.accuracy,
                }
                for (task, n, track, scheme), cell in sorted(self.cells.items())
            ],
            "per_relation": [
                {
                    "relation": relation,
                    "correct": cell.correct,
                    "count": cell.count,
                    "accuracy": cell.accuracy,
                }
                for relation, cell in sorted(self.per_relation.items())
            ],
            "error_taxonomy": [
                {
                    "task": task,
                    "n": n,
                    "track": track,
                    "histogram": {
                        category.value: count for category, count in sorted(histogram.items())
                    },
                    "incorrect": sum(histogram.values()),
                }
                for (task, n, track), histogram in sorted(self.error_taxonomy.items())
            ],
        }


def aggregate(trials: Iterable[Trial]) -> BenchmarkScores:
    """Score and fold trials into per-cell accuracies and analyses.

    Per-relation accuracy is reported for the two-object position swap cell;
    the error histogram buckets the chosen arrangement of every incorrect
    color-confusion trial.
    """
    counts: dict[CellKey, list[int]] = {}
    relation_counts: dict[str, list[int]] = {}
    taxonomy: dict[tuple[str, int, str], Counter] = {}

    for trial in trials:
        outcome = score_trial(trial.matrix)
        key = (trial.task.value, trial.n, trial.track.value, trial.scheme.value)
        cell = counts.setdefault(key, [0, 0])
        cell[0] += int(outcome.correct)
        cell[1] += 1

        if (
            trial.task is TaskKind.POSITION
            and trial.scheme is Scheme.SWAP
            and trial.n == 2
            and trial.relation
        ):
            rel_cell = relation_counts.setdefault(trial.relation, [0, 0])
            rel_cell[0] += int(outcome.correct)
            rel_cell[1] += 1

        if (
            trial.task is TaskKind.COLOR
            and trial.scheme is Scheme.CONFUSION
            and not outcome.correct
            and outcome.chosen_arrangement is not None
        ):
            histogram = taxonomy.setdefault(
                (trial.task.value, trial.n, trial.track.value), Counter()
            )
            histogram[_classify_tuples(outcome.chosen_arrangement)] += 1

    return BenchmarkScores(
        cells={key: CellScore(c, t) for key, (c, t) in counts.items()},
        per_relation={rel: CellScore(c, t) for rel, (c, t) in relation_counts.items()},
        error_taxonomy=taxonomy,
    )


def _classify_tuples(arrangement: Arrangement) -> ErrorCategory:
    repeats_objects = len(set(arrangement.object_tuple)) < len(arrangement.object_tuple)
    repeats_colors = len(set(arrangement.attribute_tuple)) < len(
        arrangement.attribute_tuple
    )
    if repeats_objects and repeats_colors:
        return ErrorCategory.SAME_COLOR_SAME_OBJ
    if repeats_colors:
        return ErrorCategory.SAME_COLOR_DIFF_OBJ
    if repeats_objects:
        return ErrorCategory.SAME_OBJ_DIFF_COLORS
    return ErrorCategory.SWAPPED_COLORS


@dataclass(frozen=True)
class PairedDelta:
    """Context-minus-minimal change in percentage points, per cell."""

    task: str
    n: int
    swap_minimal: float | None
    swap_contextual: float | None
    confusion_minimal: float | None
    confusion_contextual: float | None

    @property
    def delta_swap(self) -> float | None:
        return _exact_delta(self.swap_minimal, self.swap_contextual)

    @property
    def delta_confusion(self) -> float | None:
        return _exact_delta(self.confusion_minimal, self.confusion_contextual)

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "task": self.task,
            "n": self.n,
            "swap_minimal": self.swap_minimal,
            "swap_contextual": self.swap_contextual,
            "delta_swap": self.delta_swap,
            "confusion_minimal": self.confusion_minimal,
            "confusion_contextual": self.confusion_contextual,
            "delta_confusion": self.delta_confusion,
        }


def _exact_delta(minimal: float | None, contextual: float | None) -> float | None:
    # Decimal-faithful subtraction so table values like 74.6 - 61.1 come out
    # as the printed 13.5, not 13.500000000000007.
    if minimal is None or contextual is None:
        return None
    return float(Fraction(str(contextual)) - Fraction(str(minimal)))


def paired_deltas(
    minimal: Mapping[tuple[str, int, str], float],
    contextual: Mapping[tuple[str, int, str], float],
) -> dict[tuple[str, int], PairedDelta]:
    """Pair per-cell percent accuracies into (task, n) delta rows.

    Inputs map (task, n, scheme) to accuracy in percent, as produced by
    :meth:`BenchmarkScores.percent_cells`; both must come from the same
    paired concept set for the deltas to be meaningful.
    """
    keys = {(task, n) for task, n, _ in (*minimal.keys(), *contextual.keys())}
    out = {}
    for task, n in sorted(keys):
        out[(task, n)] = PairedDelta(
            task=task,
            n=n,
            swap_minimal=minimal.get((task, n, Scheme.SWAP.value)),
            swap_contextual=contextual.get((task, n, Scheme.SWAP.value)),
            confusion_minimal=minimal.get((task, n, Scheme.CONFUSION.value)),
            confusion_contextual=contextual.get((task, n, Scheme.CONFUSION.value)),
        )
    return out


def simulate_random_chance(
    task: TaskKind, n: int, scheme: Scheme, trials: int, seed: int
) -> float:
    """Monte Carlo estimate of the random-chance accuracy for a cell.

    Draws i.i.d. uniform scores over the full candidate set (closed-form
    negative count plus the positive) and applies the argmax rule; converges
    to the analytic chance baseline.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    negatives = (
        swap_count(n) if scheme is Scheme.SWAP else confusion_count(task, n)
    )
    candidates = negatives + 1
    rng = np.random.default_rng(seed)
    rows_per_chunk = max(1, 4_000_000 // candidates)
    remaining = trials
    correct = 0
    while remaining > 0:
        rows = min(rows_per_chunk, remaining)
        scores = rng.random((rows, candidates))
        correct += int((scores.argmax(axis=1) == 0).sum())
        remaining -= rows
    return correct / trials


# ----------------------------------------------------------------------
# blind LLM protocol


@dataclass(frozen=True)
class BlindPrompt:
    text: str
    answer_key: int  # 1-based label of the positive
    choices: tuple[str, ...]


_BLIND_INSTRUCTIONS = (
    "Exactly one of the numbered captions below is the correct description. "
    "Reply with the single number of the correct caption and nothing else."
)


def subsample_choices(
    positive: str, negatives: Sequence[str], seed: int, subsample: int
) -> tuple[list[str], int]:
    """Seeded uniform subsample of negatives with the positive spliced in.

    Returns the ordered choice list and the positive's 1-based label.
    """
    if subsample > len(negatives):
        raise ValueError(
            f"cannot subsample {subsample} from {len(negatives)} negatives"
        )
    rng = random.Random(seed)
    picks = rng.sample(list(negatives), subsample)
    slot = rng.randrange(subsample + 1)
    choices = picks[:slot] + [positive] + picks[slot:]
    return choices, slot + 1


def build_blind_prompt(
    positive: str, negatives: Sequence[str], seed: int, subsample: int
) -> BlindPrompt:
    choices, answer_key = subsample_choices(positive, negatives, seed, subsample)
    lines = [_BLIND_INSTRUCTIONS, ""]
    lines.extend(f"{label}. {text}" for label, text in enumerate(choices, 1))
    lines.append("")
    lines.append("Answer:")
    return BlindPrompt(
        text="\n".join(lines), answer_key=answer_key, choices=tuple(choices)
    )


_INT_RE = re.compile(r"(?<![0-9A-Za-z])([0-9]+)(?![0-9A-Za-z])")


def parse_choice(model_output: str, k: int) -> int | None:
    """First standalone integer in [1, k], or None when unparseable."""
    if k < 2:
        raise ValueError("k must be >= 2")
    for match in _INT_RE.finditer(model_output):
        value = int(match.group(1))
        if 1 <= value <= k:
            return value
    return None


def simulate_blind_random(
    negative_count: int, subsample: int, prompts: int, seed: int
) -> float:
    """Accuracy of a uniform-random responder over seeded blind prompts.

    Uses the same subsample-and-splice construction as
    :func:`subsample_choices` (on indices, skipping text assembly).
    """
    pool = list(range(negative_count))
    correct = 0
    for i in range(prompts):
        _, answer_key = subsample_choices(-1, pool, seed + i, subsample)
        responder = random.Random(seed * 1_000_003 + i)
        if responder.randint(1, subsample + 1) == answer_key:
            correct += 1
    return correct / prompts


# ----------------------------------------------------------------------
# diversity metrics


def distinct_n(captions: Sequence[str], n: int) -> float:
    """Unique-to-total n-gram ratio over the caption corpus.

    Tokenization matches the caption matcher (lowercase, punctuation
    stripped), so the metric is stable against case and trailing periods.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    unique: set[tuple[str, ...]] = set()
    total = 0
    for caption in captions:
        tokens = norm_tokens(caption)
        for i in range(len(tokens) - n + 1):
            unique.add(tuple(tokens[i : i + n]))
            total += 1
    if total == 0:
        raise ValueError(f"no caption has at least {n} tokens")
    return len(unique) / total


def semantic_diversity(similarity: Sequence[Sequence[float]]) -> float:
    """One minus the mean pairwise similarity (strict upper triangle)."""
    matrix = np.asarray(similarity, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError("similarity must be a square matrix")
    if matrix.shape[0] < 2:
        raise ValueError("need at least two captions")
    if not np.allclose(matrix, matrix.T):
        raise ValueError("similarity must be symmetric")
    if not np.allclose(np.diag(matrix), 1.0):
        raise ValueError("similarity must have a unit diagonal")
    rows, cols = np.triu_indices(matrix.shape[0], k=1)
    values = matrix[rows, cols]
    first = float(values[0])
    if np.all(values == first):
        mean = first
    else:
        mean = math.fsum(float(v) for v in values) / len(values)
    # Decimal-faithful complement: 1 - 0.32 must be the printed 0.68.
    return float(Fraction(1) - Fraction(str(mean)))


def cosine_scores(anchor: Sequence[float], candidates: Sequence[Sequence[float]]) -> list[float]:
    """Cosine similarity of one anchor embedding against candidate embeddings."""
    a = np.asarray(anchor, dtype=float)
    matrix = np.asarray(candidates, dtype=float)
    norms = np.linalg.norm(matrix, axis=1) * np.linalg.norm(a)
    norms[norms == 0] = 1.0
    return list((matrix @ a) / norms)
