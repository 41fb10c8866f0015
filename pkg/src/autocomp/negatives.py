"""Swap and Confusion hard-negative arrangements with exact combinatorics.

An arrangement assigns the concept's own elements (never out-of-concept
ones) to its slots by index. The swap scheme permutes attributes over fixed
objects for color tasks and objects over fixed relations for position tasks,
yielding N!-1 negatives. The confusion scheme takes every with-replacement
combination: N^N object tuples crossed with N^N color tuples for color
(N^{2N}-1 after removing the positive) and with (N-1)^{N-1} relation tuples
for position (N^N * (N-1)^{N-1} - 1).

Arrangements whose object-to-attribute binding multiset equals the
positive's ("binding-equivalent" reorderings such as "a blue sphere and a
red cube" against "a red cube and a blue sphere") are counted as negatives
by default, matching the published closed forms; pass
``include_binding_equivalents=False`` to drop them.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Any, Mapping, Sequence

from .captions import CaptionEngine, CaptionRecord, Track
from .concepts import Concept, TaskKind
from .errors import ArityTooSmall, NotApplicable


class Scheme(str, Enum):
    POSITIVE = "positive"
    SWAP = "swap"
    CONFUSION = "confusion"


class ErrorCategory(str, Enum):
    """Partition of color-confusion negatives by their repetition structure."""

    SWAPPED_COLORS = "swapped_colors"
    SAME_COLOR_DIFF_OBJ = "same_color_diff_obj"
    SAME_COLOR_SAME_OBJ = "same_color_same_obj"
    SAME_OBJ_DIFF_COLORS = "same_obj_diff_colors"


@dataclass(frozen=True)
class Arrangement:
    """One assignment of a concept's elements to its slots, by index.

    ``object_tuple`` has length N; ``attribute_tuple`` has length N for
    color tasks (color indices) and N-1 for position tasks (relation
    indices). Confusion arrangements may repeat indices; swap arrangements
    are permutations.
    """

    object_tuple: tuple[int, ...]
    attribute_tuple: tuple[int, ...]
    scheme: Scheme

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "objects": list(self.object_tuple),
            "attributes": list(self.attribute_tuple),
            "scheme": self.scheme.value,
        }

    @classmethod
    def from_json_dict(cls, doc: Mapping[str, Any]) -> "Arrangement":
        return cls(
            object_tuple=tuple(doc["objects"]),
            attribute_tuple=tuple(doc["attributes"]),
            scheme=Scheme(doc["scheme"]),
        )


@dataclass(frozen=True)
class ArrangedConcept:
    """A concept viewed through an arrangement; duck-compatible with Concept.

    Unlike a bare concept, the element lists may contain repeats, so this
    type is only used for rendering and checking, never as ground truth.
    """

    base: Concept
    arrangement: Arrangement

    @property
    def task(self) -> TaskKind:
        return self.base.task

    @property
    def n(self) -> int:
        return self.base.n

    @property
    def objects(self) -> tuple[str, ...]:
        return tuple(self.base.objects[i] for i in self.arrangement.object_tuple)

    @property
    def colors(self) -> tuple[str, ...]:
        if self.base.task is not TaskKind.COLOR:
            return ()
        return tuple(self.base.colors[i] for i in self.arrangement.attribute_tuple)

    @property
    def relations(self) -> tuple[str, ...]:
        if self.base.task is not TaskKind.POSITION:
            return ()
        return tuple(self.base.relations[i] for i in self.arrangement.attribute_tuple)


@dataclass(frozen=True)
class NegativeSet:
    concept_id: str
    track: Track
    scheme: Scheme
    variants: tuple[tuple[Arrangement, str], ...]
    includes_binding_equivalents: bool = True

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "concept_id": self.concept_id,
            "track": self.track.value,
            "scheme": self.scheme.value,
            "includes_binding_equivalents": self.includes_binding_equivalents,
            "variants": [
                {**arrangement.to_json_dict(), "text": text}
                for arrangement, text in self.variants
            ],
        }

    @classmethod
    def from_json_dict(cls, doc: Mapping[str, Any]) -> "NegativeSet":
        return cls(
            concept_id=doc["concept_id"],
            track=Track(doc["track"]),
            scheme=Scheme(doc["scheme"]),
            includes_binding_equivalents=doc["includes_binding_equivalents"],
            variants=tuple(
                (Arrangement.from_json_dict(v), v["text"]) for v in doc["variants"]
            ),
        )


def positive_arrangement(concept: Concept) -> Arrangement:
    n = concept.n
    arity = n if concept.task is TaskKind.COLOR else n - 1
    return Arrangement(tuple(range(n)), tuple(range(arity)), Scheme.POSITIVE)


def is_positive(arrangement: Arrangement) -> bool:
    return arrangement.object_tuple == tuple(
        range(len(arrangement.object_tuple))
    ) and arrangement.attribute_tuple == tuple(range(len(arrangement.attribute_tuple)))


def swap_arrangements(concept: Concept) -> list[Arrangement]:
    """All N!-1 non-identity permutations for the task's swappable slot.

    Color tasks permute the colors over fixed objects; position tasks
    permute the objects over fixed relations (permuting the relations would
    be nonsensical at N=2).
    """
    n = concept.n
    if n < 2:
        raise ArityTooSmall("swap negatives need n >= 2")
    identity = tuple(range(n))
    out = []
    if concept.task is TaskKind.COLOR:
        for perm in itertools.permutations(range(n)):
            if perm != identity:
                out.append(Arrangement(identity, perm, Scheme.SWAP))
    else:
        arity = tuple(range(n - 1))
        for perm in itertools.permutations(range(n)):
            if perm != identity:
                out.append(Arrangement(perm, arity, Scheme.SWAP))
    return out


def confusion_arrangements(
    concept: Concept, include_binding_equivalents: bool = True
) -> list[Arrangement]:
    """Every with-replacement assignment of the concept's own elements.

    The positive is always excluded; binding-equivalent reorderings are
    excluded only when ``include_binding_equivalents`` is false.
    """
    n = concept.n
    if n < 2:
        raise ArityTooSmall("confusion negatives need n >= 2")
    if concept.task is TaskKind.COLOR:
        attribute_choices = itertools.product(range(n), repeat=n)
    else:
        attribute_choices = itertools.product(range(n - 1), repeat=n - 1)
    attribute_tuples = [tuple(t) for t in attribute_choices]
    positive_signature = None
    if not include_binding_equivalents:
        positive_signature = binding_signature(concept, positive_arrangement(concept))

    out = []
    for objects in itertools.product(range(n), repeat=n):
        for attributes in attribute_tuples:
            arrangement = Arrangement(tuple(objects), attributes, Scheme.CONFUSION)
            if is_positive(arrangement):
                continue
            if (
                positive_signature is not None
                and binding_signature(concept, arrangement) == positive_signature
            ):
                continue
            out.append(arrangement)
    return out


def binding_signature(concept: Concept, arrangement: Arrangement) -> Counter:
    """Multiset of element-level bindings expressed by an arrangement.

    Color tasks bind (object, color) pairs; position tasks bind
    (object, relation, object) triples along the chain. Two arrangements
    with equal signatures are semantically interchangeable.
    """
    objects = [concept.objects[i] for i in arrangement.object_tuple]
    if concept.task is TaskKind.COLOR:
        colors = [concept.colors[i] for i in arrangement.attribute_tuple]
        return Counter(zip(objects, colors))
    relations = [concept.relations[i] for i in arrangement.attribute_tuple]
    return Counter(
        (objects[i], relations[i], objects[i + 1]) for i in range(len(relations))
    )


def swap_count(n: int) -> int:
    return math.factorial(n) - 1


def confusion_count(task: TaskKind, n: int) -> int:
    if task is TaskKind.COLOR:
        return n ** (2 * n) - 1
    return n**n * (n - 1) ** (n - 1) - 1


def chance_baseline(task: TaskKind, n: int, scheme: Scheme) -> Fraction:
    """Probability of picking the positive uniformly among all candidates."""
    if n < 2:
        raise ArityTooSmall("chance baselines are defined for n >= 2")
    if scheme is Scheme.SWAP:
        return Fraction(1, math.factorial(n))
    if scheme is Scheme.CONFUSION:
        if task is TaskKind.COLOR:
            return Fraction(1, n ** (2 * n))
        return Fraction(1, n**n * (n - 1) ** (n - 1))
    raise ValueError(f"no chance baseline for scheme {scheme}")


def classify_error(arrangement: Arrangement, concept: Concept) -> ErrorCategory:
    """Bucket a color-confusion negative by its repetition structure.

    Repeats in both tuples -> same color and same object; repeats in colors
    only -> same color on different objects; repeats in objects only -> same
    object with different colors; no repeats anywhere -> a pure swap.
    """
    if concept.task is not TaskKind.COLOR:
        raise NotApplicable("error taxonomy is defined for color-binding tasks")
    if is_positive(arrangement):
        raise NotApplicable("the positive arrangement is not an error")
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


def render_negative(
    record: CaptionRecord,
    arrangement: Arrangement,
    engine: CaptionEngine,
) -> str:
    """Caption text expressing ``arrangement`` in the style of ``record``.

    Minimal captions are re-rendered through the template; contextual
    captions are rewritten in place by span substitution so length and
    structure stay identical to the positive.
    """
    if record.track is Track.MINIMAL:
        return engine.render_minimal(ArrangedConcept(record.concept, arrangement)).text
    return engine.substitute_spans(record, arrangement)


def build_negative_set(
    record: CaptionRecord,
    scheme: Scheme,
    engine: CaptionEngine,
    include_binding_equivalents: bool = True,
) -> NegativeSet:
    """Generate, render, and dedupe the full negative set for one record."""
    concept = record.concept
    if scheme is Scheme.SWAP:
        arrangements: Sequence[Arrangement] = swap_arrangements(concept)
    elif scheme is Scheme.CONFUSION:
        arrangements = confusion_arrangements(concept, include_binding_equivalents)
    else:
        raise ValueError("negative sets are built for swap or confusion schemes")

    variants: list[tuple[Arrangement, str]] = []
    seen_text = {record.text}
    for arrangement in arrangements:
        text = render_negative(record, arrangement, engine)
        if text in seen_text:
            continue
        seen_text.add(text)
        variants.append((arrangement, text))
    return NegativeSet(
        concept_id=concept.id,
        track=record.track,
        scheme=scheme,
        variants=tuple(variants),
        includes_binding_equivalents=include_binding_equivalents,
    )
