"""Vocabularies and the structured concept model.

A concept is the ground truth for one generated scene: an ordered list of
objects plus task-specific attributes (one color per object, or a chain of
binary spatial relations between consecutive objects). Everything downstream
— caption text, validation questions, hard negatives — is derived from it,
so concepts carry a stable content-addressed identifier.

All types here are immutable values; every operation is a pure function and
safe to call concurrently.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Any, Iterable, Mapping

from .errors import (
    DuplicateEntry,
    DuplicateExhaustion,
    EmptyVocabulary,
    InsufficientVocabulary,
    MalformedRelationInverse,
)

ARTICLES = ("a", "an", "the")

SINGULAR = "singular"
INHERENTLY_PLURAL = "inherently-plural"

_MAX_NAME_TOKENS = 4


class TaskKind(str, Enum):
    """The two supported binding tasks.

    Color binding carries one attribute per object (arity N); position
    binding chains the objects with N-1 binary spatial relations.
    """

    COLOR = "color"
    POSITION = "position"


@dataclass(frozen=True)
class ObjectEntry:
    """One noun in the object vocabulary.

    ``expected_count`` is the number of instances the noun denotes in a
    single image: 1 for singular nouns, >=2 for inherently plural ones
    (a caption saying "gloves" implies two detectable instances).
    """

    name: str
    plural: str
    number: str = SINGULAR
    expected_count: int = 1

    def __post_init__(self) -> None:
        _check_name(self.name, "object name")
        _check_name(self.plural, "object plural")
        if self.number not in (SINGULAR, INHERENTLY_PLURAL):
            raise ValueError(f"unknown number {self.number!r} for {self.name!r}")
        if self.number == SINGULAR and self.expected_count != 1:
            raise ValueError(f"singular entry {self.name!r} must have expected_count=1")
        if self.number == INHERENTLY_PLURAL and self.expected_count < 2:
            raise ValueError(
                f"inherently-plural entry {self.name!r} must have expected_count>=2"
            )

    @property
    def is_plural(self) -> bool:
        return self.number == INHERENTLY_PLURAL

    def surface_forms(self) -> tuple[tuple[str, ...], ...]:
        """Token sequences accepted for this entry in caption text.

        Plural surface forms are accepted only for inherently-plural entries.
        """
        forms = [tuple(self.name.split())]
        if self.is_plural:
            plural = tuple(self.plural.split())
            if plural not in forms:
                forms.append(plural)
        return tuple(forms)


@dataclass(frozen=True)
class ColorEntry:
    name: str

    def __post_init__(self) -> None:
        _check_name(self.name, "color name")
        if len(self.name.split()) != 1:
            raise ValueError(f"color {self.name!r} must be a single token")


@dataclass(frozen=True)
class RelationEntry:
    """A binary spatial relation phrase and the name of its opposite."""

    name: str
    inverse: str

    def __post_init__(self) -> None:
        _check_name(self.name, "relation name")


def _check_name(name: str, what: str) -> None:
    if not name or not name.strip():
        raise ValueError(f"empty {what}")
    tokens = name.split()
    if name != " ".join(tokens) or name != name.lower():
        raise ValueError(f"{what} {name!r} must be a lowercase single-spaced token sequence")
    if not 1 <= len(tokens) <= _MAX_NAME_TOKENS:
        raise ValueError(f"{what} {name!r} must be 1..{_MAX_NAME_TOKENS} tokens")


@dataclass(frozen=True)
class Vocabulary:
    """The three input vocabularies plus a content hash.

    ``version`` is a pure function of the entry contents, so any edit to the
    document yields a new version and therefore new sampling streams.
    """

    objects: tuple[ObjectEntry, ...]
    colors: tuple[ColorEntry, ...]
    relations: tuple[RelationEntry, ...]
    version: str

    _object_index: dict[str, ObjectEntry] = field(
        default_factory=dict, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "_object_index", {entry.name: entry for entry in self.objects}
        )

    def object_entry(self, name: str) -> ObjectEntry:
        return self._object_index[name]

    @property
    def object_names(self) -> tuple[str, ...]:
        return tuple(entry.name for entry in self.objects)

    @property
    def color_names(self) -> tuple[str, ...]:
        return tuple(entry.name for entry in self.colors)

    @property
    def relation_names(self) -> tuple[str, ...]:
        return tuple(entry.name for entry in self.relations)


@dataclass(frozen=True)
class Concept:
    """Ground truth for one scene: ordered objects plus attributes.

    Objects, colors, and relations are each pairwise distinct within a
    concept. ``id`` is a canonical hash of (task, objects, attributes) and is
    stable across runs and processes.
    """

    task: TaskKind
    objects: tuple[str, ...]
    colors: tuple[str, ...] = ()
    relations: tuple[str, ...] = ()
    id: str = ""

    def __post_init__(self) -> None:
        if not self.objects:
            raise ValueError("concept needs at least one object")
        if len(set(self.objects)) != len(self.objects):
            raise ValueError("concept objects must be pairwise distinct")
        if self.task is TaskKind.COLOR:
            if len(self.colors) != len(self.objects):
                raise ValueError("color binding needs one color per object")
            if self.relations:
                raise ValueError("color binding carries no relations")
            if len(set(self.colors)) != len(self.colors):
                raise ValueError("concept colors must be pairwise distinct")
        else:
            if len(self.relations) != len(self.objects) - 1:
                raise ValueError("position binding needs N-1 relations")
            if self.colors:
                raise ValueError("position binding carries no colors")
            if len(set(self.relations)) != len(self.relations):
                raise ValueError("concept relations must be pairwise distinct")
        object.__setattr__(self, "id", concept_id(self))

    @property
    def n(self) -> int:
        return len(self.objects)

    @property
    def attributes(self) -> tuple[str, ...]:
        return self.colors if self.task is TaskKind.COLOR else self.relations

    def to_json_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "task": self.task.value,
            "n": self.n,
            "objects": list(self.objects),
        }
        if self.task is TaskKind.COLOR:
            doc["colors"] = list(self.colors)
        else:
            doc["relations"] = list(self.relations)
        return doc

    @classmethod
    def from_json_dict(cls, doc: Mapping[str, Any]) -> "Concept":
        return cls(
            task=TaskKind(doc["task"]),
            objects=tuple(doc["objects"]),
            colors=tuple(doc.get("colors", ())),
            relations=tuple(doc.get("relations", ())),
        )


def concept_id(concept: Concept) -> str:
    """Canonical 64-bit-prefix hash of a concept's normalized fields.

    Field order is preserved (reordering colors changes the id) and the task
    kind is part of the preimage.
    """
    payload = json.dumps(
        {
            "task": concept.task.value,
            "objects": [o.lower() for o in concept.objects],
            "attributes": [a.lower() for a in concept.attributes],
        },
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def load_vocabulary(doc: Mapping[str, Any]) -> Vocabulary:
    """Build a Vocabulary from a parsed vocabulary document.

    The document carries ``objects[] {name, plural, number, expected_count}``
    (plural/number optional for singular nouns), ``colors[]`` as strings or
    ``{name}``, and ``relations[] {name, inverse}``. Any ``version`` field in
    the document is ignored and recomputed from content.
    """
    raw_objects = doc.get("objects", [])
    raw_colors = doc.get("colors", [])
    raw_relations = doc.get("relations", [])
    if not raw_objects or not raw_colors or not raw_relations:
        raise EmptyVocabulary("objects, colors, and relations must all be nonempty")

    objects = []
    for item in raw_objects:
        name = item["name"]
        objects.append(
            ObjectEntry(
                name=name,
                plural=item.get("plural", name + "s"),
                number=item.get("number", SINGULAR),
                expected_count=item.get(
                    "expected_count", 2 if item.get("number") == INHERENTLY_PLURAL else 1
                ),
            )
        )
    colors = [
        ColorEntry(name=item if isinstance(item, str) else item["name"])
        for item in raw_colors
    ]
    relations = [
        RelationEntry(name=item["name"], inverse=item.get("inverse", ""))
        for item in raw_relations
    ]

    for label, names in (
        ("object", [o.name for o in objects]),
        ("color", [c.name for c in colors]),
        ("relation", [r.name for r in relations]),
    ):
        seen: set[str] = set()
        for name in names:
            if name in seen:
                raise DuplicateEntry(f"duplicate {label} entry {name!r}")
            seen.add(name)
        for article in ARTICLES:
            if article in seen:
                raise DuplicateEntry(f"{label} entry {article!r} collides with an article")

    relation_index = {r.name: r for r in relations}
    for rel in relations:
        if not rel.inverse or rel.inverse not in relation_index:
            raise MalformedRelationInverse(
                f"relation {rel.name!r} declares missing inverse {rel.inverse!r}"
            )
        if relation_index[rel.inverse].inverse != rel.name:
            raise MalformedRelationInverse(
                f"inverse of {rel.name!r} is not symmetric"
            )

    version = _content_version(objects, colors, relations)
    return Vocabulary(
        objects=tuple(objects),
        colors=tuple(colors),
        relations=tuple(relations),
        version=version,
    )


def _content_version(
    objects: Iterable[ObjectEntry],
    colors: Iterable[ColorEntry],
    relations: Iterable[RelationEntry],
) -> str:
    payload = json.dumps(
        {
            "objects": [
                [o.name, o.plural, o.number, o.expected_count] for o in objects
            ],
            "colors": [c.name for c in colors],
            "relations": [[r.name, r.inverse] for r in relations],
        },
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def load_vocabulary_file(path: str) -> Vocabulary:
    with open(path, "r", encoding="utf-8") as handle:
        return load_vocabulary(json.load(handle))


def default_vocabulary() -> Vocabulary:
    """The bundled 250-object / 20-color / 4-relation vocabulary."""
    text = resources.files("autocomp.assets").joinpath("vocabulary.json").read_text("utf-8")
    return load_vocabulary(json.loads(text))


def concept_space_size(vocab: Vocabulary, task: TaskKind, n: int) -> int:
    """Number of distinct concepts for (vocab, task, n).

    Objects and attributes are ordered and drawn without replacement, so the
    space is a product of falling factorials.
    """
    objects = math.perm(len(vocab.objects), n)
    if task is TaskKind.COLOR:
        return objects * math.perm(len(vocab.colors), n)
    return objects * math.perm(len(vocab.relations), n - 1)


def sample_concepts(
    vocab: Vocabulary,
    task: TaskKind,
    n: int,
    count: int,
    seed: int,
) -> list[Concept]:
    """Draw ``count`` pairwise-distinct concepts, reproducibly from ``seed``.

    Within each concept, objects and attributes are drawn uniformly without
    replacement; duplicate concepts are rejected and redrawn, so the result
    is a uniform sample without replacement from the concept space.
    """
    if n < 1:
        raise InsufficientVocabulary("n must be >= 1")
    if count < 0:
        raise ValueError("count must be >= 0")
    if n > len(vocab.objects):
        raise InsufficientVocabulary(
            f"cannot pick {n} distinct objects from {len(vocab.objects)}"
        )
    if task is TaskKind.COLOR and n > len(vocab.colors):
        raise InsufficientVocabulary(
            f"cannot pick {n} distinct colors from {len(vocab.colors)}"
        )
    if task is TaskKind.POSITION:
        if n < 2:
            raise InsufficientVocabulary("position binding needs n >= 2")
        if n - 1 > len(vocab.relations):
            raise InsufficientVocabulary(
                f"cannot pick {n - 1} distinct relations from {len(vocab.relations)}"
            )

    space = concept_space_size(vocab, task, n)
    if count > space:
        raise DuplicateExhaustion(
            f"requested {count} concepts but only {space} distinct concepts exist"
        )

    rng = random.Random(seed)
    object_names = vocab.object_names
    color_names = vocab.color_names
    relation_names = vocab.relation_names

    out: list[Concept] = []
    seen: set[str] = set()
    draws = 0
    max_draws = 50 * max(count, 1) + 10_000
    while len(out) < count:
        draws += 1
        if draws > max_draws:
            raise DuplicateExhaustion(
                f"could not draw {count} distinct concepts after {draws - 1} attempts"
            )
        objects = tuple(rng.sample(object_names, n))
        if task is TaskKind.COLOR:
            concept = Concept(
                task=task, objects=objects, colors=tuple(rng.sample(color_names, n))
            )
        else:
            concept = Concept(
                task=task,
                objects=objects,
                relations=tuple(rng.sample(relation_names, n - 1)),
            )
        if concept.id in seen:
            continue
        seen.add(concept.id)
        out.append(concept)
    return out
