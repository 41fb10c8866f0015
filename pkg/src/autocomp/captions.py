"""Caption rendering, the semantic preservation check, and span substitution.

The minimal track renders captions from a fixed template; the contextual
track prompts a text-generation backend and verifies its output with a
strict syntactic matcher. The matcher records token spans for every binding
(article / optional modifier / attribute / object, plus relation and second
object for position tasks), and those spans later drive hard-negative
substitution so a negative differs from its positive only in the swapped
conceptual elements.

Matching is case-insensitive on whitespace tokens with per-token punctuation
stripping. For color tasks each (object, color) pair must appear as
``<article> [word] color object`` with the color immediately before the
object; for position tasks each chained triple must appear as
``<article> [word] object relation <article> [word] object``, optionally
allowing up to ``relation_gap`` filler tokens between the first object and
the relation (default 0, i.e. the strict pattern). Articles are optional for
inherently-plural nouns, whose plural surface forms are also accepted.

When a required pair occurs more than once in the required bindings (which
happens for confusion arrangements with repeated elements), each binding
must claim a distinct occurrence in the text.
"""

from __future__ import annotations

import re
import string
from dataclasses import dataclass, replace
from enum import Enum
from importlib import resources
from typing import Any, Iterable, Iterator, Mapping, Protocol, Sequence

from .concepts import ARTICLES, Concept, ObjectEntry, TaskKind, Vocabulary
from .errors import SpanMismatch

WHITE_BACKGROUND_SUFFIX = "on a white background"

VOWELS = "aeiou"

Span = tuple[int, int]

_TOKEN_RE = re.compile(r"\S+")
_STRIP_CHARS = string.punctuation + "“”‘’…–—"


def article_for(word: str) -> str:
    """"an" before a vowel-initial word, else "a"."""
    return "an" if word[:1].lower() in VOWELS else "a"


@dataclass(frozen=True)
class Token:
    """One whitespace token with char offsets for its punctuation-free core."""

    raw: str
    start: int
    end: int
    norm: str
    core_start: int
    core_end: int


def tokenize(text: str) -> list[Token]:
    tokens = []
    for match in _TOKEN_RE.finditer(text):
        raw = match.group()
        stripped = raw.strip(_STRIP_CHARS)
        lead = raw.index(stripped) if stripped else 0
        tokens.append(
            Token(
                raw=raw,
                start=match.start(),
                end=match.end(),
                norm=stripped.lower(),
                core_start=match.start() + lead,
                core_end=match.start() + lead + len(stripped),
            )
        )
    return tokens


def norm_tokens(text: str) -> list[str]:
    """Normalized token stream, as used for matching and n-gram metrics."""
    return [t.norm for t in tokenize(text) if t.norm]


class Track(str, Enum):
    MINIMAL = "minimal"
    CONTEXTUAL = "contextual"


class FailureReason(str, Enum):
    EMPTY_TEXT = "empty_text"
    MISSING_BINDING = "missing_binding"


@dataclass(frozen=True)
class BindingMatch:
    """Accepted token spans for one required binding.

    Spans are half-open ``[start, end)`` indexes into the caption's token
    stream. ``attribute_span`` is set for color bindings; the relation and
    second-object spans are set for position bindings.
    """

    binding_index: int
    object_span: Span
    article_span: Span | None = None
    modifier_span: Span | None = None
    attribute_span: Span | None = None
    relation_span: Span | None = None
    article2_span: Span | None = None
    modifier2_span: Span | None = None
    object2_span: Span | None = None

    def _claim_key(self) -> tuple:
        return (
            self.article_span,
            self.attribute_span,
            self.object_span,
            self.relation_span,
            self.object2_span,
        )

    def to_json_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"binding_index": self.binding_index}
        for name in (
            "article_span",
            "modifier_span",
            "attribute_span",
            "object_span",
            "relation_span",
            "article2_span",
            "modifier2_span",
            "object2_span",
        ):
            value = getattr(self, name)
            if value is not None:
                doc[name] = list(value)
        return doc

    @classmethod
    def from_json_dict(cls, doc: Mapping[str, Any]) -> "BindingMatch":
        kwargs: dict[str, Any] = {"binding_index": doc["binding_index"]}
        for name in (
            "article_span",
            "modifier_span",
            "attribute_span",
            "object_span",
            "relation_span",
            "article2_span",
            "modifier2_span",
            "object2_span",
        ):
            if name in doc:
                kwargs[name] = tuple(doc[name])
        return cls(**kwargs)


@dataclass(frozen=True)
class MatchResult:
    passed: bool
    bindings: tuple[BindingMatch, ...] = ()
    failure_reason: FailureReason | None = None
    failed_binding: int | None = None

    def to_json_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "passed": self.passed,
            "bindings": [b.to_json_dict() for b in self.bindings],
        }
        if self.failure_reason is not None:
            doc["failure_reason"] = self.failure_reason.value
        if self.failed_binding is not None:
            doc["failed_binding"] = self.failed_binding
        return doc

    @classmethod
    def from_json_dict(cls, doc: Mapping[str, Any]) -> "MatchResult":
        return cls(
            passed=doc["passed"],
            bindings=tuple(BindingMatch.from_json_dict(b) for b in doc["bindings"]),
            failure_reason=(
                FailureReason(doc["failure_reason"]) if "failure_reason" in doc else None
            ),
            failed_binding=doc.get("failed_binding"),
        )


@dataclass(frozen=True)
class CaptionRecord:
    """A caption that passed the semantic preservation check."""

    concept: Concept
    track: Track
    text: str
    tokens: tuple[str, ...]
    match: MatchResult
    attempts: int
    generator_id: str

    @property
    def concept_id(self) -> str:
        return self.concept.id


@dataclass(frozen=True)
class Discarded:
    """A concept dropped after exhausting contextual generation retries.

    Per the strict pairing protocol the caller must also drop the concept's
    minimal twin.
    """

    concept_id: str
    attempts: int
    last_failure: MatchResult


@dataclass(frozen=True)
class PromptPair:
    system_text: str
    user_text: str
    attempt: int


class TextBackend(Protocol):
    def call(self, request: Any) -> Any: ...


class _ConceptLike(Protocol):
    task: TaskKind
    objects: Sequence[str]
    colors: Sequence[str]
    relations: Sequence[str]


def _load_prompt(name: str) -> str:
    return resources.files("autocomp.assets.prompts").joinpath(name).read_text("utf-8")


_PROMPTS: dict[str, str] = {}


def _prompt(name: str) -> str:
    if name not in _PROMPTS:
        _PROMPTS[name] = _load_prompt(name)
    return _PROMPTS[name]


@dataclass(frozen=True)
class _NounGroup:
    article_span: Span | None
    modifier_span: Span | None
    object_span: Span


class CaptionEngine:
    """Renders, checks, and rewrites captions for one vocabulary.

    ``relation_gap`` may be raised to 2 to admit copula phrasings such as
    "a monitor is positioned to the left of a bicycle"; the default of 0
    keeps the strict pattern.
    """

    def __init__(self, vocab: Vocabulary, relation_gap: int = 0):
        if not 0 <= relation_gap <= 2:
            raise ValueError("relation_gap must be in 0..2")
        self.vocab = vocab
        self.relation_gap = relation_gap

    # ------------------------------------------------------------------
    # rendering

    def render_minimal(self, target: _ConceptLike) -> CaptionRecord:
        """Deterministic template caption ending in the white-background suffix."""
        if target.task is TaskKind.COLOR:
            items = [
                self._color_item_phrase(name, color)
                for name, color in zip(target.objects, target.colors)
            ]
            body = _join_list(items)
        else:
            parts = [self._object_phrase(target.objects[0])]
            for rel, name in zip(target.relations, target.objects[1:]):
                parts.append(rel)
                parts.append(self._object_phrase(name))
            body = " ".join(parts)
        text = f"{body} {WHITE_BACKGROUND_SUFFIX}"
        match = self.check_semantic_preservation(text, target)
        if not match.passed:
            raise RuntimeError(
                f"template caption failed its own check: {text!r}"
            )
        return CaptionRecord(
            concept=_base_concept(target),
            track=Track.MINIMAL,
            text=text,
            tokens=tuple(norm_tokens(text)),
            match=match,
            attempts=1,
            generator_id="template:minimal/1",
        )

    def _color_item_phrase(self, name: str, color: str) -> str:
        entry = self.vocab.object_entry(name)
        if entry.is_plural:
            return f"{color} {entry.plural}"
        return f"{article_for(color)} {color} {name}"

    def _object_phrase(self, name: str) -> str:
        entry = self.vocab.object_entry(name)
        if entry.is_plural:
            return entry.plural
        return f"{article_for(name)} {name}"

    # ------------------------------------------------------------------
    # contextual prompting

    def build_contextual_prompt(self, concept: _ConceptLike, attempt: int = 1) -> PromptPair:
        if attempt < 1:
            raise ValueError("attempt must be >= 1")
        n = len(concept.objects)
        if concept.task is TaskKind.COLOR:
            system = _prompt("color_system.txt")
            template = _prompt(
                "color_user.txt" if attempt == 1 else "color_user_insistent.txt"
            )
            pairs = " and ".join(
                f"'{self._color_item_phrase(name, color)}'"
                for name, color in zip(concept.objects, concept.colors)
            )
            user = template.format(
                num_obj=n,
                obj_plural="object" if n == 1 else "objects",
                obj_colors_text=pairs,
            )
        else:
            system = _prompt("position_system.txt")
            template = _prompt(
                "position_user.txt" if attempt == 1 else "position_user_insistent.txt"
            )
            pairs = " and ".join(
                f"'{self._object_phrase(a)} {rel} {self._object_phrase(b)}'"
                for a, rel, b in zip(concept.objects, concept.relations, concept.objects[1:])
            )
            user = template.format(
                num_obj=n,
                obj_plural="object" if n == 1 else "objects",
                obj_relations_text=pairs,
            )
        return PromptPair(system_text=system, user_text=user, attempt=attempt)

    def generate_contextual(
        self,
        concept: Concept,
        llm: TextBackend,
        retries: int = 3,
        generation: Mapping[str, Any] | None = None,
    ) -> CaptionRecord | Discarded:
        """Prompt, check, and retry until a caption passes or retries run out.

        Transport failures raise :class:`BackendUnavailable`; pattern failures
        after the final retry return :class:`Discarded`.
        """
        from .backend import build_text_request

        if retries < 1:
            raise ValueError("retries must be >= 1")
        last = MatchResult(False, (), FailureReason.EMPTY_TEXT, None)
        for attempt in range(1, retries + 1):
            prompt = self.build_contextual_prompt(concept, attempt)
            request = build_text_request(
                prompt.system_text, prompt.user_text, generation
            )
            response = llm.call(request)
            text = str(response.result["text"]).strip()
            if not text:
                last = MatchResult(False, (), FailureReason.EMPTY_TEXT, None)
                continue
            match = self.check_semantic_preservation(text, concept)
            if match.passed:
                return CaptionRecord(
                    concept=concept,
                    track=Track.CONTEXTUAL,
                    text=text,
                    tokens=tuple(norm_tokens(text)),
                    match=match,
                    attempts=attempt,
                    generator_id=response.model_id,
                )
            last = match
        return Discarded(concept_id=concept.id, attempts=retries, last_failure=last)

    # ------------------------------------------------------------------
    # semantic preservation check

    def check_semantic_preservation(self, text: str, target: _ConceptLike) -> MatchResult:
        """Verify every required binding appears under the strict pattern.

        Failure is reported in the result, never raised. On success the
        result carries one :class:`BindingMatch` per required binding, each
        claiming a distinct occurrence in the text.
        """
        if not text.strip():
            return MatchResult(False, (), FailureReason.EMPTY_TEXT, None)
        norms = [t.norm for t in tokenize(text)]
        exclusions = self._modifier_exclusions(target)
        claimed: set[tuple] = set()
        bindings: list[BindingMatch] = []
        for idx, occurrences in enumerate(self._binding_occurrences(norms, target, exclusions)):
            chosen = None
            for occurrence in occurrences:
                if occurrence._claim_key() in claimed:
                    continue
                chosen = occurrence
                break
            if chosen is None:
                return MatchResult(
                    False, tuple(bindings), FailureReason.MISSING_BINDING, idx
                )
            claimed.add(chosen._claim_key())
            bindings.append(replace(chosen, binding_index=idx))
        return MatchResult(True, tuple(bindings), None, None)

    def _binding_occurrences(
        self,
        norms: list[str],
        target: _ConceptLike,
        exclusions: frozenset[str],
    ) -> Iterator[Iterator[BindingMatch]]:
        if target.task is TaskKind.COLOR:
            for name, color in zip(target.objects, target.colors):
                entry = self.vocab.object_entry(name)
                yield self._color_occurrences(norms, entry, color, exclusions)
        else:
            for a, rel, b in zip(target.objects, target.relations, target.objects[1:]):
                yield self._position_occurrences(
                    norms,
                    self.vocab.object_entry(a),
                    rel,
                    self.vocab.object_entry(b),
                    exclusions,
                )

    def _modifier_exclusions(self, target: _ConceptLike) -> frozenset[str]:
        banned: set[str] = set(ARTICLES)
        for name in target.objects:
            entry = self.vocab.object_entry(name)
            for form in entry.surface_forms():
                banned.update(form)
        banned.update(c.lower() for c in target.colors)
        for rel in target.relations:
            banned.update(rel.lower().split())
        return frozenset(banned)

    def _is_modifier(self, norm: str, exclusions: frozenset[str]) -> bool:
        return bool(norm) and norm not in exclusions

    def _color_occurrences(
        self,
        norms: list[str],
        entry: ObjectEntry,
        color: str,
        exclusions: frozenset[str],
    ) -> Iterator[BindingMatch]:
        color_tok = color.lower()
        forms = entry.surface_forms()
        for ci, norm in enumerate(norms):
            if norm != color_tok:
                continue
            object_span = _match_form_at(norms, ci + 1, forms)
            if object_span is None:
                continue
            j = ci - 1
            if j >= 0 and norms[j] in ARTICLES:
                yield BindingMatch(
                    binding_index=-1,
                    article_span=(j, j + 1),
                    attribute_span=(ci, ci + 1),
                    object_span=object_span,
                )
            elif (
                j >= 1
                and norms[j - 1] in ARTICLES
                and self._is_modifier(norms[j], exclusions)
            ):
                yield BindingMatch(
                    binding_index=-1,
                    article_span=(j - 1, j),
                    modifier_span=(j, j + 1),
                    attribute_span=(ci, ci + 1),
                    object_span=object_span,
                )
            elif entry.is_plural:
                yield BindingMatch(
                    binding_index=-1,
                    attribute_span=(ci, ci + 1),
                    object_span=object_span,
                )

    def _position_occurrences(
        self,
        norms: list[str],
        first: ObjectEntry,
        relation: str,
        second: ObjectEntry,
        exclusions: frozenset[str],
    ) -> Iterator[BindingMatch]:
        rel_toks = tuple(relation.lower().split())
        width = len(rel_toks)
        for ri in range(len(norms) - width + 1):
            if tuple(norms[ri : ri + width]) != rel_toks:
                continue
            hit = None
            for gap in range(self.relation_gap + 1):
                left = self._noun_group_ending_at(norms, ri - gap, first, exclusions)
                if left is None:
                    continue
                right = self._noun_group_starting_at(
                    norms, ri + width, second, exclusions
                )
                if right is None:
                    break
                hit = BindingMatch(
                    binding_index=-1,
                    article_span=left.article_span,
                    modifier_span=left.modifier_span,
                    object_span=left.object_span,
                    relation_span=(ri, ri + width),
                    article2_span=right.article_span,
                    modifier2_span=right.modifier_span,
                    object2_span=right.object_span,
                )
                break
            if hit is not None:
                yield hit

    def _noun_group_ending_at(
        self,
        norms: list[str],
        end: int,
        entry: ObjectEntry,
        exclusions: frozenset[str],
    ) -> _NounGroup | None:
        for form in entry.surface_forms():
            start = end - len(form)
            if start < 0 or tuple(norms[start:end]) != form:
                continue
            j = start - 1
            if j >= 0 and norms[j] in ARTICLES:
                return _NounGroup((j, j + 1), None, (start, end))
            if (
                j >= 1
                and norms[j - 1] in ARTICLES
                and self._is_modifier(norms[j], exclusions)
            ):
                return _NounGroup((j - 1, j), (j, j + 1), (start, end))
            if entry.is_plural:
                return _NounGroup(None, None, (start, end))
        return None

    def _noun_group_starting_at(
        self,
        norms: list[str],
        start: int,
        entry: ObjectEntry,
        exclusions: frozenset[str],
    ) -> _NounGroup | None:
        forms = entry.surface_forms()
        if start < len(norms) and norms[start] in ARTICLES:
            object_span = _match_form_at(norms, start + 1, forms)
            if object_span is not None:
                return _NounGroup((start, start + 1), None, object_span)
            if start + 1 < len(norms) and self._is_modifier(norms[start + 1], exclusions):
                object_span = _match_form_at(norms, start + 2, forms)
                if object_span is not None:
                    return _NounGroup(
                        (start, start + 1), (start + 1, start + 2), object_span
                    )
        if entry.is_plural:
            object_span = _match_form_at(norms, start, forms)
            if object_span is not None:
                return _NounGroup(None, None, object_span)
        return None

    # ------------------------------------------------------------------
    # span substitution

    def substitute_spans(self, record: CaptionRecord, arrangement) -> str:
        """Rewrite a passing caption to express an arrangement.

        Only the recorded attribute/object/relation spans change, plus any
        article fix-ups (a/an vowel agreement, dropping articles before
        inherently-plural nouns and inserting them before singular ones).
        Every byte outside the edited extents is preserved.
        """
        concept = record.concept
        if not record.match.passed:
            raise SpanMismatch("record did not pass the semantic check")
        n = concept.n
        if concept.task is TaskKind.COLOR:
            expected = (n, n)
            required_bindings = n
        else:
            expected = (n, n - 1)
            required_bindings = n - 1
        if (
            len(arrangement.object_tuple) != expected[0]
            or len(arrangement.attribute_tuple) != expected[1]
        ):
            raise SpanMismatch(
                f"arrangement arity {len(arrangement.object_tuple)}/"
                f"{len(arrangement.attribute_tuple)} does not fit concept {concept.id}"
            )
        if len(record.match.bindings) != required_bindings:
            raise SpanMismatch("record spans inconsistent with concept arity")

        tokens = tokenize(record.text)
        edits: dict[Span, str] = {}
        for binding in record.match.bindings:
            i = binding.binding_index
            if concept.task is TaskKind.COLOR:
                new_color = concept.colors[arrangement.attribute_tuple[i]]
                entry = self.vocab.object_entry(
                    concept.objects[arrangement.object_tuple[i]]
                )
                self._edit_group(
                    tokens,
                    edits,
                    _NounGroup(binding.article_span, binding.modifier_span, binding.object_span),
                    entry,
                    attribute_span=binding.attribute_span,
                    new_attribute=new_color,
                )
            else:
                new_relation = concept.relations[arrangement.attribute_tuple[i]]
                _put_edit(
                    edits,
                    _span_extent(tokens, binding.relation_span),
                    new_relation,
                )
                first = self.vocab.object_entry(
                    concept.objects[arrangement.object_tuple[i]]
                )
                second = self.vocab.object_entry(
                    concept.objects[arrangement.object_tuple[i + 1]]
                )
                self._edit_group(
                    tokens,
                    edits,
                    _NounGroup(binding.article_span, binding.modifier_span, binding.object_span),
                    first,
                )
                self._edit_group(
                    tokens,
                    edits,
                    _NounGroup(binding.article2_span, binding.modifier2_span, binding.object2_span),
                    second,
                )
        return _apply_edits(record.text, edits)

    def _edit_group(
        self,
        tokens: list[Token],
        edits: dict[Span, str],
        group: _NounGroup,
        entry: ObjectEntry,
        attribute_span: Span | None = None,
        new_attribute: str | None = None,
    ) -> None:
        surface = entry.plural if entry.is_plural else entry.name
        head_span = attribute_span if attribute_span is not None else group.object_span
        head_token = tokens[head_span[0]]
        inserting = group.article_span is None and not entry.is_plural
        head_word = new_attribute if new_attribute is not None else surface.split()[0]

        # An inserted article absorbs any sentence-initial capitalization, so
        # the replaced head word stays lowercase in that case.
        if attribute_span is not None and new_attribute is not None:
            replacement = (
                new_attribute if inserting else _match_case(new_attribute, head_token)
            )
            _put_edit(
                edits, (head_token.core_start, head_token.core_end), replacement
            )
            _put_edit(edits, _span_extent(tokens, group.object_span), surface)
        else:
            replacement = surface if inserting else _match_case(surface, head_token)
            _put_edit(edits, _span_extent(tokens, group.object_span), replacement)

        if group.article_span is not None:
            art_token = tokens[group.article_span[0]]
            if entry.is_plural and art_token.norm in ("a", "an"):
                follow = group.modifier_span or attribute_span or group.object_span
                _put_edit(edits, (art_token.start, tokens[follow[0]].start), "")
            elif art_token.norm in ("a", "an") and group.modifier_span is None:
                new_article = article_for(head_word)
                if new_article != art_token.norm:
                    _put_edit(
                        edits,
                        (art_token.core_start, art_token.core_end),
                        _match_case(new_article, art_token),
                    )
        elif inserting:
            article = _match_case(article_for(head_word), head_token)
            _put_edit(
                edits, (head_token.core_start, head_token.core_start), article + " "
            )


def _base_concept(target: _ConceptLike) -> Concept:
    if isinstance(target, Concept):
        return target
    base = getattr(target, "base", None)
    if isinstance(base, Concept):
        return base
    raise TypeError(f"cannot resolve base concept from {type(target).__name__}")


def _match_form_at(
    norms: list[str], start: int, forms: Iterable[tuple[str, ...]]
) -> Span | None:
    for form in forms:
        if tuple(norms[start : start + len(form)]) == form:
            return (start, start + len(form))
    return None


def _span_extent(tokens: list[Token], span: Span | None) -> Span:
    if span is None:
        raise SpanMismatch("missing span on a recorded binding")
    first = tokens[span[0]]
    last = tokens[span[1] - 1]
    return (first.core_start, last.core_end)


def _match_case(replacement: str, original: Token) -> str:
    core = original.raw[
        original.core_start - original.start : original.core_end - original.start
    ]
    if core[:1].isupper():
        return replacement[:1].upper() + replacement[1:]
    return replacement


def _put_edit(edits: dict[Span, str], extent: Span, replacement: str) -> None:
    existing = edits.get(extent)
    if existing is not None and existing != replacement:
        raise SpanMismatch(
            f"conflicting edits at {extent}: {existing!r} vs {replacement!r}"
        )
    edits[extent] = replacement


def _apply_edits(text: str, edits: dict[Span, str]) -> str:
    ordered = sorted(edits.items(), key=lambda item: item[0])
    previous_end = 0
    for (start, end), _ in ordered:
        if start < previous_end:
            raise SpanMismatch("overlapping span edits")
        previous_end = end
    out = text
    for (start, end), replacement in reversed(ordered):
        out = out[:start] + replacement + out[end:]
    return out


def _join_list(items: Sequence[str]) -> str:
    if len(items) == 1:
        return items[0]
    return ", ".join(items[:-1]) + " and " + items[-1]
