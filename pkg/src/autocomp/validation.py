"""Three-stage image validation: objects, background whiteness, attributes.

Stages always run in the fixed order object check -> background check
(minimal track only) -> attribute check, short-circuiting on the first
failure. Failures are recorded outcomes, never exceptions; only transport
trouble with a backend aborts a sample, which is then marked errored and
excluded from survival-rate denominators.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Sequence

import numpy as np

from . import backend as bk
from .captions import Track
from .concepts import Concept, TaskKind, Vocabulary
from .errors import BackendUnavailable

LUMA_THRESHOLD = 190
WHITE_FRACTION_THRESHOLD = 0.70


@dataclass(frozen=True)
class Thresholds:
    luma: int = LUMA_THRESHOLD
    white_fraction: float = WHITE_FRACTION_THRESHOLD
    box: float = 0.4
    text: float = 0.3


@dataclass(frozen=True)
class Detection:
    """One detector hit with a normalized xyxy box and optional pixel mask."""

    label: str
    score: float
    bbox: tuple[float, float, float, float]
    mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        x0, y0, x1, y1 = self.bbox
        if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
            raise ValueError(f"bbox {self.bbox} is not a normalized xyxy box")
        if not 0 <= self.score <= 1:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @classmethod
    def from_json_dict(cls, doc: Mapping[str, Any]) -> "Detection":
        return cls(
            label=doc["label"], score=float(doc["score"]), bbox=tuple(doc["bbox"])
        )


@dataclass(frozen=True)
class VqaQuery:
    question: str
    allowed_answers: tuple[str, ...]
    expected: str

    def __post_init__(self) -> None:
        if self.expected not in self.allowed_answers:
            raise ValueError(f"expected answer {self.expected!r} not in allowed set")


class Stage(str, Enum):
    OBJECT = "object_check"
    BACKGROUND = "background_check"
    ATTRIBUTE = "attribute_check"


@dataclass(frozen=True)
class StageOutcome:
    stage: Stage
    passed: bool
    detail: dict[str, Any] = field(default_factory=dict)

    def to_json_dict(self) -> dict[str, Any]:
        return {"stage": self.stage.value, "passed": self.passed, "detail": self.detail}

    @classmethod
    def from_json_dict(cls, doc: Mapping[str, Any]) -> "StageOutcome":
        return cls(Stage(doc["stage"]), doc["passed"], dict(doc["detail"]))


VALIDATED = "validated"
REJECTED = "rejected"
ERRORED = "errored"


@dataclass(frozen=True)
class ValidationReport:
    image_id: str
    concept_id: str
    track: Track
    outcomes: tuple[StageOutcome, ...]
    status: str
    rejected_stage: Stage | None = None
    error: str | None = None

    def to_json_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "image_id": self.image_id,
            "concept_id": self.concept_id,
            "track": self.track.value,
            "outcomes": [o.to_json_dict() for o in self.outcomes],
            "status": self.status,
        }
        if self.rejected_stage is not None:
            doc["rejected_stage"] = self.rejected_stage.value
        if self.error is not None:
            doc["error"] = self.error
        return doc

    @classmethod
    def from_json_dict(cls, doc: Mapping[str, Any]) -> "ValidationReport":
        return cls(
            image_id=doc["image_id"],
            concept_id=doc["concept_id"],
            track=Track(doc["track"]),
            outcomes=tuple(StageOutcome.from_json_dict(o) for o in doc["outcomes"]),
            status=doc["status"],
            rejected_stage=(
                Stage(doc["rejected_stage"]) if "rejected_stage" in doc else None
            ),
            error=doc.get("error"),
        )


def check_objects(
    detections: Sequence[Detection],
    concept: Concept,
    vocab: Vocabulary,
    track: Track,
) -> StageOutcome:
    """Class-and-cardinality check against the concept's object set.

    Each concept object must be detected exactly ``expected_count`` times
    (plural surface labels count toward their entry). Labels outside the
    concept fail the minimal track, which promises an otherwise empty scene,
    and are ignored for the contextual track.
    """
    accepted_labels: dict[str, str] = {}
    for name in concept.objects:
        entry = vocab.object_entry(name)
        accepted_labels[entry.name] = name
        accepted_labels[entry.plural] = name

    counts: Counter[str] = Counter()
    extra_labels: list[str] = []
    for detection in detections:
        label = detection.label.strip().lower()
        if label in accepted_labels:
            counts[accepted_labels[label]] += 1
        else:
            extra_labels.append(label)

    expected = {
        name: vocab.object_entry(name).expected_count for name in concept.objects
    }
    mismatches = {
        name: {"expected": expected[name], "got": counts.get(name, 0)}
        for name in concept.objects
        if counts.get(name, 0) != expected[name]
    }
    passed = not mismatches
    if track is Track.MINIMAL and extra_labels:
        passed = False
    return StageOutcome(
        Stage.OBJECT,
        passed,
        {
            "counts": dict(counts),
            "expected": expected,
            "mismatches": mismatches,
            "extra_labels": sorted(set(extra_labels)),
        },
    )


def luma(pixels: np.ndarray) -> np.ndarray:
    """Rec.601 grayscale, rounded to the nearest integer."""
    if pixels.ndim == 2:
        return pixels.astype(np.int64)
    weights = np.array([0.299, 0.587, 0.114])
    return np.rint(pixels[..., :3].astype(np.float64) @ weights).astype(np.int64)


def region_mask(
    shape: tuple[int, int], detections: Sequence[Detection]
) -> np.ndarray:
    """Boolean exclusion mask covering all object regions.

    Pixel masks are used where present, otherwise bounding boxes; box edges
    are expanded outward to whole pixels so objects are fully excluded.
    """
    height, width = shape
    mask = np.zeros(shape, dtype=bool)
    for detection in detections:
        if detection.mask is not None:
            mask |= detection.mask.astype(bool)
            continue
        x0, y0, x1, y1 = detection.bbox
        c0 = int(np.floor(x0 * width))
        c1 = int(np.ceil(x1 * width))
        r0 = int(np.floor(y0 * height))
        r1 = int(np.ceil(y1 * height))
        mask[r0:r1, c0:c1] = True
    return mask


def check_background(
    pixels: np.ndarray,
    detections: Sequence[Detection],
    thresholds: Thresholds = Thresholds(),
) -> StageOutcome:
    """Whiteness check on all pixels outside the object regions.

    Passes iff the fraction of background pixels with luma >= ``luma``
    reaches ``white_fraction`` (both comparisons inclusive). If the regions
    cover the whole image there is no background to judge, which fails with
    reason ``all_pixels_masked``.
    """
    if pixels.size == 0:
        raise ValueError("empty raster")
    gray = luma(pixels)
    excluded = region_mask(gray.shape, detections)
    background = ~excluded
    total = int(background.sum())
    if total == 0:
        return StageOutcome(
            Stage.BACKGROUND,
            False,
            {"fraction": None, "reason": "all_pixels_masked"},
        )
    white = int((gray[background] >= thresholds.luma).sum())
    fraction = white / total
    return StageOutcome(
        Stage.BACKGROUND,
        fraction >= thresholds.white_fraction,
        {"fraction": fraction, "white_pixels": white, "background_pixels": total},
    )


def build_attribute_questions(concept: Concept, vocab: Vocabulary) -> list[VqaQuery]:
    """Direct questions whose answers are constrained to the vocabulary."""
    queries = []
    if concept.task is TaskKind.COLOR:
        allowed = vocab.color_names
        for name, color in zip(concept.objects, concept.colors):
            entry = vocab.object_entry(name)
            if entry.is_plural:
                question = f"What color are the {entry.plural}?"
            else:
                question = f"What color is the {name}?"
            queries.append(VqaQuery(question, allowed, color))
    else:
        allowed = vocab.relation_names
        for first, relation, second in zip(
            concept.objects, concept.relations, concept.objects[1:]
        ):
            first_surface = _question_surface(vocab, first)
            second_surface = _question_surface(vocab, second)
            question = f"Where is the {first_surface} relative to the {second_surface}?"
            queries.append(VqaQuery(question, allowed, relation))
    return queries


def _question_surface(vocab: Vocabulary, name: str) -> str:
    entry = vocab.object_entry(name)
    return entry.plural if entry.is_plural else entry.name


def check_attributes(
    answers: Sequence[str], queries: Sequence[VqaQuery]
) -> StageOutcome:
    """Exact-match check of constrained VQA answers, case/space-insensitive."""
    if len(answers) != len(queries):
        raise ValueError(f"{len(answers)} answers for {len(queries)} queries")
    results = []
    passed = True
    for answer, query in zip(answers, queries):
        normalized = answer.strip().lower()
        if normalized not in query.allowed_answers:
            results.append(
                {
                    "question": query.question,
                    "answer": normalized,
                    "expected": query.expected,
                    "correct": False,
                    "reason": "answer_out_of_vocabulary",
                }
            )
            passed = False
            continue
        correct = normalized == query.expected
        results.append(
            {
                "question": query.question,
                "answer": normalized,
                "expected": query.expected,
                "correct": correct,
            }
        )
        passed = passed and correct
    return StageOutcome(Stage.ATTRIBUTE, passed, {"answers": results})


def load_raster(path: str) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as image:
        return np.asarray(image.convert("RGB"))


def validate_sample(
    image_id: str,
    image_path: str,
    concept: Concept,
    track: Track,
    backends,
    vocab: Vocabulary,
    thresholds: Thresholds = Thresholds(),
) -> ValidationReport:
    """Run the staged validation for one image.

    ``backends`` is any handle satisfying the backend call contract; it
    serves both the detect and VQA capabilities. Transport failures mark the
    sample errored rather than rejected.
    """
    outcomes: list[StageOutcome] = []

    def report(status: str, rejected: Stage | None = None, error: str | None = None):
        return ValidationReport(
            image_id=image_id,
            concept_id=concept.id,
            track=track,
            outcomes=tuple(outcomes),
            status=status,
            rejected_stage=rejected,
            error=error,
        )

    labels = [vocab.object_entry(name).name for name in concept.objects]
    detect_request = bk.build_detect_request(
        image_path, labels, {"box_threshold": thresholds.box, "text_threshold": thresholds.text}
    )
    try:
        detect_response = backends.call(detect_request)
    except BackendUnavailable as exc:
        return report(ERRORED, error=str(exc))
    detections = [
        Detection.from_json_dict(d) for d in detect_response.result["detections"]
    ]
    outcome = check_objects(detections, concept, vocab, track)
    outcomes.append(outcome)
    if not outcome.passed:
        return report(REJECTED, rejected=Stage.OBJECT)

    if track is Track.MINIMAL:
        pixels = load_raster(image_path)
        outcome = check_background(pixels, detections, thresholds)
        outcomes.append(outcome)
        if not outcome.passed:
            return report(REJECTED, rejected=Stage.BACKGROUND)

    queries = build_attribute_questions(concept, vocab)
    answers = []
    for query in queries:
        vqa_request = bk.build_vqa_request(
            image_path, query.question, list(query.allowed_answers)
        )
        try:
            vqa_response = backends.call(vqa_request)
        except BackendUnavailable as exc:
            return report(ERRORED, error=str(exc))
        answers.append(str(vqa_response.result["answer"]))
    outcome = check_attributes(answers, queries)
    outcomes.append(outcome)
    if not outcome.passed:
        return report(REJECTED, rejected=Stage.ATTRIBUTE)
    return report(VALIDATED)
