"""Manifest persistence, benchmark curation, and survival statistics.

A manifest is append-only JSONL with one lifecycle record per (concept,
track). Fields appear in pipeline order — caption, image, validation,
negatives summary — and are never removed, so reruns can resume from any
stage. Serialization uses a fixed field order, making idempotent rewrites
byte-identical.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

from .captions import CaptionRecord, MatchResult, Track, norm_tokens
from .concepts import Concept
from .errors import InvariantViolation, IoFailure
from .validation import VALIDATED, ValidationReport

SCHEMA_VERSION = "autocomp/1"

log = logging.getLogger(__name__)


def utc_now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


@dataclass(frozen=True)
class ManifestRecord:
    """Lifecycle state of one (concept, track) pair."""

    concept: Concept
    track: Track
    caption_text: str
    caption_match: MatchResult
    attempts: int
    generator_id: str
    image_path: str | None = None
    validation: ValidationReport | None = None
    negatives_summary: dict[str, int] | None = None
    timestamps: dict[str, str] = field(default_factory=dict)

    @property
    def concept_id(self) -> str:
        return self.concept.id

    @property
    def validated(self) -> bool:
        return self.validation is not None and self.validation.status == VALIDATED

    def caption_record(self) -> CaptionRecord:
        return CaptionRecord(
            concept=self.concept,
            track=self.track,
            text=self.caption_text,
            tokens=tuple(norm_tokens(self.caption_text)),
            match=self.caption_match,
            attempts=self.attempts,
            generator_id=self.generator_id,
        )

    def with_image(self, image_path: str) -> "ManifestRecord":
        return replace(
            self,
            image_path=image_path,
            timestamps={**self.timestamps, "synthesized": utc_now()},
        )

    def with_validation(self, report: ValidationReport) -> "ManifestRecord":
        return replace(
            self,
            validation=report,
            timestamps={**self.timestamps, "validated": utc_now()},
        )

    def with_negatives(self, summary: dict[str, int]) -> "ManifestRecord":
        return replace(
            self,
            negatives_summary=dict(summary),
            timestamps={**self.timestamps, "negatives": utc_now()},
        )

    def to_json_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "schema": SCHEMA_VERSION,
            "concept_id": self.concept.id,
            "track": self.track.value,
            "concept": self.concept.to_json_dict(),
            "caption": {
                "text": self.caption_text,
                "match": self.caption_match.to_json_dict(),
                "attempts": self.attempts,
                "generator_id": self.generator_id,
            },
        }
        if self.image_path is not None:
            doc["image"] = {"path": self.image_path}
        if self.validation is not None:
            doc["validation"] = self.validation.to_json_dict()
        if self.negatives_summary is not None:
            doc["negatives"] = dict(sorted(self.negatives_summary.items()))
        doc["timestamps"] = dict(sorted(self.timestamps.items()))
        return doc

    @classmethod
    def from_json_dict(cls, doc: Mapping[str, Any]) -> "ManifestRecord":
        concept = Concept.from_json_dict(doc["concept"])
        if doc.get("concept_id") != concept.id:
            raise InvariantViolation(
                f"inline concept re-hashes to {concept.id}, "
                f"record claims {doc.get('concept_id')}"
            )
        caption = doc.get("caption")
        if not caption or not caption.get("text"):
            raise InvariantViolation("manifest record lacks a caption")
        return cls(
            concept=concept,
            track=Track(doc["track"]),
            caption_text=caption["text"],
            caption_match=MatchResult.from_json_dict(caption["match"]),
            attempts=caption.get("attempts", 1),
            generator_id=caption.get("generator_id", ""),
            image_path=doc.get("image", {}).get("path"),
            validation=(
                ValidationReport.from_json_dict(doc["validation"])
                if "validation" in doc
                else None
            ),
            negatives_summary=doc.get("negatives"),
            timestamps=dict(doc.get("timestamps", {})),
        )


def record_from_caption(caption: CaptionRecord) -> ManifestRecord:
    if not caption.match.passed:
        raise InvariantViolation("only captions passing the semantic check are stored")
    return ManifestRecord(
        concept=caption.concept,
        track=caption.track,
        caption_text=caption.text,
        caption_match=caption.match,
        attempts=caption.attempts,
        generator_id=caption.generator_id,
        timestamps={"captioned": utc_now()},
    )


def write_manifest(records: Iterable[ManifestRecord], path: str) -> None:
    """Serialize records as JSONL with stable field order, atomically."""
    lines = []
    for record in records:
        lines.append(json.dumps(record.to_json_dict(), ensure_ascii=False))
    tmp = path + ".tmp"
    try:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(tmp, "w", encoding="utf-8") as handle:
            for line in lines:
                handle.write(line + "\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write manifest {path}: {exc}") from exc


def read_manifest(path: str) -> list[ManifestRecord]:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return [
                ManifestRecord.from_json_dict(json.loads(line))
                for line in handle
                if line.strip()
            ]
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {path}: {exc}") from exc
    except ValueError as exc:
        raise IoFailure(f"malformed manifest line in {path}: {exc}") from exc


@dataclass(frozen=True)
class BenchmarkSets:
    """Validated concept ids per track; paired is their exact intersection."""

    minimal_ids: frozenset[str]
    contextual_ids: frozenset[str]

    @property
    def paired_ids(self) -> frozenset[str]:
        return self.minimal_ids & self.contextual_ids

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "minimal": sorted(self.minimal_ids),
            "contextual": sorted(self.contextual_ids),
            "paired": sorted(self.paired_ids),
        }


def curate_benchmarks(
    minimal_records: Sequence[ManifestRecord],
    contextual_records: Sequence[ManifestRecord],
) -> BenchmarkSets:
    """Collect validated ids per track and pair them by concept."""
    return BenchmarkSets(
        minimal_ids=_validated_ids(minimal_records, Track.MINIMAL),
        contextual_ids=_validated_ids(contextual_records, Track.CONTEXTUAL),
    )


def _validated_ids(records: Sequence[ManifestRecord], track: Track) -> frozenset[str]:
    ids: set[str] = set()
    for record in records:
        if record.track is not track or not record.validated:
            continue
        if record.concept_id in ids:
            log.warning(
                "duplicate validated concept %s in %s track; keeping first",
                record.concept_id,
                track.value,
            )
            continue
        ids.add(record.concept_id)
    return frozenset(ids)


@dataclass(frozen=True)
class CellStats:
    """Stage survival for one (task, n, track) cell.

    Errored samples never reached a verdict, so rates use
    ``generated - errored`` as the denominator; a cell where everything
    errored has no rates (reported as ``None``).
    """

    generated: int
    errored: int
    passed_object: int
    passed_background: int | None
    passed_attribute: int

    @property
    def attempted(self) -> int:
        return self.generated - self.errored

    def rate(self, count: int | None) -> float | None:
        if count is None or self.attempted == 0:
            return None
        return count / self.attempted

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "generated": self.generated,
            "errored": self.errored,
            "passed_object": self.passed_object,
            "passed_background": self.passed_background,
            "passed_attribute": self.passed_attribute,
            "rate_object": self.rate(self.passed_object),
            "rate_background": self.rate(self.passed_background),
            "rate_attribute": self.rate(self.passed_attribute),
        }


@dataclass(frozen=True)
class SurvivalStats:
    cells: dict[tuple[str, int, str], CellStats]

    def to_json_dict(self) -> dict[str, Any]:
        return {
            f"{task}/n={n}/{track}": stats.to_json_dict()
            for (task, n, track), stats in sorted(self.cells.items())
        }


def survival_stats(records: Sequence[ManifestRecord]) -> SurvivalStats:
    """Count per-stage survivors for every (task, n, track) cell.

    Records without a validation report count as generated only. The stage
    structure guarantees monotone counts; a violation indicates manifest
    corruption and raises.
    """
    buckets: dict[tuple[str, int, str], dict[str, int]] = {}
    for record in records:
        key = (record.concept.task.value, record.concept.n, record.track.value)
        bucket = buckets.setdefault(
            key,
            {"generated": 0, "errored": 0, "object": 0, "background": 0, "attribute": 0},
        )
        bucket["generated"] += 1
        report = record.validation
        if report is None:
            continue
        if report.status == "errored":
            bucket["errored"] += 1
            continue
        stages_passed = {o.stage.value: o.passed for o in report.outcomes}
        if stages_passed.get("object_check"):
            bucket["object"] += 1
        else:
            continue
        if record.track is Track.MINIMAL:
            if stages_passed.get("background_check"):
                bucket["background"] += 1
            else:
                continue
        if stages_passed.get("attribute_check"):
            bucket["attribute"] += 1

    cells = {}
    for key, bucket in buckets.items():
        track = key[2]
        background = bucket["background"] if track == Track.MINIMAL.value else None
        stats = CellStats(
            generated=bucket["generated"],
            errored=bucket["errored"],
            passed_object=bucket["object"],
            passed_background=background,
            passed_attribute=bucket["attribute"],
        )
        chain = [stats.attempted, stats.passed_object]
        if background is not None:
            chain.append(background)
        chain.append(stats.passed_attribute)
        if any(a < b for a, b in zip(chain, chain[1:])):
            raise InvariantViolation(f"non-monotone survival counts in cell {key}: {chain}")
        cells[key] = stats
    return SurvivalStats(cells)
