import json
import logging

import pytest

from autocomp.captions import Track
from autocomp.concepts import TaskKind
from autocomp.store import (
    BenchmarkSets,
    ManifestRecord,
    curate_benchmarks,
    read_manifest,
    record_from_caption,
    survival_stats,
    write_manifest,
)
from autocomp.validation import Stage, StageOutcome, ValidationReport


def _record(engine, concept, track=Track.MINIMAL, status=None, stages=()):
    caption = engine.render_minimal(concept)
    if track is Track.CONTEXTUAL:
        caption = type(caption)(
            concept=caption.concept,
            track=Track.CONTEXTUAL,
            text=caption.text,
            tokens=caption.tokens,
            match=caption.match,
            attempts=1,
            generator_id="test",
        )
    record = record_from_caption(caption)
    if status is not None:
        record = record.with_validation(
            ValidationReport(
                image_id="img",
                concept_id=concept.id,
                track=track,
                outcomes=tuple(stages),
                status=status,
            )
        )
    return record


def _passing_stages(track):
    stages = [StageOutcome(Stage.OBJECT, True, {})]
    if track is Track.MINIMAL:
        stages.append(StageOutcome(Stage.BACKGROUND, True, {"fraction": 1.0}))
    stages.append(StageOutcome(Stage.ATTRIBUTE, True, {}))
    return stages


def concepts(toy_vocab, count, seed=5):
    from autocomp.concepts import sample_concepts

    return sample_concepts(toy_vocab, TaskKind.COLOR, 2, count, seed)


# ----------------------------------------------------------------------
# manifest round trip


def test_manifest_round_trip(tmp_path, toy_engine, toy_vocab):
    path = str(tmp_path / "manifest.jsonl")
    records = [
        _record(toy_engine, c, status="validated", stages=_passing_stages(Track.MINIMAL))
        for c in concepts(toy_vocab, 3)
    ]
    write_manifest(records, path)
    loaded = read_manifest(path)
    assert [r.to_json_dict() for r in loaded] == [r.to_json_dict() for r in records]
    assert sum(1 for _ in open(path)) == 3


def test_manifest_rewrite_is_byte_identical(tmp_path, toy_engine, toy_vocab):
    path = str(tmp_path / "manifest.jsonl")
    records = [_record(toy_engine, c) for c in concepts(toy_vocab, 3)]
    write_manifest(records, path)
    first = open(path, "rb").read()
    write_manifest(read_manifest(path), path)
    assert open(path, "rb").read() == first


def test_manifest_rejects_tampered_concept(tmp_path, toy_engine, toy_vocab):
    path = str(tmp_path / "manifest.jsonl")
    record = _record(toy_engine, concepts(toy_vocab, 1)[0])
    doc = record.to_json_dict()
    doc["concept_id"] = "0" * 16
    with open(path, "w") as handle:
        handle.write(json.dumps(doc) + "\n")
    with pytest.raises(Exception) as excinfo:
        read_manifest(path)
    assert "re-hashes" in str(excinfo.value)


def test_manifest_requires_caption(tmp_path, toy_engine, toy_vocab):
    record = _record(toy_engine, concepts(toy_vocab, 1)[0])
    doc = record.to_json_dict()
    del doc["caption"]
    with pytest.raises(Exception):
        ManifestRecord.from_json_dict(doc)


def test_record_lifecycle_is_monotone(toy_engine, toy_vocab):
    concept = concepts(toy_vocab, 1)[0]
    record = _record(toy_engine, concept)
    assert record.image_path is None and record.validation is None
    with_image = record.with_image("images/minimal/x.png")
    assert with_image.caption_text == record.caption_text
    assert "synthesized" in with_image.timestamps
    with_validation = with_image.with_validation(
        ValidationReport(
            image_id="x",
            concept_id=concept.id,
            track=Track.MINIMAL,
            outcomes=tuple(_passing_stages(Track.MINIMAL)),
            status="validated",
        )
    )
    assert with_validation.image_path == "images/minimal/x.png"
    assert with_validation.validated


def test_caption_record_reconstruction_supports_substitution(toy_engine, toy_vocab):
    from autocomp.negatives import Arrangement, Scheme

    concept = concepts(toy_vocab, 1)[0]
    record = _record(toy_engine, concept)
    caption = record.caption_record()
    swapped = toy_engine.substitute_spans(
        caption, Arrangement((0, 1), (1, 0), Scheme.SWAP)
    )
    assert swapped != caption.text


# ----------------------------------------------------------------------
# curation


def test_curate_intersection(toy_engine, toy_vocab):
    c1, c2, c3, c4 = concepts(toy_vocab, 4)
    minimal = [
        _record(toy_engine, c, Track.MINIMAL, "validated", _passing_stages(Track.MINIMAL))
        for c in (c1, c2, c3)
    ]
    contextual = [
        _record(toy_engine, c, Track.CONTEXTUAL, "validated", _passing_stages(Track.CONTEXTUAL))
        for c in (c2, c3, c4)
    ]
    sets = curate_benchmarks(minimal, contextual)
    assert sets.minimal_ids == frozenset({c1.id, c2.id, c3.id})
    assert sets.paired_ids == frozenset({c2.id, c3.id})
    assert len(sets.paired_ids) <= min(len(sets.minimal_ids), len(sets.contextual_ids))


def test_curate_drops_unvalidated(toy_engine, toy_vocab):
    c1, c2 = concepts(toy_vocab, 2)
    minimal = [
        _record(toy_engine, c1, Track.MINIMAL, "validated", _passing_stages(Track.MINIMAL)),
        _record(toy_engine, c2, Track.MINIMAL, "rejected", [StageOutcome(Stage.OBJECT, False, {})]),
    ]
    sets = curate_benchmarks(minimal, [])
    assert sets.minimal_ids == frozenset({c1.id})
    assert sets.paired_ids == frozenset()


def test_curate_warns_on_duplicates(toy_engine, toy_vocab, caplog):
    c1 = concepts(toy_vocab, 1)[0]
    record = _record(
        toy_engine, c1, Track.MINIMAL, "validated", _passing_stages(Track.MINIMAL)
    )
    with caplog.at_level(logging.WARNING):
        sets = curate_benchmarks([record, record], [])
    assert sets.minimal_ids == frozenset({c1.id})
    assert any("duplicate" in message for message in caplog.messages)


def test_curate_empty_contextual(toy_engine, toy_vocab):
    c1 = concepts(toy_vocab, 1)[0]
    minimal = [
        _record(toy_engine, c1, Track.MINIMAL, "validated", _passing_stages(Track.MINIMAL))
    ]
    assert curate_benchmarks(minimal, []).paired_ids == frozenset()


# ----------------------------------------------------------------------
# survival statistics


def _report(concept, track, stages):
    outcomes = []
    status = "validated"
    rejected = None
    for stage, passed in stages:
        outcomes.append(StageOutcome(stage, passed, {}))
        if not passed:
            status = "rejected"
            rejected = stage
            break
    return ValidationReport(
        image_id="x",
        concept_id=concept.id,
        track=track,
        outcomes=tuple(outcomes),
        status=status,
        rejected_stage=rejected,
    )


def _stats_fixture(toy_engine, toy_vocab, outcomes, track=Track.MINIMAL):
    """outcomes: list of stage->passed maps or 'errored' / None markers."""
    records = []
    pool = concepts(toy_vocab, len(outcomes), seed=11)
    for concept, plan in zip(pool, outcomes):
        record = _record(toy_engine, concept, track)
        if plan == "errored":
            record = record.with_validation(
                ValidationReport(
                    image_id="x",
                    concept_id=concept.id,
                    track=track,
                    outcomes=(),
                    status="errored",
                )
            )
        elif plan is not None:
            record = record.with_validation(_report(concept, track, plan))
        records.append(record)
    return records


def test_survival_rates_basic(toy_engine, toy_vocab):
    plans = (
        [[(Stage.OBJECT, True), (Stage.BACKGROUND, True), (Stage.ATTRIBUTE, True)]] * 2
        + [[(Stage.OBJECT, True), (Stage.BACKGROUND, True), (Stage.ATTRIBUTE, False)]]
        + [[(Stage.OBJECT, True), (Stage.BACKGROUND, False)]]
        + [[(Stage.OBJECT, False)]]
    )
    records = _stats_fixture(toy_engine, toy_vocab, plans)
    stats = survival_stats(records)
    cell = stats.cells[("color", 2, "minimal")]
    assert cell.generated == 5
    assert cell.passed_object == 4
    assert cell.passed_background == 3
    assert cell.passed_attribute == 2
    assert cell.rate(cell.passed_object) == 0.8
    assert cell.to_json_dict()["rate_attribute"] == 0.4


def test_survival_excludes_errored_from_denominator(toy_engine, toy_vocab):
    plans = (
        [[(Stage.OBJECT, True), (Stage.BACKGROUND, True), (Stage.ATTRIBUTE, True)]]
        + ["errored"]
    )
    records = _stats_fixture(toy_engine, toy_vocab, plans)
    cell = survival_stats(records).cells[("color", 2, "minimal")]
    assert cell.generated == 2 and cell.errored == 1
    assert cell.rate(cell.passed_object) == 1.0


def test_survival_all_errored_reports_na(toy_engine, toy_vocab):
    records = _stats_fixture(toy_engine, toy_vocab, ["errored", "errored"])
    cell = survival_stats(records).cells[("color", 2, "minimal")]
    assert cell.generated == 2
    assert cell.to_json_dict()["rate_object"] is None


def test_survival_contextual_has_no_background_stage(toy_engine, toy_vocab):
    plans = [[(Stage.OBJECT, True), (Stage.ATTRIBUTE, True)]]
    records = _stats_fixture(toy_engine, toy_vocab, plans, track=Track.CONTEXTUAL)
    cell = survival_stats(records).cells[("color", 2, "contextual")]
    assert cell.passed_background is None
    assert cell.passed_attribute == 1


def test_survival_accepts_monotone_paper_shaped_row(toy_engine, toy_vocab):
    # Mirrors the published minimal-track survival shape 28.6 -> 24.9 -> 16.3
    # on a 1000-sample denominator.
    plans = []
    plans += [[(Stage.OBJECT, True), (Stage.BACKGROUND, True), (Stage.ATTRIBUTE, True)]] * 163
    plans += [[(Stage.OBJECT, True), (Stage.BACKGROUND, True), (Stage.ATTRIBUTE, False)]] * 86
    plans += [[(Stage.OBJECT, True), (Stage.BACKGROUND, False)]] * 37
    plans += [[(Stage.OBJECT, False)]] * 714
    records = []
    pool = concepts(toy_vocab, 40, seed=13)
    for index, plan in enumerate(plans):
        concept = pool[index % len(pool)]
        record = _record(toy_engine, concept, Track.MINIMAL)
        records.append(record.with_validation(_report(concept, Track.MINIMAL, plan)))
    cell = survival_stats(records).cells[("color", 2, "minimal")]
    assert cell.generated == 1000
    assert (cell.passed_object, cell.passed_background, cell.passed_attribute) == (
        286, 249, 163,
    )
    rates = cell.to_json_dict()
    assert rates["rate_object"] == pytest.approx(0.286)
    assert rates["rate_background"] == pytest.approx(0.249)
    assert rates["rate_attribute"] == pytest.approx(0.163)


def test_survival_monotonicity_guard(toy_engine, toy_vocab):
    # A background pass without an object pass is manifest corruption.
    concept = concepts(toy_vocab, 1, seed=17)[0]
    record = _record(toy_engine, concept, Track.MINIMAL)
    broken = ValidationReport(
        image_id="x",
        concept_id=concept.id,
        track=Track.MINIMAL,
        outcomes=(
            StageOutcome(Stage.OBJECT, False, {}),
            StageOutcome(Stage.BACKGROUND, True, {}),
            StageOutcome(Stage.ATTRIBUTE, True, {}),
        ),
        status="rejected",
        rejected_stage=Stage.OBJECT,
    )
    records = [record.with_validation(broken)]
    stats = survival_stats(records)  # later stages ignored after a failure
    cell = stats.cells[("color", 2, "minimal")]
    assert cell.passed_object == 0
    assert cell.passed_background == 0


def test_benchmark_sets_serialization():
    sets = BenchmarkSets(frozenset({"a", "b"}), frozenset({"b", "c"}))
    doc = sets.to_json_dict()
    assert doc["paired"] == ["b"]
    assert doc["minimal"] == ["a", "b"]
