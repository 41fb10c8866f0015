import numpy as np
import pytest

from autocomp.backend import load_mock_script
from autocomp.captions import Track
from autocomp.concepts import Concept, TaskKind
from autocomp.validation import (
    Detection,
    Stage,
    Thresholds,
    ValidationReport,
    VqaQuery,
    build_attribute_questions,
    check_attributes,
    check_background,
    check_objects,
    luma,
    validate_sample,
)


def detection(label, bbox=(0.1, 0.1, 0.3, 0.3), score=0.9):
    return Detection(label=label, score=score, bbox=bbox)


@pytest.fixture(scope="module")
def color_concept():
    return Concept(
        task=TaskKind.COLOR, objects=("monitor", "bicycle"), colors=("red", "blue")
    )


# ----------------------------------------------------------------------
# object check


def test_check_objects_pass(toy_vocab, color_concept):
    outcome = check_objects(
        [detection("monitor"), detection("bicycle")],
        Concept(task=TaskKind.COLOR, objects=("monitor", "bicycle"), colors=("red", "blue")),
        toy_vocab,
        Track.MINIMAL,
    )
    assert outcome.passed
    assert outcome.stage is Stage.OBJECT


def test_check_objects_cardinality_failure(toy_vocab):
    concept = Concept(
        task=TaskKind.COLOR, objects=("monitor", "bicycle"), colors=("red", "blue")
    )
    outcome = check_objects(
        [detection("monitor"), detection("monitor"), detection("bicycle")],
        concept,
        toy_vocab,
        Track.MINIMAL,
    )
    assert not outcome.passed
    assert outcome.detail["mismatches"]["monitor"] == {"expected": 1, "got": 2}


def test_check_objects_plural_expected_count(toy_vocab):
    concept = Concept(task=TaskKind.COLOR, objects=("glove",), colors=("red",))
    two = check_objects(
        [detection("glove"), detection("glove", bbox=(0.5, 0.5, 0.7, 0.7))],
        concept,
        toy_vocab,
        Track.MINIMAL,
    )
    assert two.passed
    one = check_objects([detection("glove")], concept, toy_vocab, Track.MINIMAL)
    assert not one.passed


def test_check_objects_plural_surface_label(toy_vocab):
    concept = Concept(task=TaskKind.COLOR, objects=("glove",), colors=("red",))
    outcome = check_objects(
        [detection("gloves"), detection("gloves", bbox=(0.5, 0.5, 0.7, 0.7))],
        concept,
        toy_vocab,
        Track.MINIMAL,
    )
    assert outcome.passed


def test_check_objects_extra_label_policy(toy_vocab):
    concept = Concept(
        task=TaskKind.COLOR, objects=("monitor", "bicycle"), colors=("red", "blue")
    )
    detections = [detection("monitor"), detection("bicycle"), detection("lamp")]
    minimal = check_objects(detections, concept, toy_vocab, Track.MINIMAL)
    contextual = check_objects(detections, concept, toy_vocab, Track.CONTEXTUAL)
    assert not minimal.passed
    assert minimal.detail["extra_labels"] == ["lamp"]
    assert contextual.passed


# ----------------------------------------------------------------------
# background check


def test_background_all_white_with_masked_rect():
    pixels = np.full((40, 40, 3), 255, dtype=np.uint8)
    pixels[10:20, 10:20] = 0  # the object itself is dark
    outcome = check_background(
        pixels, [detection("x", bbox=(0.25, 0.25, 0.5, 0.5))]
    )
    assert outcome.passed
    assert outcome.detail["fraction"] == 1.0


def test_background_uniform_gray_fails():
    pixels = np.full((32, 32, 3), 150, dtype=np.uint8)
    outcome = check_background(pixels, [])
    assert not outcome.passed
    assert outcome.detail["fraction"] == 0.0


def test_background_half_split_is_exact():
    pixels = np.full((32, 32, 3), 255, dtype=np.uint8)
    pixels[16:, :] = 100
    outcome = check_background(pixels, [])
    assert outcome.detail["fraction"] == 0.5
    assert not outcome.passed


def test_background_threshold_inclusive():
    pixels = np.full((16, 16, 3), 190, dtype=np.uint8)
    outcome = check_background(pixels, [])
    assert outcome.passed
    assert outcome.detail["fraction"] == 1.0
    # exactly at the 70% fraction boundary
    pixels = np.full((10, 10, 3), 255, dtype=np.uint8)
    pixels[:3, :] = 0
    outcome = check_background(pixels, [])
    assert outcome.detail["fraction"] == 0.7
    assert outcome.passed


def test_background_all_masked():
    pixels = np.full((8, 8, 3), 255, dtype=np.uint8)
    outcome = check_background(pixels, [detection("x", bbox=(0.0, 0.0, 1.0, 1.0))])
    assert not outcome.passed
    assert outcome.detail["reason"] == "all_pixels_masked"


def test_background_uses_pixel_masks_when_present():
    pixels = np.full((8, 8, 3), 0, dtype=np.uint8)
    mask = np.zeros((8, 8), dtype=bool)
    mask[:, :4] = True
    pixels[:, 4:] = 255
    outcome = check_background(
        pixels, [Detection(label="x", score=0.9, bbox=(0.0, 0.0, 0.5, 1.0), mask=mask)]
    )
    assert outcome.passed
    assert outcome.detail["fraction"] == 1.0


def test_luma_uses_rec601_weights():
    pixel = np.array([[[100, 200, 50]]], dtype=np.uint8)
    expected = round(0.299 * 100 + 0.587 * 200 + 0.114 * 50)
    assert luma(pixel)[0, 0] == expected


def test_custom_thresholds_respected():
    pixels = np.full((8, 8, 3), 170, dtype=np.uint8)
    assert not check_background(pixels, []).passed
    assert check_background(pixels, [], Thresholds(luma=160)).passed


# ----------------------------------------------------------------------
# attribute check


def test_color_questions(toy_vocab, color_concept):
    queries = build_attribute_questions(color_concept, toy_vocab)
    assert [q.question for q in queries] == [
        "What color is the monitor?",
        "What color is the bicycle?",
    ]
    assert [q.expected for q in queries] == ["red", "blue"]
    assert all(set(q.allowed_answers) == set(toy_vocab.color_names) for q in queries)


def test_single_object_question(toy_vocab):
    concept = Concept(task=TaskKind.COLOR, objects=("chair",), colors=("green",))
    queries = build_attribute_questions(concept, toy_vocab)
    assert len(queries) == 1


def test_position_question_phrasing(toy_vocab):
    concept = Concept(
        task=TaskKind.POSITION,
        objects=("monitor", "bicycle"),
        relations=("to the left of",),
    )
    queries = build_attribute_questions(concept, toy_vocab)
    assert queries[0].question == "Where is the monitor relative to the bicycle?"
    assert queries[0].expected == "to the left of"


def test_plural_question_agreement(toy_vocab):
    concept = Concept(task=TaskKind.COLOR, objects=("glove",), colors=("red",))
    queries = build_attribute_questions(concept, toy_vocab)
    assert queries[0].question == "What color are the gloves?"


def test_check_attributes_pass_and_fail(toy_vocab, color_concept):
    queries = build_attribute_questions(color_concept, toy_vocab)
    assert check_attributes(["red", "blue"], queries).passed
    assert check_attributes(["Red ", "BLUE"], queries).passed
    wrong = check_attributes(["red", "green"], queries)
    assert not wrong.passed


def test_check_attributes_out_of_vocabulary(toy_vocab, color_concept):
    queries = build_attribute_questions(color_concept, toy_vocab)
    outcome = check_attributes(["crimson", "blue"], queries)
    assert not outcome.passed
    assert outcome.detail["answers"][0]["reason"] == "answer_out_of_vocabulary"


def test_vqa_query_invariant():
    with pytest.raises(ValueError):
        VqaQuery("q?", ("red", "blue"), "green")


# ----------------------------------------------------------------------
# staged validation


def _image(tmp_path, value=255):
    from PIL import Image

    path = tmp_path / "img.png"
    Image.new("RGB", (16, 16), (value, value, value)).save(path)
    return str(path)


def _script(detections, answers):
    fixtures = [
        {
            "capability": "detect",
            "response": {"result": {"detections": detections}},
        }
    ]
    fixtures.extend(
        {"capability": "vqa", "response": {"result": {"answer": a}}} for a in answers
    )
    return load_mock_script({"mode": "ordered", "fixtures": fixtures})


def test_validate_sample_all_pass(tmp_path, toy_vocab, color_concept):
    backend = _script(
        [
            {"label": "monitor", "score": 0.9, "bbox": [0.1, 0.1, 0.3, 0.3]},
            {"label": "bicycle", "score": 0.9, "bbox": [0.5, 0.5, 0.8, 0.8]},
        ],
        ["red", "blue"],
    )
    report = validate_sample(
        "img-1", _image(tmp_path), color_concept, Track.MINIMAL, backend, toy_vocab
    )
    assert report.status == "validated"
    assert [o.stage for o in report.outcomes] == [
        Stage.OBJECT,
        Stage.BACKGROUND,
        Stage.ATTRIBUTE,
    ]


def test_validate_sample_short_circuits_on_object(tmp_path, toy_vocab, color_concept):
    backend = _script([], [])
    report = validate_sample(
        "img-2", _image(tmp_path), color_concept, Track.MINIMAL, backend, toy_vocab
    )
    assert report.status == "rejected"
    assert report.rejected_stage is Stage.OBJECT
    assert [o.stage for o in report.outcomes] == [Stage.OBJECT]


def test_validate_sample_background_failure_records_fraction(
    tmp_path, toy_vocab, color_concept
):
    backend = _script(
        [
            {"label": "monitor", "score": 0.9, "bbox": [0.1, 0.1, 0.3, 0.3]},
            {"label": "bicycle", "score": 0.9, "bbox": [0.5, 0.5, 0.8, 0.8]},
        ],
        [],
    )
    report = validate_sample(
        "img-3",
        _image(tmp_path, value=120),
        color_concept,
        Track.MINIMAL,
        backend,
        toy_vocab,
    )
    assert report.status == "rejected"
    assert report.rejected_stage is Stage.BACKGROUND
    assert report.outcomes[-1].detail["fraction"] == 0.0


def test_validate_sample_contextual_skips_background(tmp_path, toy_vocab, color_concept):
    backend = _script(
        [
            {"label": "monitor", "score": 0.9, "bbox": [0.1, 0.1, 0.3, 0.3]},
            {"label": "bicycle", "score": 0.9, "bbox": [0.5, 0.5, 0.8, 0.8]},
        ],
        ["red", "blue"],
    )
    report = validate_sample(
        "img-4",
        _image(tmp_path, value=120),
        color_concept,
        Track.CONTEXTUAL,
        backend,
        toy_vocab,
    )
    assert report.status == "validated"
    assert Stage.BACKGROUND not in [o.stage for o in report.outcomes]


def test_validate_sample_errored_on_backend_failure(tmp_path, toy_vocab, color_concept):
    from autocomp.errors import BackendUnavailable

    class Down:
        def call(self, request):
            raise BackendUnavailable("nope")

    report = validate_sample(
        "img-5", _image(tmp_path), color_concept, Track.MINIMAL, Down(), toy_vocab
    )
    assert report.status == "errored"
    assert report.outcomes == ()


def test_report_json_round_trip(tmp_path, toy_vocab, color_concept):
    backend = _script(
        [
            {"label": "monitor", "score": 0.9, "bbox": [0.1, 0.1, 0.3, 0.3]},
            {"label": "bicycle", "score": 0.9, "bbox": [0.5, 0.5, 0.8, 0.8]},
        ],
        ["red", "blue"],
    )
    report = validate_sample(
        "img-6", _image(tmp_path), color_concept, Track.MINIMAL, backend, toy_vocab
    )
    assert ValidationReport.from_json_dict(report.to_json_dict()) == report


def test_detection_invariants():
    with pytest.raises(ValueError):
        Detection(label="x", score=0.5, bbox=(0.5, 0.1, 0.2, 0.3))
    with pytest.raises(ValueError):
        Detection(label="x", score=1.5, bbox=(0.1, 0.1, 0.2, 0.3))
