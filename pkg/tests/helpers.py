"""Shared fixture builders for pipeline-level tests.

Builds keyed mock scripts for a deterministic concept set: contextual
captions wrap the minimal body in a fixed frame, detections match the
concept exactly (unless scripted to fail), images are synthesized white
rasters (or scripted otherwise), and VQA answers echo the ground truth
(unless scripted to lie).
"""

from __future__ import annotations

import json
import os
from typing import Iterable

from autocomp.captions import WHITE_BACKGROUND_SUFFIX, CaptionEngine
from autocomp.concepts import Concept, TaskKind, Vocabulary


def contextual_text(engine: CaptionEngine, concept: Concept) -> str:
    body = engine.render_minimal(concept).text
    body = body[: -len(" " + WHITE_BACKGROUND_SUFFIX)]
    return f"The photo shows {body} in a tidy, sunlit room."


def concept_detections(vocab: Vocabulary, concept: Concept, miscount: str | None = None):
    detections = []
    slot = 0.0
    for name in concept.objects:
        entry = vocab.object_entry(name)
        count = entry.expected_count
        if name == miscount:
            count += 1
        for i in range(count):
            x0 = min(0.8, slot)
            detections.append(
                {
                    "label": entry.name,
                    "score": 0.9,
                    "bbox": [x0, 0.25, min(x0 + 0.1, 0.9), 0.5],
                }
            )
            slot += 0.12
    return detections


def build_mock_script(
    vocab: Vocabulary,
    engine: CaptionEngine,
    concepts: Iterable[Concept],
    object_fail: set[str] = frozenset(),
    background_fail: set[str] = frozenset(),
    attribute_fail: set[str] = frozenset(),
) -> dict:
    """Keyed script covering text, image, detect, and vqa for the concepts.

    Failure sets name concept ids that should be rejected at the given
    stage (background failures apply to the minimal track only).
    """
    fixtures = []
    for concept in concepts:
        caption = contextual_text(engine, concept)
        prompt = engine.build_contextual_prompt(concept, attempt=1)
        fixtures.append(
            {
                "capability": "text",
                "match": {"conditions": [{"field": "user", "equals": prompt.user_text}]},
                "response": {"result": {"text": caption}, "model_id": "mock-llm"},
            }
        )
        for track in ("minimal", "contextual"):
            image_rel = os.path.join("images", track, concept.id + ".png")
            if track == "minimal" and concept.id in background_fail:
                synth = {"size": [48, 48], "background": [150, 150, 150]}
            else:
                synth = {"size": [48, 48], "background": [255, 255, 255]}
            caption_text = (
                engine.render_minimal(concept).text if track == "minimal" else caption
            )
            fixtures.append(
                {
                    "capability": "image",
                    "match": {
                        "conditions": [{"field": "caption", "equals": caption_text}]
                    },
                    "response": {
                        "result": {"image_synth": synth},
                        "model_id": "mock-t2i",
                    },
                }
            )
            detections = concept_detections(
                vocab,
                concept,
                miscount=concept.objects[0] if concept.id in object_fail else None,
            )
            fixtures.append(
                {
                    "capability": "detect",
                    "match": {
                        "conditions": [{"field": "image_path", "contains": image_rel}]
                    },
                    "response": {
                        "result": {"detections": detections},
                        "model_id": "mock-detector",
                    },
                }
            )
        def surface(name: str) -> str:
            entry = vocab.object_entry(name)
            return entry.plural if entry.is_plural else entry.name

        if concept.task is TaskKind.COLOR:
            questions = [
                (
                    f"What color {'are' if vocab.object_entry(name).is_plural else 'is'}"
                    f" the {surface(name)}?",
                    color,
                )
                for name, color in zip(concept.objects, concept.colors)
            ]
        else:
            questions = [
                (
                    f"Where is the {surface(a)} relative to the {surface(b)}?",
                    rel,
                )
                for a, rel, b in zip(
                    concept.objects, concept.relations, concept.objects[1:]
                )
            ]
        for index, (question, expected) in enumerate(questions):
            answer = expected
            if concept.id in attribute_fail and index == 0:
                answer = _wrong_answer(vocab, concept, expected)
            fixtures.append(
                {
                    "capability": "vqa",
                    "match": {
                        "conditions": [
                            {"field": "question", "equals": question},
                            {"field": "image_path", "contains": concept.id},
                        ]
                    },
                    "response": {"result": {"answer": answer}, "model_id": "mock-vqa"},
                }
            )
    return {"mode": "keyed", "fixtures": fixtures}


def _wrong_answer(vocab: Vocabulary, concept: Concept, expected: str) -> str:
    pool = (
        vocab.color_names if concept.task is TaskKind.COLOR else vocab.relation_names
    )
    return next(name for name in pool if name != expected and name not in concept.attributes)


def write_config(
    path: str,
    vocab_path: str,
    script_path: str,
    out_dir: str,
    tasks: list[dict],
    **extra,
) -> str:
    config = {
        "vocabulary": vocab_path,
        "tasks": tasks,
        "backend": {"mode": "mock", "script": script_path},
        "out": out_dir,
        **extra,
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(config, handle, indent=1)
    return path
