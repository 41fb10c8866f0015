"""Declarative run configuration and the staged pipeline orchestrator.

Stages run in pipeline order (captions -> synth -> validate -> negatives ->
curate) over a single manifest keyed by (concept, track). Every stage skips
records it has already completed, the manifest is flushed atomically after
each stage, and with cached backends a rerun issues no new remote calls, so
interrupting and resuming converges on the same bytes.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from . import backend as bk
from .captions import CaptionEngine, Discarded, Track
from .concepts import Concept, TaskKind, Vocabulary, load_vocabulary_file, sample_concepts
from .errors import BackendUnavailable, ConfigError
from .evaluator import (
    BenchmarkScores,
    BlindPrompt,
    ScoreMatrix,
    Trial,
    aggregate,
    build_blind_prompt,
    cosine_scores,
    parse_choice,
)
from .negatives import Arrangement, NegativeSet, Scheme, build_negative_set
from .store import (
    ManifestRecord,
    curate_benchmarks,
    read_manifest,
    record_from_caption,
    survival_stats,
    write_manifest,
)
from .validation import Thresholds, validate_sample

log = logging.getLogger(__name__)

STAGES = ("captions", "synth", "validate", "negatives", "curate")

CACHE_DIR_ENV = "AUTOCOMP_CACHE_DIR"


@dataclass(frozen=True)
class TaskSpec:
    task: TaskKind
    n: int
    count: int
    seed: int


@dataclass(frozen=True)
class RunConfig:
    vocabulary: str
    tasks: tuple[TaskSpec, ...]
    backend_mode: str  # "mock" | "http"
    mock_script: str | None = None
    base_url: str | None = None
    out: str = "runs/out"
    stages: tuple[str, ...] = STAGES
    retries: int = 3
    relation_gap: int = 0
    workers: int = 4
    cache: bool = True
    include_binding_equivalents: bool = True
    thresholds: Thresholds = Thresholds()
    generation: dict[str, Any] = field(default_factory=dict)
    image_params: dict[str, Any] = field(default_factory=dict)
    blind_subsample: int = 49
    blind_seed: int = 0


def load_run_config(path: str, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Parse and validate a JSON run configuration, applying flag overrides."""
    if not os.path.exists(path):
        raise ConfigError(f"config file {path!r} does not exist")
    try:
        with open(path, "r", encoding="utf-8") as handle:
            doc = json.load(handle)
    except ValueError as exc:
        raise ConfigError(f"config {path!r} is not valid JSON: {exc}") from exc
    doc = dict(doc)
    doc.update(overrides or {})
    return _config_from_doc(doc, base_dir=os.path.dirname(os.path.abspath(path)))


def _config_from_doc(doc: Mapping[str, Any], base_dir: str) -> RunConfig:
    def resolve(path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(base_dir, path)

    try:
        vocabulary = resolve(doc["vocabulary"])
        raw_tasks = doc["tasks"]
        backend_doc = doc.get("backend", {})
    except KeyError as exc:
        raise ConfigError(f"config missing required key {exc}") from exc
    if not os.path.exists(vocabulary):
        raise ConfigError(f"vocabulary path {vocabulary!r} does not exist")
    if not raw_tasks:
        raise ConfigError("config needs at least one task spec")

    tasks = []
    for raw in raw_tasks:
        try:
            spec = TaskSpec(
                task=TaskKind(raw["task"]),
                n=int(raw["n"]),
                count=int(raw["count"]),
                seed=int(raw["seed"]),
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad task spec {raw!r}: {exc}") from exc
        if spec.n < 1 or spec.count < 0:
            raise ConfigError(f"bad task spec {raw!r}: n >= 1 and count >= 0 required")
        tasks.append(spec)

    mode = backend_doc.get("mode", "mock")
    mock_script = backend_doc.get("script")
    base_url = backend_doc.get("base_url")
    if mode == "mock":
        if not mock_script:
            raise ConfigError("mock backend needs a script path")
        mock_script = resolve(mock_script)
        if not os.path.exists(mock_script):
            raise ConfigError(f"mock script {mock_script!r} does not exist")
    elif mode == "http":
        if not base_url:
            raise ConfigError("http backend needs a base_url")
    else:
        raise ConfigError(f"unknown backend mode {mode!r}")

    relation_gap = int(doc.get("relation_gap", 0))
    if not 0 <= relation_gap <= 2:
        raise ConfigError("relation_gap must be in 0..2")
    retries = int(doc.get("retries", 3))
    if retries < 1:
        raise ConfigError("retries must be >= 1")
    workers = int(doc.get("workers", 4))
    if workers < 1:
        raise ConfigError("workers must be >= 1")

    stages = tuple(doc.get("stages", STAGES))
    for stage in stages:
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")

    thresholds_doc = doc.get("thresholds", {})
    thresholds = Thresholds(
        luma=thresholds_doc.get("luma", 190),
        white_fraction=thresholds_doc.get("white_fraction", 0.70),
        box=thresholds_doc.get("box", 0.4),
        text=thresholds_doc.get("text", 0.3),
    )

    return RunConfig(
        vocabulary=vocabulary,
        tasks=tuple(tasks),
        backend_mode=mode,
        mock_script=mock_script,
        base_url=base_url,
        out=resolve(doc.get("out", "out")),
        stages=stages,
        retries=retries,
        relation_gap=relation_gap,
        workers=workers,
        cache=bool(doc.get("cache", True)),
        include_binding_equivalents=bool(doc.get("include_binding_equivalents", True)),
        thresholds=thresholds,
        generation=dict(doc.get("generation", {})),
        image_params=dict(doc.get("image", {})),
        blind_subsample=int(doc.get("blind_subsample", 49)),
        blind_seed=int(doc.get("blind_seed", 0)),
    )


@dataclass
class RunReport:
    stages_run: list[str] = field(default_factory=list)
    concepts_requested: int = 0
    captioned: int = 0
    discarded: int = 0
    images: int = 0
    validated: int = 0
    rejected: int = 0
    errored: int = 0
    backend_failures: int = 0
    backend_successes: int = 0
    negative_sets: int = 0
    paired: int = 0
    survival: dict[str, Any] = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        if self.backend_failures and not self.backend_successes:
            return 3
        if self.backend_failures or self.errored:
            return 1
        return 0

    def to_json_dict(self) -> dict[str, Any]:
        doc = dict(self.__dict__)
        doc["exit_code"] = self.exit_code
        return doc


class Pipeline:
    """Executes configured stages over one output directory."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.vocab: Vocabulary = load_vocabulary_file(config.vocabulary)
        self.engine = CaptionEngine(self.vocab, config.relation_gap)
        self.out = config.out
        self.manifest_path = os.path.join(self.out, "manifest.jsonl")
        self.negatives_path = os.path.join(self.out, "negatives.jsonl")
        self.stats_path = os.path.join(self.out, "stats.json")
        self.sets_path = os.path.join(self.out, "benchmark_sets.json")
        self.cache_dir = os.environ.get(
            CACHE_DIR_ENV, os.path.join(self.out, "cache")
        )
        self.backend = self._build_backend()
        self.records: dict[tuple[str, str], ManifestRecord] = {}

    def _build_backend(self):
        if self.config.backend_mode == "mock":
            inner = bk.load_mock_script(
                self.config.mock_script,
                artifact_dir=os.path.join(self.cache_dir, "image"),
            )
        else:
            inner = bk.HttpBackend(self.config.base_url)
        cache = bk.ResponseCache(self.cache_dir)
        handle = bk.ImageMaterializingBackend(inner, cache)
        if self.config.cache:
            handle = bk.CachingBackend(handle, cache)
        return handle

    @property
    def remote_calls(self) -> int:
        handle = self.backend
        return handle.remote_calls if isinstance(handle, bk.CachingBackend) else -1

    # ------------------------------------------------------------------

    def load_manifest(self) -> None:
        self.records = {}
        if os.path.exists(self.manifest_path):
            for record in read_manifest(self.manifest_path):
                self.records[(record.concept_id, record.track.value)] = record

    def flush_manifest(self) -> None:
        write_manifest(self.records.values(), self.manifest_path)

    def concepts(self) -> list[Concept]:
        out = []
        for spec in self.config.tasks:
            out.extend(
                sample_concepts(self.vocab, spec.task, spec.n, spec.count, spec.seed)
            )
        return out

    def run(self, stages: Iterable[str] | None = None, fresh: bool = False) -> RunReport:
        report = RunReport()
        os.makedirs(self.out, exist_ok=True)
        if fresh:
            for path in (self.manifest_path, self.negatives_path, self.stats_path, self.sets_path):
                if os.path.exists(path):
                    os.remove(path)
        self.load_manifest()
        selected = tuple(stages) if stages is not None else self.config.stages
        for stage in selected:
            if stage not in STAGES:
                raise ConfigError(f"unknown stage {stage!r}")
        for stage in STAGES:
            if stage not in selected:
                continue
            getattr(self, f"_stage_{stage}")(report)
            report.stages_run.append(stage)
            self.flush_manifest()
        return report

    # ------------------------------------------------------------------
    # stages

    def _stage_captions(self, report: RunReport) -> None:
        workers = self._effective_workers()

        def produce(concept: Concept):
            minimal = self.engine.render_minimal(concept)
            contextual = self.engine.generate_contextual(
                concept, self.backend, self.config.retries, self.config.generation
            )
            return minimal, contextual

        concepts = []
        for concept in self.concepts():
            report.concepts_requested += 1
            have_min = (concept.id, Track.MINIMAL.value) in self.records
            have_ctx = (concept.id, Track.CONTEXTUAL.value) in self.records
            if have_min and have_ctx:
                continue
            concepts.append(concept)

        for concept, outcome in zip(concepts, self._map(produce, concepts, workers)):
            if isinstance(outcome, BackendUnavailable):
                report.backend_failures += 1
                log.warning("caption generation unavailable for %s: %s", concept.id, outcome)
                continue
            minimal, contextual = outcome
            report.backend_successes += 1
            if isinstance(contextual, Discarded):
                # Strict pairing: the minimal twin is dropped with it.
                report.discarded += 1
                continue
            self.records[(concept.id, Track.MINIMAL.value)] = record_from_caption(minimal)
            self.records[(concept.id, Track.CONTEXTUAL.value)] = record_from_caption(
                contextual
            )
            report.captioned += 2

    def _stage_synth(self, report: RunReport) -> None:
        pending = [
            key for key, record in self.records.items() if record.image_path is None
        ]

        def synthesize(key: tuple[str, str]):
            record = self.records[key]
            request = bk.build_image_request(
                record.caption_text, self.config.image_params
            )
            response = self.backend.call(request)
            source = response.result["image_path"]
            rel = os.path.join("images", record.track.value, record.concept_id + ".png")
            dest = os.path.join(self.out, rel)
            os.makedirs(os.path.dirname(dest), exist_ok=True)
            if not os.path.exists(dest):
                shutil.copyfile(source, dest)
            return rel

        workers = self._effective_workers()
        for key, outcome in zip(pending, self._map(synthesize, pending, workers)):
            if isinstance(outcome, BackendUnavailable):
                report.backend_failures += 1
                log.warning("image synthesis unavailable for %s: %s", key, outcome)
                continue
            report.backend_successes += 1
            self.records[key] = self.records[key].with_image(outcome)
            report.images += 1

    def _stage_validate(self, report: RunReport) -> None:
        pending = [
            key
            for key, record in self.records.items()
            if record.image_path is not None and record.validation is None
        ]

        def validate(key: tuple[str, str]):
            record = self.records[key]
            return validate_sample(
                image_id=record.image_path,
                image_path=os.path.join(self.out, record.image_path),
                concept=record.concept,
                track=record.track,
                backends=self.backend,
                vocab=self.vocab,
                thresholds=self.config.thresholds,
            )

        workers = self._effective_workers()
        for key, outcome in zip(pending, self._map(validate, pending, workers)):
            if isinstance(outcome, BackendUnavailable):  # defensive; reported inside
                report.backend_failures += 1
                continue
            report.backend_successes += 1
            self.records[key] = self.records[key].with_validation(outcome)
            if outcome.status == "validated":
                report.validated += 1
            elif outcome.status == "errored":
                report.errored += 1
            else:
                report.rejected += 1

    def _stage_negatives(self, report: RunReport) -> None:
        sets: list[NegativeSet] = []
        for key in list(self.records):
            record = self.records[key]
            if not record.validated or record.negatives_summary is not None:
                continue
            if record.concept.n < 2:
                self.records[key] = record.with_negatives({})
                continue
            caption = record.caption_record()
            summary = {}
            for scheme in (Scheme.SWAP, Scheme.CONFUSION):
                negative_set = build_negative_set(
                    caption,
                    scheme,
                    self.engine,
                    self.config.include_binding_equivalents,
                )
                sets.append(negative_set)
                summary[scheme.value] = len(negative_set.variants)
            self.records[key] = record.with_negatives(summary)
            report.negative_sets += len(summary)
        if sets or not os.path.exists(self.negatives_path):
            existing = []
            if os.path.exists(self.negatives_path):
                existing = load_negative_sets(self.negatives_path)
            merged = {(s.concept_id, s.track.value, s.scheme.value): s for s in existing}
            for negative_set in sets:
                merged[
                    (negative_set.concept_id, negative_set.track.value, negative_set.scheme.value)
                ] = negative_set
            ordered = []
            for key, record in self.records.items():
                for scheme in (Scheme.SWAP, Scheme.CONFUSION):
                    entry = merged.get((record.concept_id, record.track.value, scheme.value))
                    if entry is not None:
                        ordered.append(entry)
            _write_jsonl(
                self.negatives_path,
                ({"schema": "autocomp/1", **s.to_json_dict()} for s in ordered),
            )

    def _stage_curate(self, report: RunReport) -> None:
        records = list(self.records.values())
        minimal = [r for r in records if r.track is Track.MINIMAL]
        contextual = [r for r in records if r.track is Track.CONTEXTUAL]
        sets = curate_benchmarks(minimal, contextual)
        stats = survival_stats(records)
        report.paired = len(sets.paired_ids)
        report.survival = stats.to_json_dict()
        _write_json(self.sets_path, sets.to_json_dict())
        _write_json(self.stats_path, stats.to_json_dict())

    # ------------------------------------------------------------------

    def _effective_workers(self) -> int:
        # Ordered mock scripts are single-consumer; force sequential replay.
        inner = self.backend
        while hasattr(inner, "inner"):
            inner = inner.inner
        if isinstance(inner, bk.MockBackend) and inner.mode == "ordered":
            return 1
        return self.config.workers

    def _map(self, fn, items, workers: int):
        def guarded(item):
            try:
                return fn(item)
            except BackendUnavailable as exc:
                return exc

        if workers <= 1 or len(items) <= 1:
            return [guarded(item) for item in items]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(guarded, items))


# ----------------------------------------------------------------------
# negative-set persistence


def load_negative_sets(path: str) -> list[NegativeSet]:
    out = []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                out.append(NegativeSet.from_json_dict(json.loads(line)))
    return out


def _write_jsonl(path: str, docs: Iterable[Mapping[str, Any]]) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as handle:
        for doc in docs:
            handle.write(json.dumps(doc, ensure_ascii=False) + "\n")
    os.replace(tmp, path)


def _write_json(path: str, doc: Mapping[str, Any]) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as handle:
        json.dump(doc, handle, indent=1, sort_keys=True)
        handle.write("\n")
    os.replace(tmp, path)


# ----------------------------------------------------------------------
# evaluation entry points


def trials_from_score_file(path: str) -> list[Trial]:
    """Load trials from a JSONL score file.

    Each line: ``{"trial_id", "task", "n", "track", "scheme", "scores":
    [...], "relation"?: str, "candidates"?: [null | {"objects": [...],
    "attributes": [...], "scheme": str}, ...]}`` with the positive at
    index 0.
    """
    trials = []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            doc = json.loads(line)
            arrangements: tuple[Arrangement | None, ...] = ()
            if "candidates" in doc:
                arrangements = tuple(
                    None if c is None else Arrangement.from_json_dict(c)
                    for c in doc["candidates"]
                )
            trials.append(
                Trial(
                    task=TaskKind(doc["task"]),
                    n=int(doc["n"]),
                    track=Track(doc["track"]),
                    scheme=Scheme(doc["scheme"]),
                    relation=doc.get("relation"),
                    matrix=ScoreMatrix(
                        trial_id=str(doc["trial_id"]),
                        scores=tuple(float(s) for s in doc["scores"]),
                        arrangements=arrangements,
                    ),
                )
            )
    return trials


def live_trials(pipeline: Pipeline, paired_only: bool = False) -> list[Trial]:
    """Score validated records against their negatives via the embed capability.

    The image embedding anchors each trial; candidate caption embeddings are
    compared by cosine similarity.
    """
    negative_sets = (
        load_negative_sets(pipeline.negatives_path)
        if os.path.exists(pipeline.negatives_path)
        else []
    )
    by_key = {(s.concept_id, s.track.value, s.scheme.value): s for s in negative_sets}
    paired: set[str] | None = None
    if paired_only:
        records = list(pipeline.records.values())
        sets = curate_benchmarks(
            [r for r in records if r.track is Track.MINIMAL],
            [r for r in records if r.track is Track.CONTEXTUAL],
        )
        paired = set(sets.paired_ids)

    trials = []
    for record in pipeline.records.values():
        if not record.validated or record.image_path is None:
            continue
        if paired is not None and record.concept_id not in paired:
            continue
        image_abs = os.path.join(pipeline.out, record.image_path)
        anchor_response = pipeline.backend.call(
            bk.build_embed_request(image_path=image_abs)
        )
        anchor = anchor_response.result["vectors"][0]
        for scheme in (Scheme.SWAP, Scheme.CONFUSION):
            negative_set = by_key.get(
                (record.concept_id, record.track.value, scheme.value)
            )
            if negative_set is None:
                continue
            texts = [record.caption_text] + [t for _, t in negative_set.variants]
            vectors_response = pipeline.backend.call(bk.build_embed_request(texts=texts))
            scores = cosine_scores(anchor, vectors_response.result["vectors"])
            arrangements = (None,) + tuple(a for a, _ in negative_set.variants)
            relation = (
                record.concept.relations[0]
                if record.concept.task is TaskKind.POSITION and record.concept.n == 2
                else None
            )
            trials.append(
                Trial(
                    task=record.concept.task,
                    n=record.concept.n,
                    track=record.track,
                    scheme=scheme,
                    relation=relation,
                    matrix=ScoreMatrix(
                        trial_id=f"{record.concept_id}/{record.track.value}/{scheme.value}",
                        scores=tuple(scores),
                        arrangements=arrangements,
                    ),
                )
            )
    return trials


def run_eval(pipeline: Pipeline, trials: list[Trial]) -> BenchmarkScores:
    scores = aggregate(trials)
    _write_json(os.path.join(pipeline.out, "scores.json"), scores.to_json_dict())
    return scores


@dataclass(frozen=True)
class BlindCellResult:
    correct: int
    count: int
    unparseable: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.count if self.count else 0.0


def run_blind_eval(pipeline: Pipeline) -> dict[str, Any]:
    """Caption-only multiple choice against the text backend.

    The positive and a seeded subsample of its negatives are shuffled into a
    numbered list; the model must answer with the positive's number.
    Unparseable answers count as incorrect.
    """
    negative_sets = load_negative_sets(pipeline.negatives_path)
    by_key = {(s.concept_id, s.track.value, s.scheme.value): s for s in negative_sets}
    cells: dict[tuple[str, int, str, str], list[int]] = {}
    for record in pipeline.records.values():
        if not record.validated:
            continue
        for scheme in (Scheme.SWAP, Scheme.CONFUSION):
            negative_set = by_key.get(
                (record.concept_id, record.track.value, scheme.value)
            )
            if negative_set is None or not negative_set.variants:
                continue
            texts = [t for _, t in negative_set.variants]
            subsample = min(pipeline.config.blind_subsample, len(texts))
            prompt: BlindPrompt = build_blind_prompt(
                record.caption_text,
                texts,
                seed=pipeline.config.blind_seed + int(record.concept_id[:8], 16),
                subsample=subsample,
            )
            request = bk.build_text_request(
                "You are answering a multiple-choice question.", prompt.text
            )
            response = pipeline.backend.call(request)
            choice = parse_choice(str(response.result["text"]), len(prompt.choices))
            key = (
                record.concept.task.value,
                record.concept.n,
                record.track.value,
                scheme.value,
            )
            cell = cells.setdefault(key, [0, 0, 0])
            cell[1] += 1
            if choice is None:
                cell[2] += 1
            elif choice == prompt.answer_key:
                cell[0] += 1
    report = {}
    for (task, n, track, scheme), (c, t, u) in sorted(cells.items()):
        result = BlindCellResult(c, t, u)
        report[f"{task}/n={n}/{track}/{scheme}"] = {
            "correct": result.correct,
            "count": result.count,
            "unparseable": result.unparseable,
            "accuracy": result.accuracy,
        }
    _write_json(os.path.join(pipeline.out, "blind_report.json"), report)
    return report
