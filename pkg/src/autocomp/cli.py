"""Command-line orchestration of the benchmark pipeline.

Exit codes: 0 success, 1 partial (some samples errored), 2 configuration
error, 3 backend unreachable.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from typing import Any

import click

from .errors import AutocompError, BackendUnavailable, ConfigError
from .evaluator import paired_deltas
from .pipeline import (
    STAGES,
    Pipeline,
    load_run_config,
    live_trials,
    run_blind_eval,
    run_eval,
    trials_from_score_file,
)
from .reports import FORMATS, render_deltas, render_scores, render_survival

EXIT_CONFIG = 2
EXIT_BACKEND = 3


def _common_overrides(seed, workers, mock, out):
    overrides: dict[str, Any] = {}
    if workers is not None:
        overrides["workers"] = workers
    if mock is not None:
        overrides["backend"] = {"mode": "mock", "script": mock}
    if out is not None:
        overrides["out"] = out
    if seed is not None:
        overrides["_seed"] = seed
    return overrides


def _build_pipeline(config_path, overrides) -> Pipeline:
    seed = overrides.pop("_seed", None)
    config = load_run_config(config_path, overrides)
    if seed is not None:
        from dataclasses import replace

        config = replace(
            config,
            tasks=tuple(replace(t, seed=seed) for t in config.tasks),
        )
    return Pipeline(config)


def _pipeline_command(config, stage_list, seed, workers, mock, out, fresh):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        pipeline = _build_pipeline(config, _common_overrides(seed, workers, mock, out))
        report = pipeline.run(stages=stage_list, fresh=fresh)
    except ConfigError as exc:
        click.echo(f"configuration error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except BackendUnavailable as exc:
        click.echo(f"backend unreachable: {exc}", err=True)
        sys.exit(EXIT_BACKEND)
    click.echo(json.dumps(report.to_json_dict(), indent=1, sort_keys=True))
    sys.exit(report.exit_code)


_CONFIG = click.option("--config", required=True, type=click.Path(), help="Run configuration JSON.")
_SEED = click.option("--seed", type=int, default=None, help="Override every task seed.")
_WORKERS = click.option("--workers", type=int, default=None, help="Worker pool size.")
_MOCK = click.option("--mock", type=click.Path(), default=None, help="Use this mock script as the backend.")
_OUT = click.option("--out", type=click.Path(), default=None, help="Output directory override.")
_RESUME = click.option("--resume/--fresh", default=True, help="Reuse or discard existing manifests.")


@click.group()
def main() -> None:
    """Concept-driven compositional benchmark tooling."""


def _make_stage_command(stage: str, doc: str):
    @main.command(name=stage.replace("captions", "gen-captions"))
    @_CONFIG
    @_SEED
    @_WORKERS
    @_MOCK
    @_OUT
    @_RESUME
    def _command(config, seed, workers, mock, out, resume):
        _pipeline_command(config, [stage], seed, workers, mock, out, fresh=not resume)

    _command.__doc__ = doc
    return _command


_make_stage_command("captions", "Sample concepts and generate paired captions.")
_make_stage_command("synth", "Generate images for captioned records.")
_make_stage_command("validate", "Run the staged image validation.")
_make_stage_command("negatives", "Build swap and confusion negative sets.")
_make_stage_command("curate", "Derive benchmark sets and survival stats.")


@main.command()
@_CONFIG
@click.option("--stage", "stage_csv", default=None, help="Comma-separated stage subset.")
@_SEED
@_WORKERS
@_MOCK
@_OUT
@_RESUME
def run(config, stage_csv, seed, workers, mock, out, resume):
    """Run the configured stages in pipeline order."""
    stages = None
    if stage_csv:
        stages = [s.strip() for s in stage_csv.split(",") if s.strip()]
        unknown = [s for s in stages if s not in STAGES]
        if unknown:
            click.echo(f"configuration error: unknown stages {unknown}", err=True)
            sys.exit(EXIT_CONFIG)
    _pipeline_command(config, stages, seed, workers, mock, out, fresh=not resume)


@main.command(name="eval")
@_CONFIG
@click.option("--scores", "scores_path", type=click.Path(), default=None,
              help="JSONL score file; omit to score live via the embed capability.")
@click.option("--paired-only", is_flag=True, help="Restrict live scoring to the paired set.")
@_MOCK
@_OUT
def eval_command(config, scores_path, paired_only, mock, out):
    """Aggregate trial scores into benchmark accuracies."""
    try:
        pipeline = _build_pipeline(config, _common_overrides(None, None, mock, out))
        pipeline.load_manifest()
        if scores_path is not None:
            trials = trials_from_score_file(scores_path)
        else:
            trials = live_trials(pipeline, paired_only=paired_only)
        scores = run_eval(pipeline, trials)
    except ConfigError as exc:
        click.echo(f"configuration error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except BackendUnavailable as exc:
        click.echo(f"backend unreachable: {exc}", err=True)
        sys.exit(EXIT_BACKEND)
    click.echo(render_scores(scores.to_json_dict(), "table"), nl=False)


@main.command(name="blind-eval")
@_CONFIG
@_MOCK
@_OUT
def blind_eval_command(config, mock, out):
    """Caption-only multiple-choice evaluation via the text backend."""
    try:
        pipeline = _build_pipeline(config, _common_overrides(None, None, mock, out))
        pipeline.load_manifest()
        report = run_blind_eval(pipeline)
    except ConfigError as exc:
        click.echo(f"configuration error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except BackendUnavailable as exc:
        click.echo(f"backend unreachable: {exc}", err=True)
        sys.exit(EXIT_BACKEND)
    click.echo(json.dumps(report, indent=1, sort_keys=True))


@main.command()
@_CONFIG
@_OUT
def stats(config, out):
    """Recompute survival statistics from the manifest."""
    try:
        pipeline = _build_pipeline(config, _common_overrides(None, None, None, out))
        pipeline.load_manifest()
        from .store import survival_stats

        doc = survival_stats(list(pipeline.records.values())).to_json_dict()
    except (ConfigError, AutocompError) as exc:
        click.echo(f"configuration error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    stats_path = os.path.join(pipeline.out, "stats.json")
    with open(stats_path, "w", encoding="utf-8") as handle:
        json.dump(doc, handle, indent=1, sort_keys=True)
        handle.write("\n")
    click.echo(render_survival(doc, "table"), nl=False)


@main.command()
@_CONFIG
@click.option("--kind", type=click.Choice(["scores", "survival", "deltas"]), default="survival")
@click.option("--format", "fmt", type=click.Choice(FORMATS), default="table")
@_OUT
def report(config, kind, fmt, out):
    """Render stored results as a table, CSV, or JSON."""
    try:
        pipeline = _build_pipeline(config, _common_overrides(None, None, None, out))
    except ConfigError as exc:
        click.echo(f"configuration error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    if kind == "survival":
        doc = _load_json(pipeline.stats_path)
        click.echo(render_survival(doc, fmt), nl=False)
    elif kind == "scores":
        doc = _load_json(os.path.join(pipeline.out, "scores.json"))
        click.echo(render_scores(doc, fmt), nl=False)
    else:
        scores_doc = _load_json(os.path.join(pipeline.out, "scores.json"))
        minimal, contextual = {}, {}
        for cell in scores_doc.get("cells", []):
            target = minimal if cell["track"] == "minimal" else contextual
            target[(cell["task"], cell["n"], cell["scheme"])] = 100.0 * cell["accuracy"]
        deltas = paired_deltas(minimal, contextual)
        click.echo(
            render_deltas([d.to_json_dict() for d in deltas.values()], fmt), nl=False
        )


def _load_json(path: str) -> Any:
    if not os.path.exists(path):
        click.echo(f"configuration error: missing {path}", err=True)
        sys.exit(EXIT_CONFIG)
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle)


if __name__ == "__main__":
    main()
