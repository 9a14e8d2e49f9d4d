"""Command-line front door: extraction, evaluation and cache maintenance.

Configuration precedence is flags > environment (CAUSALTEXT_*) > config file
(JSON) > built-in defaults. Exit codes: 0 full success, 1 configuration
error, 2 partial batch failure (some documents failed, the rest completed).
"""

from __future__ import annotations

import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import click

from .errors import (
    CausalTextError,
    EmptyEvaluationSetError,
    GraphFileError,
    ParseError,
    RunLockHeldError,
)
from .evaluation import (
    compare_with_transitive_share,
    parse_semeval,
    render_confusion_table,
    run_pairwise_eval,
)
from .gateway import (
    Gateway,
    LiveTransport,
    ProviderConfig,
    RecordingTransport,
    ReplayFixture,
    ReplayTransport,
    cache_stats,
    clear_cache,
    run_lock,
)
from .graph import GraphFormat, GraphKind, parse_graph, serialize_graph
from .pipeline import PipelineConfig, run_pipeline, run_report

ENV_PREFIX = "CAUSALTEXT"

_FILE_KEYS = {
    "model": str,
    "endpoint": str,
    "temperature": float,
    "parallelism": int,
    "max_retries": int,
    "requests_per_minute": float,
    "entity_cap": int,
    "enforce_acyclic": bool,
    "domain_hint": str,
    "cache_dir": str,
    "out": str,
    "api_key_env": str,
}


class ConfigurationError(CausalTextError):
    pass


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from None
    if not isinstance(payload, dict):
        raise ConfigurationError(f"config file {path} must hold a JSON object")
    unknown = payload.keys() - _FILE_KEYS.keys()
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    return payload


def _setting(name, flag_value, file_config, default):
    """Apply the flags > environment > file > default precedence."""
    if flag_value is not None:
        return flag_value
    cast = _FILE_KEYS[name]
    env_value = os.environ.get(f"{ENV_PREFIX}_{name.upper()}")
    if env_value is not None:
        if cast is bool:
            return env_value.strip().lower() in ("1", "true", "yes")
        return cast(env_value)
    if name in file_config:
        return cast(file_config[name])
    return default


@dataclass
class Settings:
    provider: ProviderConfig
    pipeline: PipelineConfig
    replay_path: str | None
    record_path: str | None
    out_dir: Path


def _resolve_settings(
    config_path,
    replay,
    record,
    model,
    parallelism,
    entity_cap,
    enforce_acyclic,
    out,
    domain_hint,
) -> Settings:
    if replay and record:
        raise ConfigurationError("--replay and --record are mutually exclusive")
    file_config = _load_config_file(config_path)
    try:
        provider = ProviderConfig(
            endpoint_url=_setting(
                "endpoint", None, file_config, ProviderConfig.endpoint_url
            ),
            model_name=_setting("model", model, file_config, ProviderConfig.model_name),
            temperature=_setting("temperature", None, file_config, 0.0),
            max_retries=_setting("max_retries", None, file_config, 3),
            parallelism=_setting("parallelism", parallelism, file_config, 1),
            requests_per_minute=_setting(
                "requests_per_minute", None, file_config, 30.0
            ),
            cache_dir=Path(
                _setting("cache_dir", None, file_config, ".causaltext_cache")
            ),
            api_key_env=_setting("api_key_env", None, file_config, "OPENAI_API_KEY"),
        )
        pipeline = PipelineConfig(
            entity_cap=_setting("entity_cap", entity_cap, file_config, 20),
            enforce_acyclic=_setting(
                "enforce_acyclic", enforce_acyclic or None, file_config, False
            ),
            domain_hint=_setting("domain_hint", domain_hint, file_config, ""),
        )
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from None
    out_dir = Path(_setting("out", out, file_config, "."))
    return Settings(
        provider=provider,
        pipeline=pipeline,
        replay_path=replay,
        record_path=record,
        out_dir=out_dir,
    )


def _build_gateway(settings: Settings) -> tuple[Gateway, RecordingTransport | None]:
    if settings.replay_path:
        fixture = ReplayFixture.load(settings.replay_path)
        return Gateway(settings.provider, ReplayTransport(fixture)), None
    transport = LiveTransport(settings.provider)
    if settings.record_path:
        recorder = RecordingTransport(transport)
        return Gateway(settings.provider, recorder), recorder
    return Gateway(settings.provider, transport), None


def common_options(fn):
    options = [
        click.option("--config", "config_path", type=click.Path(), default=None,
                     help="JSON config file."),
        click.option("--replay", type=click.Path(), default=None,
                     help="Answer prompts from this fixture instead of the provider."),
        click.option("--record", type=click.Path(), default=None,
                     help="Record live exchanges into this fixture file."),
        click.option("--model", default=None, help="Provider model name."),
        click.option("--parallelism", type=int, default=None,
                     help="Concurrent orientation queries."),
        click.option("--entity-cap", type=int, default=None,
                     help="Maximum entities kept per document."),
        click.option("--enforce-acyclic", is_flag=True, default=False,
                     help="Remove arcs until the extracted graph is acyclic."),
        click.option("--out", default=None, help="Output directory."),
        click.option("--domain-hint", default=None,
                     help="Entity categories to emphasise during extraction."),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _fail(message: str, code: int = 1) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
def main() -> None:
    """Extract causal graphs from text and reproduce the benchmark metrics."""
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@common_options
@click.argument("inputs", nargs=-1, required=True, type=click.Path())
def extract(inputs, **options) -> None:
    """Run the extraction pipeline over one document per input file."""
    try:
        settings = _resolve_settings(**options)
        missing = [path for path in inputs if not Path(path).is_file()]
        if missing:
            raise ConfigurationError(f"input not readable: {missing[0]}")
        gateway, recorder = _build_gateway(settings)
    except CausalTextError as exc:
        _fail(str(exc))

    failures = 0
    try:
        with run_lock(settings.provider.cache_dir):
            for path in inputs:
                stem = Path(path).stem
                try:
                    text = Path(path).read_text(encoding="utf-8")
                    run = run_pipeline(
                        text, settings.pipeline.domain_hint, settings.pipeline, gateway
                    )
                except CausalTextError as exc:
                    failures += 1
                    click.echo(f"error: {path}: {exc}", err=True)
                    continue
                out = settings.out_dir
                _write(out / f"{stem}.graph.json",
                       serialize_graph(run.graph, GraphFormat.STRUCTURED))
                _write(out / f"{stem}.dot", serialize_graph(run.graph, GraphFormat.DOT))
                _write(out / f"{stem}.cycles.json",
                       json.dumps(run.cycle_report.to_dict(), indent=2) + "\n")
                _write(out / f"{stem}.stats.json",
                       json.dumps(run_report(run), indent=2, ensure_ascii=False) + "\n")
                click.echo(f"{path}: {len(run.entities)} entities, "
                           f"{len(run.graph.arcs)} arcs")
    except RunLockHeldError as exc:
        _fail(str(exc))
    finally:
        if recorder is not None and settings.record_path:
            recorder.fixture().save(settings.record_path)

    if failures:
        sys.exit(2)


@main.command("eval-pairs")
@common_options
@click.argument("semeval_path", type=click.Path())
def eval_pairs(semeval_path, **options) -> None:
    """Evaluate pairwise orientation over a tagged-sentence benchmark file."""
    try:
        settings = _resolve_settings(**options)
        gateway, recorder = _build_gateway(settings)
        records = parse_semeval(Path(semeval_path).read_text(encoding="utf-8"))
    except (CausalTextError, OSError) as exc:
        _fail(str(exc))

    try:
        report = run_pairwise_eval(records, gateway)
    except (EmptyEvaluationSetError, CausalTextError) as exc:
        _fail(str(exc))
    finally:
        if recorder is not None and settings.record_path:
            recorder.fixture().save(settings.record_path)

    _write(settings.out_dir / "pairwise_report.json",
           json.dumps(report.to_dict(), indent=2) + "\n")
    click.echo(f"grid: {[list(row) for row in report.confusion.grid]}")
    click.echo(render_confusion_table(report.confusion))
    click.echo(f"macro_f1: {float(report.macro_f1):.6f}")
    click.echo(f"micro_accuracy: {float(report.micro_accuracy):.6f}")


@main.command("eval-graph")
@common_options
@click.argument("run_path", type=click.Path())
@click.argument("truth_path", type=click.Path())
def eval_graph(run_path, truth_path, **options) -> None:
    """Compare an extracted graph file against a ground-truth graph file."""
    try:
        settings = _resolve_settings(**options)
        extracted = parse_graph(
            Path(run_path).read_text(encoding="utf-8"), GraphKind.EXTRACTED
        )
        truth = parse_graph(
            Path(truth_path).read_text(encoding="utf-8"), GraphKind.GROUND_TRUTH
        )
    except (GraphFileError, ParseError, CausalTextError, OSError) as exc:
        _fail(str(exc))

    comparison = compare_with_transitive_share(extracted, truth)
    _write(settings.out_dir / "graph_comparison.json",
           json.dumps(comparison.to_dict(), indent=2) + "\n")
    share = comparison.transitive_fp_share
    click.echo(f"precision: {float(comparison.precision):.6f}")
    click.echo(f"recall: {float(comparison.recall):.6f}")
    click.echo(f"f1: {float(comparison.f1):.6f}")
    click.echo(
        "transitive_fp_share: "
        + ("undefined" if share is None else f"{float(share):.6f}")
    )


@main.command()
@common_options
@click.argument("action", type=click.Choice(["stats", "clear"]))
def cache(action, **options) -> None:
    """Inspect or clear the response cache."""
    try:
        settings = _resolve_settings(**options)
    except CausalTextError as exc:
        _fail(str(exc))
    cache_dir = settings.provider.cache_dir
    if action == "stats":
        count, size = cache_stats(cache_dir)
        click.echo(f"entries: {count}")
        click.echo(f"bytes: {size}")
        return
    try:
        removed = clear_cache(cache_dir)
    except RunLockHeldError as exc:
        _fail(str(exc))
    click.echo(f"removed: {removed}")


if __name__ == "__main__":
    main()
