"""End-to-end orchestration: text -> entities -> all-pairs queries -> graph.

The pipeline asks one orientation question per unordered entity pair (never
both orders), so the number of orientation queries is exactly C(n, 2) and the
resulting graph can never contain opposite arcs. Queries for distinct pairs
may run concurrently; verdicts are merged in pair order, not completion
order, so a replayed run is deterministic at any parallelism.
"""

from __future__ import annotations

import json
import logging
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from itertools import combinations

from .errors import (
    CausalTextError,
    EntityNotInTextError,
    GraphFileError,
    NoEntitiesFoundError,
    PipelineStageError,
    TooFewEntitiesError,
)
from .gateway import ChatExchange, Gateway
from .graph import (
    Arc,
    CausalGraph,
    CycleReport,
    Entity,
    GraphKind,
    Provenance,
    _parse_entity_record,
    detect_cycles,
    enforce_acyclicity,
    flag_transitive_candidates,
)
from .prompts import (
    EntityList,
    OrientationQuestion,
    ParsedVerdict,
    Verdict,
    entity_offset,
    find_first_offset,
    parse_entity_list,
    parse_verdict,
    render_entity_prompt,
    render_orientation_prompt,
    render_reask_prompt,
)

log = logging.getLogger(__name__)

DEFAULT_ENTITY_CAP = 20

PairKey = tuple[str, str]


@dataclass(frozen=True)
class PipelineConfig:
    """Run-level knobs; provider behaviour lives in the gateway config."""

    entity_cap: int = DEFAULT_ENTITY_CAP
    enforce_acyclic: bool = False
    domain_hint: str = ""

    def __post_init__(self) -> None:
        if self.entity_cap < 2:
            raise ValueError("entity_cap must be >= 2")


def _locate(source_text: str, spans: EntityList) -> dict[str, int | None]:
    return {span: find_first_offset(source_text, span) for span in spans.entities}


def extract_entities(
    source_text: str,
    domain_hint: str,
    gateway: Gateway,
    entity_cap: int = DEFAULT_ENTITY_CAP,
) -> tuple[Entity, ...]:
    """Ask the model for entities and turn its reply into graph nodes.

    Synonym groups collapse into one entity whose canonical label is the
    group member appearing earliest in the text and whose surface forms keep
    every member. Spans that never occur in the text are dropped with a
    warning, the result is sorted by first offset, and at most ``entity_cap``
    entities survive (earliest mentions win).
    """
    prompt = render_entity_prompt(source_text, domain_hint)
    exchange = gateway.cached_complete(prompt)
    listing = parse_entity_list(exchange.reply_text)
    offsets = _locate(source_text, listing)

    grouped: set[str] = set()
    entities: list[Entity] = []
    for cluster in listing.merge_groups:
        grouped |= cluster
        located = sorted(
            (offsets[m], m) for m in cluster if offsets.get(m) is not None
        )
        if not located:
            log.warning("dropping synonym group %s: no member occurs in the text",
                        sorted(cluster))
            continue
        first_offset, canonical = located[0]
        entities.append(
            Entity(
                id=canonical,
                canonical_label=canonical,
                surface_forms=frozenset(cluster),
                first_offset=first_offset,
            )
        )
    for span in listing.entities:
        if span in grouped:
            continue
        offset = offsets.get(span)
        if offset is None:
            log.warning("dropping entity %r: does not occur in the text", span)
            continue
        entities.append(
            Entity(id=span, canonical_label=span, surface_forms=frozenset({span}),
                   first_offset=offset)
        )

    if not entities:
        raise NoEntitiesFoundError("no extracted entity could be located in the text")
    entities.sort(key=lambda e: (e.first_offset, e.canonical_label))
    if len(entities) > entity_cap:
        log.warning(
            "entity cap %d reached; dropping %d later entities",
            entity_cap,
            len(entities) - entity_cap,
        )
        entities = entities[:entity_cap]
    return tuple(entities)


def enumerate_pairs(
    entities: tuple[Entity, ...] | list[Entity], source_text: str
) -> tuple[OrientationQuestion, ...]:
    """All C(n, 2) unordered pairs, each exactly once, in document order.

    The order depends only on (first_offset, canonical_label), so it is
    invariant under permutations of the input sequence.
    """
    if len(entities) < 2:
        raise TooFewEntitiesError("pair enumeration needs at least two entities")
    ordered = sorted(entities, key=lambda e: (e.first_offset, e.canonical_label))
    return tuple(
        OrientationQuestion.from_pair(source_text, a, b)
        for a, b in combinations(ordered, 2)
    )


def _query_with_exchanges(
    question: OrientationQuestion, gateway: Gateway
) -> tuple[ParsedVerdict, tuple[ChatExchange, ...]]:
    prompt = render_orientation_prompt(question)
    first = gateway.cached_complete(prompt)
    parsed = parse_verdict(first.reply_text)
    if parsed.verdict is not Verdict.UNPARSABLE:
        return parsed, (first,)
    retry = gateway.cached_complete(render_reask_prompt(prompt))
    return parse_verdict(retry.reply_text), (first, retry)


def query_orientation(question: OrientationQuestion, gateway: Gateway) -> ParsedVerdict:
    """Ask one pairwise orientation question.

    An unparsable reply triggers exactly one re-ask with a reminder to answer
    inside the tags; a second unparsable reply is returned as a value, not an
    error, so one flaky reply cannot abort a long run.
    """
    parsed, _ = _query_with_exchanges(question, gateway)
    return parsed


def build_graph(
    entities: tuple[Entity, ...] | list[Entity],
    verdicts: dict[PairKey, ParsedVerdict],
    sources: dict[PairKey, str] | None = None,
) -> CausalGraph:
    """Assemble the extracted graph from per-pair verdicts.

    Forward adds a -> b, Backward adds b -> a; NoRelation and Unparsable add
    nothing. ``sources`` maps pair keys to the fingerprint of the exchange
    behind the verdict; without it a synthetic pair reference keeps the
    provenance trail non-empty.
    """
    graph = CausalGraph(GraphKind.EXTRACTED, entities)
    arcs = []
    for (a, b), parsed in sorted(verdicts.items()):
        if parsed.verdict is Verdict.FORWARD:
            cause, effect = a, b
        elif parsed.verdict is Verdict.BACKWARD:
            cause, effect = b, a
        else:
            continue
        reference = (sources or {}).get((a, b)) or f"pair:{a}->{b}"
        arcs.append(
            Arc(cause=cause, effect=effect, provenance=Provenance.LLM_VERDICT,
                source_exchange=reference)
        )
    return CausalGraph(GraphKind.EXTRACTED, entities, arcs)


@dataclass(frozen=True)
class RunStats:
    """Aggregate numbers for one document run.

    Latency statistics cover every orientation exchange (re-asks included);
    ``projected_serial_seconds`` is their sum, the wall time a parallelism-1
    run would need.
    """

    query_count: int
    reask_count: int
    abstention_count: int
    unparsable_count: int
    mean_latency: float
    stdev_latency: float
    projected_serial_seconds: float

    def to_dict(self) -> dict:
        return {
            "query_count": self.query_count,
            "reask_count": self.reask_count,
            "abstention_count": self.abstention_count,
            "unparsable_count": self.unparsable_count,
            "mean_latency": self.mean_latency,
            "stdev_latency": self.stdev_latency,
            "projected_serial_seconds": self.projected_serial_seconds,
        }


@dataclass
class PipelineRun:
    """Everything one document produced: entities, verdicts, graph, analyses."""

    source_text: str
    entities: tuple[Entity, ...]
    verdicts: dict[PairKey, ParsedVerdict]
    graph: CausalGraph
    cycle_report: CycleReport
    transitive_arcs: tuple[Arc, ...]
    removed_arcs: tuple[Arc, ...]
    stats: RunStats


def _stats_from(
    questions: tuple[OrientationQuestion, ...],
    verdicts: dict[PairKey, ParsedVerdict],
    exchange_lists: list[tuple[ChatExchange, ...]],
) -> RunStats:
    latencies = [ex.latency for exchanges in exchange_lists for ex in exchanges]
    finals = [verdicts[q.pair_key].verdict for q in questions]
    return RunStats(
        query_count=len(questions),
        reask_count=sum(1 for exchanges in exchange_lists if len(exchanges) > 1),
        abstention_count=sum(1 for v in finals if v is Verdict.NO_RELATION),
        unparsable_count=sum(1 for v in finals if v is Verdict.UNPARSABLE),
        mean_latency=statistics.fmean(latencies) if latencies else 0.0,
        stdev_latency=statistics.stdev(latencies) if len(latencies) >= 2 else 0.0,
        projected_serial_seconds=sum(latencies),
    )


def run_pipeline(
    source_text: str,
    domain_hint: str,
    config: PipelineConfig,
    gateway: Gateway,
) -> PipelineRun:
    """Run the whole extraction for one document.

    Stages: entity extraction, pair enumeration, orientation queries (with
    bounded parallelism), graph assembly, cycle and transitive analyses, and
    optional acyclicity enforcement. A failing stage raises
    :class:`PipelineStageError` naming the last completed stage and carrying
    all partial results gathered so far.
    """
    partial: dict = {}
    completed: str | None = None

    def fail(exc: CausalTextError) -> PipelineStageError:
        return PipelineStageError(
            f"pipeline aborted after stage {completed!r}: {exc}", completed, partial
        )

    try:
        entities = extract_entities(
            source_text, domain_hint, gateway, entity_cap=config.entity_cap
        )
    except CausalTextError as exc:
        raise fail(exc) from exc
    completed = "extract_entities"
    partial["entities"] = entities

    try:
        questions = enumerate_pairs(entities, source_text)
    except CausalTextError as exc:
        raise fail(exc) from exc
    completed = "enumerate_pairs"
    partial["questions"] = questions

    verdicts: dict[PairKey, ParsedVerdict] = {}
    exchange_lists: list[tuple[ChatExchange, ...]] = []
    try:
        with ThreadPoolExecutor(max_workers=gateway.config.parallelism) as pool:
            futures = [
                pool.submit(_query_with_exchanges, question, gateway)
                for question in questions
            ]
            for question, future in zip(questions, futures):
                parsed, exchanges = future.result()
                verdicts[question.pair_key] = parsed
                exchange_lists.append(exchanges)
    except CausalTextError as exc:
        partial["verdicts"] = verdicts
        raise fail(exc) from exc
    completed = "query_orientation"
    partial["verdicts"] = verdicts

    sources = {
        question.pair_key: exchanges[-1].prompt.fingerprint
        for question, exchanges in zip(questions, exchange_lists)
    }
    graph = build_graph(entities, verdicts, sources)
    completed = "build_graph"
    partial["graph"] = graph

    try:
        cycle_report = detect_cycles(graph)
        transitive = flag_transitive_candidates(graph)
        removed: tuple[Arc, ...] = ()
        if config.enforce_acyclic:
            graph, removed = enforce_acyclicity(graph)
    except CausalTextError as exc:
        raise fail(exc) from exc

    return PipelineRun(
        source_text=source_text,
        entities=entities,
        verdicts=verdicts,
        graph=graph,
        cycle_report=cycle_report,
        transitive_arcs=transitive,
        removed_arcs=removed,
        stats=_stats_from(questions, verdicts, exchange_lists),
    )


def run_report(run: PipelineRun) -> dict:
    """Deterministic JSON-able report for one run.

    Contains nothing that varies with parallelism, cache state or wall-clock
    time, so replayed runs serialize byte-identically.
    """
    return {
        "entities": [
            {
                "id": entity.id,
                "canonical_label": entity.canonical_label,
                "surface_forms": sorted(entity.surface_forms),
                "first_offset": entity.first_offset,
            }
            for entity in run.entities
        ],
        "verdicts": [
            {"a": a, "b": b, "verdict": run.verdicts[(a, b)].verdict.value}
            for a, b in sorted(run.verdicts)
        ],
        "cycles": run.cycle_report.to_dict(),
        "transitive_arcs": [[arc.cause, arc.effect] for arc in run.transitive_arcs],
        "removed_arcs": [[arc.cause, arc.effect] for arc in run.removed_arcs],
        "stats": run.stats.to_dict(),
    }


@dataclass(frozen=True)
class PartiallyDirectedGraph:
    """Output of a causal-discovery algorithm: some arcs lack orientation.

    Undirected edges are stored as unordered pairs (smaller id first) and
    must be disjoint from the directed arcs over unordered pairs.
    """

    entities: tuple[Entity, ...]
    directed_arcs: tuple[PairKey, ...]
    undirected_edges: tuple[PairKey, ...]

    def __post_init__(self) -> None:
        ids = {entity.id for entity in self.entities}
        object.__setattr__(
            self,
            "undirected_edges",
            tuple(tuple(sorted(pair)) for pair in self.undirected_edges),
        )
        seen: set[frozenset[str]] = set()
        for cause, effect in self.directed_arcs:
            if cause == effect:
                raise ValueError("self-loop in directed arcs")
            if not {cause, effect} <= ids:
                raise ValueError(f"unknown endpoint in arc {cause!r} -> {effect!r}")
            seen.add(frozenset((cause, effect)))
        for a, b in self.undirected_edges:
            if a == b:
                raise ValueError("self-loop in undirected edges")
            if not {a, b} <= ids:
                raise ValueError(f"unknown endpoint in edge {a!r} - {b!r}")
            if frozenset((a, b)) in seen:
                raise ValueError(
                    f"pair {a!r}, {b!r} is both directed and undirected"
                )


def parse_pdag(text: str) -> PartiallyDirectedGraph:
    """Parse a structured graph file extended with an ``undirected`` list."""
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphFileError(f"not valid JSON: {exc}") from None
    if not isinstance(payload, dict) or "entities" not in payload:
        raise GraphFileError("partially directed graph file needs 'entities'")
    entities = tuple(_parse_entity_record(r) for r in payload["entities"])
    directed = tuple(
        (str(r["cause"]), str(r["effect"])) for r in payload.get("arcs", [])
    )
    undirected = tuple(
        (str(r["a"]), str(r["b"])) for r in payload.get("undirected", [])
    )
    try:
        return PartiallyDirectedGraph(entities, directed, undirected)
    except ValueError as exc:
        raise GraphFileError(str(exc)) from None


def orient_cpdag(
    pdag: PartiallyDirectedGraph, source_text: str, gateway: Gateway
) -> CausalGraph:
    """Orient the undirected edges of a discovery output against a text.

    Already-directed arcs pass through untouched (provenance Imported) and
    cost zero queries. Each undirected edge is asked once; NoRelation or a
    still-unparsable reply drops the edge with a warning, since the discovery
    algorithm asserted adjacency but the text did not confirm a direction.
    """
    by_id = {entity.id: entity for entity in pdag.entities}
    arcs = [
        Arc(cause=cause, effect=effect, provenance=Provenance.IMPORTED)
        for cause, effect in pdag.directed_arcs
    ]
    for a_id, b_id in sorted(pdag.undirected_edges):
        located = []
        for entity_id in (a_id, b_id):
            entity = by_id[entity_id]
            offset = entity_offset(source_text, entity)
            if offset is None:
                raise EntityNotInTextError(
                    f"no surface form of {entity.canonical_label!r} occurs in the text"
                )
            located.append(replace(entity, first_offset=offset))
        question = OrientationQuestion.from_pair(source_text, located[0], located[1])
        parsed, exchanges = _query_with_exchanges(question, gateway)
        if parsed.verdict is Verdict.FORWARD:
            cause, effect = question.entity_a.id, question.entity_b.id
        elif parsed.verdict is Verdict.BACKWARD:
            cause, effect = question.entity_b.id, question.entity_a.id
        else:
            log.warning(
                "dropping undirected edge %r - %r: text did not confirm a direction",
                a_id,
                b_id,
            )
            continue
        arcs.append(
            Arc(
                cause=cause,
                effect=effect,
                provenance=Provenance.LLM_VERDICT,
                source_exchange=exchanges[-1].prompt.fingerprint,
            )
        )
    return CausalGraph(GraphKind.EXTRACTED, pdag.entities, arcs)
