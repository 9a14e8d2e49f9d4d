"""causaltext: causal-graph extrapolation from text via pairwise LLM queries."""

from .errors import CausalTextError
from .gateway import ChatExchange, Gateway, ProviderConfig, ReplayFixture
from .graph import (
    Arc,
    ArcFlag,
    CausalGraph,
    CycleReport,
    Entity,
    GraphComparison,
    GraphFormat,
    GraphKind,
    Provenance,
    add_arc,
    compare_graphs,
    detect_cycles,
    enforce_acyclicity,
    flag_transitive_candidates,
    parse_graph,
    serialize_graph,
)
from .pipeline import (
    PartiallyDirectedGraph,
    PipelineConfig,
    PipelineRun,
    build_graph,
    enumerate_pairs,
    extract_entities,
    orient_cpdag,
    query_orientation,
    run_pipeline,
)
from .prompts import (
    EntityList,
    OrientationQuestion,
    ParsedVerdict,
    RenderedPrompt,
    Verdict,
    parse_entity_list,
    parse_verdict,
    render_entity_prompt,
    render_orientation_prompt,
)
from .evaluation import (
    ConfusionMatrix,
    Orientation,
    PairwiseReport,
    SemEvalRecord,
    compute_report,
    evaluate_graph_run,
    parse_semeval,
    run_pairwise_eval,
    write_semeval,
)

__version__ = "0.1.0"

__all__ = [
    "Arc",
    "ArcFlag",
    "CausalGraph",
    "CausalTextError",
    "ChatExchange",
    "ConfusionMatrix",
    "CycleReport",
    "Entity",
    "EntityList",
    "Gateway",
    "GraphComparison",
    "GraphFormat",
    "GraphKind",
    "Orientation",
    "OrientationQuestion",
    "PairwiseReport",
    "ParsedVerdict",
    "PartiallyDirectedGraph",
    "PipelineConfig",
    "PipelineRun",
    "Provenance",
    "ProviderConfig",
    "RenderedPrompt",
    "ReplayFixture",
    "SemEvalRecord",
    "Verdict",
    "add_arc",
    "build_graph",
    "compare_graphs",
    "compute_report",
    "detect_cycles",
    "enforce_acyclicity",
    "enumerate_pairs",
    "evaluate_graph_run",
    "extract_entities",
    "flag_transitive_candidates",
    "orient_cpdag",
    "parse_entity_list",
    "parse_graph",
    "parse_semeval",
    "parse_verdict",
    "query_orientation",
    "render_entity_prompt",
    "render_orientation_prompt",
    "run_pairwise_eval",
    "run_pipeline",
    "serialize_graph",
    "write_semeval",
]
