"""Toolkit for visual causal discovery: causal-graph scoring with
GIoU-matched entities, tagged-output parsing, rollout rewards, and
tree search over the region/entity/causality reasoning loop."""

from .actions import Action, ReasoningState, render_e2e_prompt, render_prompt
from .assignment import EntityMatching, hungarian, match_entities
from .backend import (BackendConfig, BackendError, CallableBackend,
                      ChatRequest, ChatResponse, HttpChatBackend,
                      ScriptedBackend, load_backend)
from .dataset import (DatasetRecord, ValidationIssue, dataset_stats,
                      export_sft_corpus, load_dataset, load_predictions,
                      save_dataset)
from .geometry import crop_window, giou, iou, offset_box, xywh_to_corners
from .graph import (BoundingBox, CausalEdge, CausalGraph, Entity, GraphError,
                    build_graph, removal_effects)
from .metrics import (DEFAULT_THRESHOLDS, GraphScore, ReasoningLossReport,
                      SweepReport, aggregate, reachable_recall,
                      reasoning_loss, rsi, score_graph, threshold_sweep)
from .parsing import (NamedBoxPair, ParseError, RegionChoice,
                      entities_from_pairs, format_compliance,
                      parse_causal_pairs, parse_entity_pairs,
                      parse_region_choice, serialize_pairs)
from .reward import (RewardBreakdown, RewardWeights, causal_reward,
                     prediction_graph, score_batch)
from .search import (SearchNode, SearchParams, ToctSearch, Trajectory,
                     TrajectoryStep, backpropagate, filter_trajectories,
                     run_search, select, uct_score, vanilla_baseline)
from .service import RewardService, create_app

__version__ = "0.1.0"

__all__ = [
    "Action", "BackendConfig", "BackendError", "BoundingBox",
    "CallableBackend", "CausalEdge", "CausalGraph", "ChatRequest",
    "ChatResponse", "DEFAULT_THRESHOLDS", "DatasetRecord", "Entity",
    "EntityMatching", "GraphError", "GraphScore", "HttpChatBackend",
    "NamedBoxPair", "ParseError", "ReasoningLossReport", "ReasoningState",
    "RegionChoice", "RewardBreakdown", "RewardService", "RewardWeights",
    "ScriptedBackend", "SearchNode", "SearchParams", "SweepReport",
    "ToctSearch", "Trajectory", "TrajectoryStep", "ValidationIssue",
    "aggregate", "backpropagate", "build_graph", "causal_reward",
    "create_app", "crop_window", "dataset_stats", "entities_from_pairs",
    "export_sft_corpus", "filter_trajectories", "format_compliance", "giou",
    "hungarian", "iou", "load_backend", "load_dataset", "load_predictions",
    "match_entities", "offset_box", "parse_causal_pairs",
    "parse_entity_pairs", "parse_region_choice", "prediction_graph",
    "reachable_recall", "reasoning_loss", "removal_effects",
    "render_e2e_prompt", "render_prompt", "rsi", "run_search",
    "save_dataset", "score_batch", "score_graph", "select",
    "serialize_pairs", "threshold_sweep", "uct_score", "vanilla_baseline",
    "xywh_to_corners",
]
