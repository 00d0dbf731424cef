"""Rollout reward: weighted recall + precision + format compliance.

Total by design, so a reinforcement-learning loop can feed it arbitrary
model text: output that fails the grammar earns zero on the task terms
instead of raising.
"""

from __future__ import annotations

from dataclasses import dataclass

from .assignment import match_entities
from .graph import CausalGraph, GraphError, build_graph
from .metrics import EmptyGroundTruth, MetricError, score_graph
from .parsing import (CAUSAL_TAG, ParseError, _decode_list, _validate_record,
                      entities_from_pairs, extract_block, format_compliance,
                      parse_causal_pairs)

DEFAULT_THRESHOLD = 0.5


class UnknownGroundTruthRef(KeyError):
    pass


@dataclass(frozen=True)
class RewardWeights:
    lambda_r: float = 0.5
    lambda_p: float = 0.4
    lambda_f: float = 0.1

    def __post_init__(self):
        for name in ("lambda_r", "lambda_p", "lambda_f"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lambda_r == self.lambda_p == self.lambda_f == 0:
            raise ValueError("at least one weight must be positive")


@dataclass(frozen=True)
class RewardBreakdown:
    recall_term: float
    precision_term: float
    format_term: float
    total: float


@dataclass(frozen=True)
class ScoredItem:
    """One slot of a batch result; exactly one of breakdown/error is set."""

    index: int
    breakdown: RewardBreakdown | None
    error: str | None = None


def _lenient_pairs(text: str):
    # Graded mode keeps whatever records individually validate.
    records = _decode_list(extract_block(text, CAUSAL_TAG))
    pairs = []
    for record in records:
        try:
            pairs.append(_validate_record(record, ordered=True))
        except ParseError:
            continue
    return pairs


def prediction_graph(text: str, graded: bool = False) -> CausalGraph:
    """Build the predicted graph a piece of model text describes.

    Unparseable text yields the empty graph rather than an error.
    """
    try:
        pairs = _lenient_pairs(text) if graded else parse_causal_pairs(text)
    except ParseError:
        pairs = []
    entities, edges = entities_from_pairs(pairs)
    try:
        return build_graph(entities, edges)
    except GraphError:
        # entities_from_pairs already dedups and drops self-loops, so
        # this is unreachable; the empty graph is the safe fallback.
        return build_graph([], [])


def causal_reward(prediction_text: str, gt: CausalGraph,
                  weights: RewardWeights = RewardWeights(),
                  threshold: float = DEFAULT_THRESHOLD,
                  graded_format: bool = False) -> RewardBreakdown:
    """Score one rollout against ground truth.

    Format gates the task terms: when the text fails the grammar there
    is no graph to score, so recall and precision are zero.
    """
    if not gt.edges:
        raise EmptyGroundTruth("ground-truth graph has no edges")

    fmt = format_compliance(prediction_text, "e2e", graded=graded_format)
    if fmt == 0.0:
        recall = precision = 0.0
    else:
        pred = prediction_graph(prediction_text, graded=graded_format)
        matching = match_entities(list(pred.entities), list(gt.entities),
                                  threshold)
        score = score_graph(pred, gt, matching)
        recall, precision = score.recall, score.precision

    total = (weights.lambda_r * recall + weights.lambda_p * precision
             + weights.lambda_f * fmt)
    return RewardBreakdown(recall_term=recall, precision_term=precision,
                           format_term=fmt, total=total)


def score_batch(items, gt_lookup,
                weights: RewardWeights = RewardWeights(),
                threshold: float = DEFAULT_THRESHOLD,
                graded_format: bool = False) -> list[ScoredItem]:
    """Score (prediction_text, gt_ref) items independently, in order.

    gt_lookup maps a reference to a CausalGraph. A failed item carries
    its error inline; it never poisons its neighbors.
    """
    results = []
    for index, (text, ref) in enumerate(items):
        try:
            gt = gt_lookup(ref) if callable(gt_lookup) else gt_lookup[ref]
        except (KeyError, UnknownGroundTruthRef):
            results.append(ScoredItem(
                index=index, breakdown=None,
                error=f"unknown ground-truth reference {ref!r}"))
            continue
        try:
            breakdown = causal_reward(text, gt, weights, threshold,
                                      graded_format)
        except MetricError as exc:
            results.append(ScoredItem(index=index, breakdown=None,
                                      error=str(exc)))
            continue
        results.append(ScoredItem(index=index, breakdown=breakdown))
    return results
