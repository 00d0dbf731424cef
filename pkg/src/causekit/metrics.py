"""Structural evaluation of predicted causal graphs.

Edges are compared purely structurally: an edge counts as recovered
when both of its endpoints survived entity matching and the matched
ground-truth entities carry an edge in the same direction. Predicate
labels never participate.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass

from .assignment import EntityMatching, match_entities
from .graph import CausalGraph

# Recall is measured at these GIoU thresholds when sweeping.
DEFAULT_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)


class MetricError(ValueError):
    pass


class EmptyGroundTruth(MetricError):
    pass


class ZeroReachableRecall(MetricError):
    pass


class ZeroMeanRecall(MetricError):
    pass


class EmptyBatch(MetricError):
    pass


@dataclass(frozen=True)
class GraphScore:
    recall: float
    precision: float
    f1: float
    matched_edges: int
    pred_edges: int
    gt_edges: int


@dataclass(frozen=True)
class SweepReport:
    thresholds: tuple[float, ...]
    recalls: tuple[float, ...]
    rsi: float


@dataclass(frozen=True)
class ReasoningLossReport:
    recall: float
    reachable_recall: float
    loss: float


def _f1(recall: float, precision: float) -> float:
    if recall + precision == 0:
        return 0.0
    return 2 * recall * precision / (recall + precision)


def score_graph(pred: CausalGraph, gt: CausalGraph,
                matching: EntityMatching) -> GraphScore:
    """Count directed-edge agreement under an entity matching.

    A predicted edge is matched iff both endpoints were assigned to
    ground-truth entities and those entities share a gt edge with the
    same causal direction. An empty prediction scores precision 0.
    """
    gt_edges = gt.edge_set()
    if not gt_edges:
        raise EmptyGroundTruth("ground-truth graph has no edges")
    # Sets here also deduplicate any repeated predicted edge.
    pred_edges = pred.edge_set()
    mapping = matching.pred_to_gt()

    matched = 0
    for cause, effect in pred_edges:
        if cause in mapping and effect in mapping:
            if (mapping[cause], mapping[effect]) in gt_edges:
                matched += 1

    recall = matched / len(gt_edges)
    precision = matched / len(pred_edges) if pred_edges else 0.0
    return GraphScore(
        recall=recall,
        precision=precision,
        f1=_f1(recall, precision),
        matched_edges=matched,
        pred_edges=len(pred_edges),
        gt_edges=len(gt_edges),
    )


def reachable_recall(pred: CausalGraph, gt: CausalGraph,
                     matching: EntityMatching) -> float:
    """Upper bound on recall given which gt entities were detected."""
    gt_edges = gt.edge_set()
    if not gt_edges:
        raise EmptyGroundTruth("ground-truth graph has no edges")
    covered = matching.matched_gt_ids()
    within = sum(1 for c, e in gt_edges if c in covered and e in covered)
    return within / len(gt_edges)


def reasoning_loss(recall: float, reachable: float) -> float:
    """Relative gap between achievable and achieved recall.

    recall above the bound (possible only through rounding of reported
    numbers) clamps the loss to 0 rather than going negative.
    """
    if reachable <= 0:
        raise ZeroReachableRecall("reachable recall must be positive")
    return min(1.0, max(0.0, (reachable - recall) / reachable))


def reasoning_report(pred: CausalGraph, gt: CausalGraph,
                     matching: EntityMatching) -> ReasoningLossReport:
    score = score_graph(pred, gt, matching)
    bound = reachable_recall(pred, gt, matching)
    loss = reasoning_loss(score.recall, bound) if bound > 0 else 0.0
    return ReasoningLossReport(recall=score.recall, reachable_recall=bound,
                               loss=loss)


def rsi(recalls) -> float:
    """Stability of a recall curve: max(0, 1 - std/mean), population std."""
    values = [float(v) for v in recalls]
    if not values:
        raise ZeroMeanRecall("recall curve is empty")
    mean = statistics.fmean(values)
    if mean <= 0:
        raise ZeroMeanRecall("recall curve has zero mean")
    spread = statistics.pstdev(values)
    return max(0.0, min(1.0, 1.0 - spread / mean))


def threshold_sweep(pred: CausalGraph, gt: CausalGraph,
                    thresholds=DEFAULT_THRESHOLDS) -> SweepReport:
    """Recall at each GIoU threshold, with matching recomputed per point."""
    grid = tuple(float(t) for t in thresholds)
    if list(grid) != sorted(grid):
        raise ValueError("thresholds must be sorted ascending")
    recalls = []
    for t in grid:
        matching = match_entities(list(pred.entities), list(gt.entities), t)
        recalls.append(score_graph(pred, gt, matching).recall)
    try:
        stability = rsi(recalls)
    except ZeroMeanRecall:
        # An all-zero curve is perfectly unstable for our purposes.
        stability = 0.0
    return SweepReport(thresholds=grid, recalls=tuple(recalls), rsi=stability)


def aggregate(per_image, mode: str = "macro") -> GraphScore:
    """Fold per-image scores into one. macro averages the ratios,
    micro recomputes them from summed edge counts."""
    scores = list(per_image)
    if not scores:
        raise EmptyBatch("no scores to aggregate")
    if mode not in ("macro", "micro"):
        raise ValueError(f"mode must be 'macro' or 'micro', got {mode!r}")

    matched = sum(s.matched_edges for s in scores)
    pred_n = sum(s.pred_edges for s in scores)
    gt_n = sum(s.gt_edges for s in scores)
    if mode == "macro":
        recall = statistics.fmean(s.recall for s in scores)
        precision = statistics.fmean(s.precision for s in scores)
        f1 = statistics.fmean(s.f1 for s in scores)
    else:
        recall = matched / gt_n if gt_n else 0.0
        precision = matched / pred_n if pred_n else 0.0
        f1 = _f1(recall, precision)
    return GraphScore(recall=recall, precision=precision, f1=f1,
                      matched_edges=matched, pred_edges=pred_n, gt_edges=gt_n)
