"""In-process scoring and evaluation bindings for causekit.

For training loops that want reward numbers without the HTTP hop:
initialize once with a ground-truth dataset path, then call
bound_score_batch from any number of host threads. bound_evaluate wraps
the `causekit evaluate` command and returns its summary record unchanged,
so binding consumers and CLI consumers can never drift apart.

Search is deliberately not exposed here; it stays behind the CLI and
service where its concurrency is managed.
"""

from __future__ import annotations

import json
import subprocess
import sys
import threading

from causekit import RewardWeights, score_batch
from causekit.dataset import DatasetError, load_dataset

__all__ = [
    "BindingError",
    "CausalScorer",
    "EvaluationError",
    "NotInitialized",
    "ScoringError",
    "UnknownImageId",
    "bound_evaluate",
    "bound_score_batch",
    "init",
]


class BindingError(Exception):
    """Base class for everything this package raises on purpose."""


class NotInitialized(BindingError):
    pass


class UnknownImageId(BindingError, KeyError):
    """An item referenced an img_id absent from the loaded dataset."""

    def __init__(self, item_index: int, img_id):
        self.item_index = item_index
        self.img_id = img_id
        super().__init__(f"item {item_index}: unknown img_id {img_id!r}")

    def __str__(self) -> str:  # KeyError repr-quotes its payload
        return self.args[0]


class ScoringError(BindingError, ValueError):
    """An item could not be scored (e.g. its ground truth has no edges)."""

    def __init__(self, item_index: int, message: str):
        self.item_index = item_index
        super().__init__(f"item {item_index}: {message}")


class EvaluationError(BindingError, RuntimeError):
    pass


class CausalScorer:
    """Immutable ground-truth snapshot plus a batch scoring method.

    The dataset is loaded once in the constructor; after that every call
    is read-only, so one instance may be shared freely across threads.
    """

    def __init__(self, dataset_path: str):
        try:
            records, issues = load_dataset(dataset_path)
        except DatasetError as exc:
            raise BindingError(str(exc)) from exc
        fatal = [i for i in issues if i.severity == "fatal"]
        if fatal:
            raise BindingError(
                f"{dataset_path}: {len(fatal)} records rejected, first: {fatal[0]}")
        self._graphs = {record.img_id: record.graph for record in records}
        self.dataset_path = dataset_path
        self.records_loaded = len(records)

    def score_batch(self, items, weights=None, threshold: float = 0.5):
        """Score (prediction_text, img_id) items against the snapshot.

        Returns one record per item, in order:
        {"img_id", "recall_term", "precision_term", "format_term", "total"}
        with the exact float values the causekit library produces. Raises
        UnknownImageId or ScoringError (both carry .item_index) instead of
        reporting problems inline; a batch either scores fully or not at all.
        """
        items = list(items)
        for index, (_, img_id) in enumerate(items):
            if img_id not in self._graphs:
                raise UnknownImageId(index, img_id)
        kwargs = {"threshold": threshold}
        if weights is not None:
            if not isinstance(weights, RewardWeights):
                weights = RewardWeights(*weights)
            kwargs["weights"] = weights
        scored = score_batch(items, self._graphs, **kwargs)
        records = []
        for item, (_, img_id) in zip(scored, items):
            if item.breakdown is None:
                raise ScoringError(item.index, item.error)
            b = item.breakdown
            records.append({
                "img_id": img_id,
                "recall_term": b.recall_term,
                "precision_term": b.precision_term,
                "format_term": b.format_term,
                "total": b.total,
            })
        return records


_default_scorer: CausalScorer | None = None
_init_lock = threading.Lock()


def init(dataset_path: str) -> CausalScorer:
    """Load the ground-truth dataset bound_score_batch will score against."""
    global _default_scorer
    scorer = CausalScorer(dataset_path)
    with _init_lock:
        _default_scorer = scorer
    return scorer


def bound_score_batch(items, weights=None, threshold: float = 0.5):
    """Module-level convenience over the scorer installed by init()."""
    scorer = _default_scorer
    if scorer is None:
        raise NotInitialized("call init(dataset_path) before scoring")
    return scorer.score_batch(items, weights=weights, threshold=threshold)


# Runs the real command-line entry point in a subprocess: evaluation is a
# file-granularity batch operation, and this keeps the summary record
# byte-identical to what `causekit evaluate` prints, with no shared state
# to guard against concurrent host threads.
_CLI_SHIM = "import sys; from causekit.cli import main; sys.exit(main(sys.argv[1:]))"


def bound_evaluate(pred_path: str, gt_path: str, threshold: float = 0.5,
                   mode: str = "macro") -> dict:
    """Evaluate a prediction file against a ground-truth file.

    Returns the summary record of `causekit evaluate` (keys: summary, mode,
    threshold, images, skipped_no_gt_edges, recall, precision, f1,
    reachable_recall, loss). Raises EvaluationError with the command's
    diagnostics when the evaluation itself fails.
    """
    if mode not in ("macro", "micro"):
        raise ValueError(f"mode must be macro or micro, not {mode!r}")
    argv = [sys.executable, "-c", _CLI_SHIM, "evaluate",
            str(pred_path), str(gt_path),
            "--threshold", str(float(threshold)), "--mode", mode]
    proc = subprocess.run(argv, capture_output=True, text=True)
    if proc.returncode != 0:
        raise EvaluationError(proc.stderr.strip() or
                              f"evaluate exited {proc.returncode}")
    # Without --out, per-image records and the final summary record share
    # stdout; the summary is the line whose first key is "summary".
    for line in proc.stdout.splitlines():
        if line.startswith('{"summary"'):
            return json.loads(line)
    raise EvaluationError("no summary record in evaluate output")
