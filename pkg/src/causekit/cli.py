"""Command-line entry points.

Machine output is line-delimited JSON with floats fixed at six decimal
places so golden-file diffs stay byte-stable; a short human summary
accompanies it (stderr when records go to stdout, stdout otherwise).
"""

from __future__ import annotations

import argparse
import json
import random
import sys
from concurrent.futures import ThreadPoolExecutor

from .backend import BackendError, load_backend
from .dataset import (DatasetError, dataset_stats, export_sft_corpus,
                      load_dataset, load_predictions)
from .graph import build_graph
from .metrics import (DEFAULT_THRESHOLDS, ZeroMeanRecall, ZeroReachableRecall,
                      aggregate, reachable_recall, reasoning_loss, rsi,
                      score_graph, threshold_sweep)
from .assignment import match_entities
from .reward import RewardWeights
from .search import (SearchParams, Trajectory, TrajectoryStep,
                     filter_trajectories, run_search, vanilla_baseline)
from .service import serve as serve_service

EMPTY_GRAPH = build_graph([], [])


def _fmt(value) -> str:
    if isinstance(value, bool) or value is None or isinstance(value, (int, str)):
        return json.dumps(value)
    if isinstance(value, float):
        return f"{value:.6f}"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    raise TypeError(f"cannot format {value!r}")


def _record_line(pairs) -> str:
    # Hand-assembled so float formatting stays fixed at 6 decimals.
    return "{" + ", ".join(f"{json.dumps(k)}: {_fmt(v)}" for k, v in pairs) + "}"


class _Output:
    """Routes record lines and the human summary per the --out flag."""

    def __init__(self, out_path: str | None):
        self.out_path = out_path
        self._handle = open(out_path, "w", encoding="utf-8") if out_path else None

    def record(self, line: str) -> None:
        target = self._handle if self._handle else sys.stdout
        target.write(line + "\n")

    def summary(self, text: str) -> None:
        target = sys.stdout if self._handle else sys.stderr
        target.write(text + "\n")

    def close(self) -> None:
        if self._handle:
            self._handle.close()


def _parse_weights(text: str) -> RewardWeights:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(
            "weights must be three comma-separated numbers: recall,precision,format")
    return RewardWeights(*parts)


def _parse_thresholds(text: str) -> tuple[float, ...]:
    grid = tuple(float(p) for p in text.split(","))
    if list(grid) != sorted(grid):
        raise argparse.ArgumentTypeError("thresholds must be sorted ascending")
    return grid


def _map_ordered(jobs: int, fn, items: list):
    if jobs <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _score_one(record, predictions, threshold):
    pred = predictions.get(record.img_id, EMPTY_GRAPH)
    matching = match_entities(list(pred.entities),
                              list(record.graph.entities), threshold)
    score = score_graph(pred, record.graph, matching)
    reachable = reachable_recall(pred, record.graph, matching)
    loss = reasoning_loss(score.recall, reachable) if reachable > 0 else None
    return score, reachable, loss, record.img_id not in predictions


def cmd_evaluate(args) -> int:
    predictions, pred_issues = load_predictions(args.predictions)
    gt_records, gt_issues = load_dataset(args.ground_truth)
    out = _Output(args.out)
    try:
        for issue in pred_issues + gt_issues:
            out.summary(f"[{issue.severity}] {issue.rule}: {issue.message}")
        scorable = sorted((r for r in gt_records if r.graph.edges),
                          key=lambda r: r.img_id)
        skipped = len(gt_records) - len(scorable)
        results = _map_ordered(
            args.jobs,
            lambda r: _score_one(r, predictions, args.threshold),
            scorable)

        scores = []
        reachables = []
        for record, (score, reachable, loss, missing) in zip(scorable, results):
            scores.append(score)
            reachables.append(reachable)
            out.record(_record_line([
                ("img_id", record.img_id),
                ("recall", score.recall),
                ("precision", score.precision),
                ("f1", score.f1),
                ("reachable_recall", reachable),
                ("loss", loss),
                ("matched_edges", score.matched_edges),
                ("pred_edges", score.pred_edges),
                ("gt_edges", score.gt_edges),
                ("missing_prediction", missing),
            ]))
        if not scores:
            out.summary("no scorable images (every record lacks gt edges)")
            return 0

        total = aggregate(scores, args.mode)
        if args.mode == "macro":
            agg_reachable = sum(reachables) / len(reachables)
        else:
            reachable_edges = sum(
                round(r * s.gt_edges) for r, s in zip(reachables, scores))
            agg_reachable = reachable_edges / total.gt_edges
        try:
            agg_loss = reasoning_loss(total.recall, agg_reachable)
        except ZeroReachableRecall:
            agg_loss = None
        out.record(_record_line([
            ("summary", True),
            ("mode", args.mode),
            ("threshold", args.threshold),
            ("images", len(scores)),
            ("skipped_no_gt_edges", skipped),
            ("recall", total.recall),
            ("precision", total.precision),
            ("f1", total.f1),
            ("reachable_recall", agg_reachable),
            ("loss", agg_loss),
        ]))
        out.summary(f"images scored: {len(scores)}  threshold: {args.threshold}"
                    f"  mode: {args.mode}")
        out.summary(f"recall {total.recall:.6f}  precision {total.precision:.6f}"
                    f"  f1 {total.f1:.6f}")
        loss_text = f"{agg_loss:.6f}" if agg_loss is not None else "n/a"
        out.summary(f"reachable recall {agg_reachable:.6f}  loss {loss_text}")
        return 0
    finally:
        out.close()


def cmd_sweep(args) -> int:
    predictions, pred_issues = load_predictions(args.predictions)
    gt_records, gt_issues = load_dataset(args.ground_truth)
    out = _Output(args.out)
    try:
        for issue in pred_issues + gt_issues:
            out.summary(f"[{issue.severity}] {issue.rule}: {issue.message}")
        scorable = sorted((r for r in gt_records if r.graph.edges),
                          key=lambda r: r.img_id)
        reports = _map_ordered(
            args.jobs,
            lambda r: threshold_sweep(
                predictions.get(r.img_id, EMPTY_GRAPH), r.graph,
                args.thresholds),
            scorable)
        for record, report in zip(scorable, reports):
            out.record(_record_line([
                ("img_id", record.img_id),
                ("thresholds", list(report.thresholds)),
                ("recalls", list(report.recalls)),
                ("rsi", report.rsi),
            ]))
        if not reports:
            out.summary("no scorable images (every record lacks gt edges)")
            return 0
        curve = [sum(r.recalls[i] for r in reports) / len(reports)
                 for i in range(len(args.thresholds))]
        try:
            stability = rsi(curve)
        except ZeroMeanRecall:
            stability = 0.0
        out.record(_record_line([
            ("summary", True),
            ("thresholds", list(args.thresholds)),
            ("mean_recalls", curve),
            ("rsi", stability),
        ]))
        out.summary("threshold sweep over " +
                    ", ".join(f"{t:g}" for t in args.thresholds))
        out.summary("mean recalls " + ", ".join(f"{v:.6f}" for v in curve) +
                    f"  rsi {stability:.6f}")
        return 0
    finally:
        out.close()


def _search_one(record, backend, params, threshold):
    image = record.image_path
    try:
        toct = run_search(image, record.graph, backend, params)
        vanilla = vanilla_baseline(image, record.graph, backend, threshold)
    except BackendError as exc:
        return exc
    return toct, vanilla


def _restore_pair(saved) -> tuple[Trajectory, Trajectory]:
    steps = tuple(TrajectoryStep(action=t["action"], prompt=t["prompt"],
                                 response=t["response"])
                  for t in saved.get("turns", []))
    toct = Trajectory(steps=steps, final_graph=EMPTY_GRAPH,
                      value=saved["search_value"],
                      degraded=saved.get("degraded", False),
                      image=saved.get("image"))
    vanilla = Trajectory(steps=(), final_graph=EMPTY_GRAPH,
                         value=saved["vanilla_value"],
                         image=saved.get("image"))
    return toct, vanilla


def cmd_search(args) -> int:
    import os

    records, issues = load_dataset(args.dataset)
    backend = load_backend(args.backend_config)
    params = SearchParams(step_limit=args.step_limit,
                          branching=args.branching,
                          iterations=args.iterations,
                          w=args.uct_w,
                          threshold=args.threshold,
                          seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    out = _Output(None)
    for issue in issues:
        out.summary(f"[{issue.severity}] {issue.rule}: {issue.message}")

    pairs = []
    resumed = []
    todo = []
    for record in sorted((r for r in records if r.graph.edges),
                         key=lambda r: r.img_id):
        marker = os.path.join(args.out, f"img_{record.img_id}.json")
        if os.path.exists(marker):
            with open(marker, encoding="utf-8") as handle:
                resumed.append((record, _restore_pair(json.load(handle))))
            out.summary(f"img {record.img_id}: resumed from marker")
        else:
            todo.append((record, marker))

    outcomes = _map_ordered(
        args.jobs,
        lambda item: _search_one(item[0], backend, params, args.threshold),
        todo)
    for (record, marker), outcome in zip(todo, outcomes):
        if isinstance(outcome, BackendError):
            out.summary(f"img {record.img_id}: backend failure, "
                        f"skipped ({outcome})")
            continue
        toct, vanilla = outcome
        pairs.append((toct, vanilla))
        with open(marker, "w", encoding="utf-8") as handle:
            json.dump({
                "img_id": record.img_id,
                "image": toct.image,
                "search_value": toct.value,
                "vanilla_value": vanilla.value,
                "degraded": toct.degraded,
                "turns": [{"action": s.action, "prompt": s.prompt,
                           "response": s.response} for s in toct.steps],
            }, handle)
        out.record(_record_line([
            ("img_id", record.img_id),
            ("search_value", toct.value),
            ("vanilla_value", vanilla.value),
            ("kept", toct.value > vanilla.value),
            ("degraded", toct.degraded),
        ]))
    pairs.extend(pair for _, pair in resumed)

    kept, stats = filter_trajectories(pairs)
    corpus_path = os.path.join(args.out, "sft_corpus.jsonl")
    written = export_sft_corpus([t for t, _ in kept], corpus_path)
    out.record(_record_line([
        ("summary", True),
        ("total", stats.total),
        ("kept", stats.kept),
        ("zero_pairs", stats.zero_pairs),
        ("mean_search", stats.mean_search),
        ("mean_vanilla", stats.mean_vanilla),
        ("median_search", stats.median_search),
        ("median_vanilla", stats.median_vanilla),
        ("mean_search_nonzero", stats.mean_search_nonzero),
        ("mean_vanilla_nonzero", stats.mean_vanilla_nonzero),
        ("median_search_nonzero", stats.median_search_nonzero),
        ("median_vanilla_nonzero", stats.median_vanilla_nonzero),
        ("sft_records", written),
    ]))
    out.summary(f"trajectory pairs: {stats.total}  kept: {stats.kept}"
                f"  zero pairs: {stats.zero_pairs}")
    out.summary(f"sft corpus: {corpus_path} ({written} records)")
    return 0


def cmd_stats(args) -> int:
    records, issues = load_dataset(args.dataset)
    out = _Output(args.out)
    try:
        for issue in issues:
            out.summary(f"[{issue.severity}] {issue.rule}: {issue.message}")
        stats = dataset_stats(records)
        out.record(_record_line([
            ("images", stats.images),
            ("entities", stats.entities),
            ("categories", stats.categories),
            ("relationships", stats.relationships),
            ("relationships_per_image", stats.relationships_per_image),
        ]))
        for count, images in stats.relationship_histogram.items():
            out.record(_record_line([
                ("histogram", True), ("relationships", count),
                ("images", images)]))
        for name, count in stats.top_categories:
            out.record(_record_line([
                ("category", name), ("count", count)]))
        for name, count in stats.top_predicates:
            out.record(_record_line([
                ("predicate", name), ("count", count)]))
        out.summary(f"{stats.images} images, {stats.entities} entities "
                    f"({stats.categories} categories), "
                    f"{stats.relationships} relationships "
                    f"({stats.relationships_per_image:.2f} per image)")
        return 0
    finally:
        out.close()


def cmd_serve(args) -> int:
    serve_service(args.dataset, host=args.host, port=args.port,
                  weights=args.weights, threshold=args.threshold,
                  batch_cap=args.batch_cap, token=args.token)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="causekit",
        description="Score, search, and serve visual causal graphs.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--out", default=None)

    p_eval = sub.add_parser("evaluate", help="score predictions against ground truth")
    p_eval.add_argument("predictions")
    p_eval.add_argument("ground_truth")
    p_eval.add_argument("--threshold", type=float, default=0.5)
    p_eval.add_argument("--mode", choices=("macro", "micro"), default="macro")
    common(p_eval)
    p_eval.set_defaults(fn=cmd_evaluate)

    p_sweep = sub.add_parser("sweep", help="recall across a threshold grid")
    p_sweep.add_argument("predictions")
    p_sweep.add_argument("ground_truth")
    p_sweep.add_argument("--thresholds", type=_parse_thresholds,
                         default=DEFAULT_THRESHOLDS)
    common(p_sweep)
    p_sweep.set_defaults(fn=cmd_sweep)

    p_search = sub.add_parser("search", help="tree-search reasoning trajectories")
    p_search.add_argument("dataset")
    p_search.add_argument("--backend-config", required=True)
    p_search.add_argument("--iterations", type=int, default=20)
    p_search.add_argument("--branching", type=int, default=10)
    p_search.add_argument("--step-limit", type=int, default=12)
    p_search.add_argument("--uct-w", type=float, default=2.0 ** 0.5)
    p_search.add_argument("--threshold", type=float, default=0.5)
    p_search.add_argument("--seed", type=int, default=0)
    p_search.add_argument("--jobs", type=int, default=1)
    p_search.add_argument("--out", required=True,
                          help="directory for markers and the SFT corpus")
    p_search.set_defaults(fn=cmd_search)

    p_stats = sub.add_parser("stats", help="dataset statistics")
    p_stats.add_argument("dataset")
    common(p_stats)
    p_stats.set_defaults(fn=cmd_stats)

    p_serve = sub.add_parser("serve", help="run the reward-scoring service")
    p_serve.add_argument("dataset")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8080)
    p_serve.add_argument("--threshold", type=float, default=0.5)
    p_serve.add_argument("--weights", type=_parse_weights,
                         default=RewardWeights())
    p_serve.add_argument("--batch-cap", type=int, default=256)
    p_serve.add_argument("--token", default=None)
    p_serve.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    random.seed(getattr(args, "seed", 0))
    try:
        return args.fn(args)
    except (DatasetError, OSError, BackendError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
