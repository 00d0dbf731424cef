"""Shared fixtures and independent oracles for the test suite."""

from __future__ import annotations

import itertools
import os
import re

import pytest

from causekit import BoundingBox, CausalEdge, Entity, build_graph


def make_box(x: float, y: float, w: float = 20.0, h: float = 20.0) -> BoundingBox:
    return BoundingBox(x, y, x + w, y + h)


# Well-separated boxes: matching at any sane threshold is the identity.
TABLE_BOX = BoundingBox(0.0, 0.0, 100.0, 50.0)
CUP_BOX = BoundingBox(120.0, 10.0, 140.0, 30.0)
PLATE_BOX = BoundingBox(160.0, 10.0, 180.0, 30.0)


@pytest.fixture
def three_node_gt():
    """Chain gt: table -> cup -> plate (two edges)."""
    return build_graph(
        [Entity(0, "table", TABLE_BOX), Entity(1, "cup", CUP_BOX),
         Entity(2, "plate", PLATE_BOX)],
        [CausalEdge(0, 1), CausalEdge(1, 2)])


@pytest.fixture
def three_node_half_pred():
    """Prediction recovering only table -> cup, with exact boxes."""
    return build_graph(
        [Entity(0, "table", TABLE_BOX), Entity(1, "cup", CUP_BOX)],
        [CausalEdge(0, 1)])


def appendix_style_record(img_id: int = 0) -> dict:
    """A complete annotation record in the documented schema."""
    return {
        "dataset_id": "COCO",
        "img_id": img_id,
        "entities": [
            {"entity_id": 0, "entity_name": "woman",
             "bbox": [502.6, 105.47, 25.83, 132.38]},
            {"entity_id": 1, "entity_name": "handbag",
             "bbox": [510.0, 180.0, 40.0, 35.0]},
            {"entity_id": 2, "entity_name": "table",
             "bbox": [100.0, 200.0, 220.0, 90.0]},
            {"entity_id": 3, "entity_name": "cup",
             "bbox": [150.0, 160.0, 38.0, 42.0]},
        ],
        "causal_relationships": {
            "carry_on": [[0, 1]],
            "support": [[2, 3]],
        },
    }


def brute_force_assignment(matrix) -> tuple[list[tuple[int, int]], float]:
    """Exhaustive minimum-cost one-to-one assignment.

    Independent of the library solver: tries every permutation and sums
    costs in row order so totals are bit-comparable.
    """
    rows = len(matrix)
    cols = len(matrix[0]) if rows else 0
    if rows == 0 or cols == 0:
        return [], 0.0
    best_pairs: list[tuple[int, int]] = []
    best_total = None
    if rows <= cols:
        row_order = range(rows)
        for combo in itertools.permutations(range(cols), rows):
            total = 0.0
            for r in row_order:
                total += float(matrix[r][combo[r]])
            if best_total is None or total < best_total:
                best_total = total
                best_pairs = [(r, combo[r]) for r in row_order]
    else:
        for combo in itertools.permutations(range(rows), cols):
            total = 0.0
            pairs = sorted((combo[c], c) for c in range(cols))
            for r, c in pairs:
                total += float(matrix[r][c])
            if best_total is None or total < best_total:
                best_total = total
                best_pairs = pairs
    return best_pairs, best_total


def oracle_giou(a: BoundingBox, b: BoundingBox) -> float:
    """Direct transcription of the definition, no shared code paths."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = ix * iy if (ix > 0 and iy > 0) else 0.0
    area_a = (a.x2 - a.x1) * (a.y2 - a.y1)
    area_b = (b.x2 - b.x1) * (b.y2 - b.y1)
    union = area_a + area_b - inter
    hull = ((max(a.x2, b.x2) - min(a.x1, b.x1))
            * (max(a.y2, b.y2) - min(a.y1, b.y1)))
    return inter / union - (hull - union) / hull


def make_region_world(image_dir: str, k: int):
    """Deterministic backend handler over a k-region scene.

    Region j sits at x = 100*j. Its crop origin shifts the one static
    entity-pair reply onto ground-truth pair j exactly, and the
    causality step echoes whatever candidates its prompt embeds, so
    completing a full loop through region j contributes ground-truth
    edge j and nothing else. The single-shot prompt always answers with
    pair 0 only. Every reply is a pure function of the prompt plus the
    sampling index, which makes the whole tree enumerable by hand.

    Returns (handler, gt_graph, image_path).
    """
    from PIL import Image

    width = 100 * (k - 1) + 60
    path = os.path.join(image_dir, f"world_{k}.png")
    Image.new("RGB", (width, 60), color=(30, 30, 30)).save(path)

    entities, edges = [], []
    for i in range(k):
        entities.append(Entity(2 * i, f"src{i}",
                               BoundingBox(100 * i + 1, 1, 100 * i + 11, 11)))
        entities.append(Entity(2 * i + 1, f"dst{i}",
                               BoundingBox(100 * i + 21, 21, 100 * i + 31, 31)))
        edges.append(CausalEdge(2 * i, 2 * i + 1))
    gt = build_graph(entities, edges)

    def handler(request, idx):
        text = request.user_text
        if text.startswith("You are analyzing the causal relationships"):
            explored = {int(m) for m in re.findall(r'"region (\d+)"', text)}
            options = [j for j in range(k) if j not in explored] + ["END"]
            choice = options[idx % len(options)]
            if choice == "END":
                return "END TRACE"
            x = 100 * choice
            return ("<think>next</think>\n"
                    f"<region name>region {choice}</region name>\n"
                    f"<bounding box>[{x}, 0, {x + 60}, 60]</bounding box>")
        if text.startswith("Your task is to identify"):
            return ('<think>look</think>\n<entity pairs>'
                    '[{"src": [1, 1, 11, 11], "dst": [21, 21, 31, 31]}]'
                    '</entity pairs>')
        if text.startswith("Identify all causal relationships"):
            return ('<think>quick</think>\n<causal pairs>'
                    '[{"src": [1.0, 1.0, 11.0, 11.0],'
                    ' "dst": [21.0, 21.0, 31.0, 31.0]}]</causal pairs>')
        embedded = re.search(r"Entity pairs: (.*)", text).group(1)
        return f"<think>orient</think>\n<causal pairs>{embedded}</causal pairs>"

    return handler, gt, path


def region_world_leaf_values(k: int, step_limit: int) -> set[float]:
    """Every terminal value reachable in a make_region_world tree.

    Walks the decision structure abstractly: which region gets picked
    never matters, only how many full three-step loops fit.
    """
    values: set[float] = set()

    def decide(explored: int, completed: int, steps: int) -> None:
        values.add(completed / k)  # END TRACE here, or cut by the limit
        if explored >= k or steps >= step_limit:
            return
        if steps + 1 >= step_limit:
            values.add(completed / k)
            return
        if steps + 2 >= step_limit:
            values.add(completed / k)
            return
        if steps + 3 >= step_limit:
            values.add((completed + 1) / k)
            return
        decide(explored + 1, completed + 1, steps + 3)

    decide(0, 0, 0)
    return values


def assert_visit_conservation(node) -> None:
    """Each node's visit count must equal its own rollouts plus the
    rollouts that passed through to descendants."""
    child_sum = sum(c.visit_count for c in node.children)
    assert node.visit_count == node.own_visits + child_sum
    for child in node.children:
        assert_visit_conservation(child)


def oracle_match_and_count(pred_entities, pred_edges, gt_entities, gt_edges,
                           threshold: float) -> tuple[int, int, int]:
    """Brute-force matcher plus edge counter.

    Enumerates every full assignment of the smaller side, keeps the one
    with the highest total GIoU (equivalently lowest total 1-GIoU),
    gates pairs below the threshold, then counts direction-preserving
    edge hits. Returns (matched, pred_edge_count, gt_edge_count).
    """
    if pred_entities and gt_entities:
        overlap = [[oracle_giou(p.box, g.box) for g in gt_entities]
                   for p in pred_entities]
        cost = [[1.0 - v for v in row] for row in overlap]
        pairs, _ = brute_force_assignment(cost)
        mapping = {pred_entities[r].id: gt_entities[c].id
                   for r, c in pairs if overlap[r][c] >= threshold}
    else:
        mapping = {}
    gt_set = {(e.cause_id, e.effect_id) for e in gt_edges}
    pred_set = {(e.cause_id, e.effect_id) for e in pred_edges}
    matched = sum(1 for c, e in pred_set
                  if c in mapping and e in mapping
                  and (mapping[c], mapping[e]) in gt_set)
    return matched, len(pred_set), len(gt_set)
