import pytest

from causekit import (RewardWeights, causal_reward, prediction_graph,
                      score_batch)
from causekit.graph import BoundingBox, CausalEdge, Entity, build_graph
from causekit.metrics import EmptyGroundTruth
from causekit.reward import RewardBreakdown


def chain_gt():
    entities = [Entity(0, "table", BoundingBox(0, 0, 100, 50)),
                Entity(1, "cup", BoundingBox(120, 10, 140, 30)),
                Entity(2, "plate", BoundingBox(160, 10, 180, 30))]
    edges = [CausalEdge(0, 1), CausalEdge(1, 2)]
    return build_graph(entities, edges)


def pair_text(a, abox, b, bbox):
    fmt = lambda bb: f"[{bb.x1}, {bb.y1}, {bb.x2}, {bb.y2}]"
    return f'{{"{a}": {fmt(abox)}, "{b}": {fmt(bbox)}}}'


def wrap(*records):
    return "<causal pairs>[" + ", ".join(records) + "]</causal pairs>"


TABLE = BoundingBox(0, 0, 100, 50)
CUP = BoundingBox(120, 10, 140, 30)
PLATE = BoundingBox(160, 10, 180, 30)


class TestWeights:
    def test_defaults(self):
        w = RewardWeights()
        assert (w.lambda_r, w.lambda_p, w.lambda_f) == (0.5, 0.4, 0.1)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            RewardWeights(lambda_r=-0.1)

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError):
            RewardWeights(0.0, 0.0, 0.0)


class TestCausalReward:
    def test_perfect_prediction(self):
        text = wrap(pair_text("table", TABLE, "cup", CUP),
                    pair_text("cup", CUP, "plate", PLATE))
        r = causal_reward(text, chain_gt())
        assert r.recall_term == pytest.approx(1.0)
        assert r.precision_term == pytest.approx(1.0)
        assert r.format_term == pytest.approx(1.0)
        assert r.total == pytest.approx(1.0)

    def test_half_recall_full_precision(self):
        # Terms carry the raw rates; only the total is weighted.
        text = wrap(pair_text("table", TABLE, "cup", CUP))
        r = causal_reward(text, chain_gt())
        assert r.recall_term == pytest.approx(0.5)
        assert r.precision_term == pytest.approx(1.0)
        assert r.total == pytest.approx(0.5 * 0.5 + 0.4 * 1.0 + 0.1 * 1.0)

    def test_malformed_zeroes_everything(self):
        r = causal_reward("no tags at all", chain_gt())
        assert r == RewardBreakdown(0.0, 0.0, 0.0, 0.0)

    def test_well_formed_empty_list_keeps_format_credit(self):
        r = causal_reward("<causal pairs>[]</causal pairs>", chain_gt())
        assert r.format_term == 1.0
        assert r.total == pytest.approx(0.1)
        assert r.recall_term == 0.0 and r.precision_term == 0.0

    def test_reversed_direction_earns_nothing_but_format(self):
        text = wrap(pair_text("cup", CUP, "table", TABLE))
        r = causal_reward(text, chain_gt())
        assert r.recall_term == 0.0
        assert r.precision_term == 0.0
        assert r.format_term == 1.0
        assert r.total == pytest.approx(0.1)

    def test_graded_format_partial_credit(self):
        good = pair_text("table", TABLE, "cup", CUP)
        bad = '{"x": [9, 0, 5, 1], "y": [0, 0, 1, 1]}'
        text = wrap(good, bad)
        strict = causal_reward(text, chain_gt())
        assert strict.total == 0.0
        graded = causal_reward(text, chain_gt(), graded_format=True)
        assert graded.format_term == pytest.approx(0.5)
        assert graded.recall_term == pytest.approx(0.5)
        assert graded.total == pytest.approx(0.5 * 0.5 + 0.4 * 1.0 + 0.1 * 0.5)

    def test_custom_weights(self):
        text = wrap(pair_text("table", TABLE, "cup", CUP),
                    pair_text("cup", CUP, "plate", PLATE))
        r = causal_reward(text, chain_gt(), weights=RewardWeights(1.0, 0.0, 0.0))
        assert r.total == pytest.approx(1.0)
        half = causal_reward(wrap(pair_text("table", TABLE, "cup", CUP)),
                             chain_gt(), weights=RewardWeights(1.0, 0.0, 0.0))
        assert half.total == pytest.approx(0.5)

    def test_total_bounded_by_weight_sum(self):
        texts = [wrap(pair_text("table", TABLE, "cup", CUP)),
                 "garbage",
                 wrap(pair_text("plate", PLATE, "cup", CUP)),
                 "<causal pairs>[]</causal pairs>"]
        bound = 0.5 + 0.4 + 0.1
        for text in texts:
            r = causal_reward(text, chain_gt())
            assert 0.0 <= r.total <= bound + 1e-12

    def test_empty_ground_truth_rejected(self):
        gt = build_graph([Entity(0, "table", TABLE)], [])
        with pytest.raises(EmptyGroundTruth):
            causal_reward("<causal pairs>[]</causal pairs>", gt)

    def test_threshold_gates_loose_boxes(self):
        # Shifted cup box overlaps the true cup at GIoU just over 0.33:
        # matched at 0.3, rejected at 0.5.
        loose_cup = BoundingBox(125, 15, 145, 35)
        text = wrap(pair_text("table", TABLE, "cup", loose_cup))
        tight = causal_reward(text, chain_gt(), threshold=0.5)
        loose = causal_reward(text, chain_gt(), threshold=0.3)
        assert tight.recall_term == 0.0
        assert loose.recall_term == pytest.approx(0.5)


class TestPredictionGraph:
    def test_parses_to_graph(self):
        text = wrap(pair_text("table", TABLE, "cup", CUP))
        g = prediction_graph(text)
        assert len(g.entities) == 2 and len(g.edges) == 1

    def test_malformed_yields_empty_graph(self):
        g = prediction_graph("<causal pairs>[{bad}]</causal pairs>")
        assert g.entities == () and g.edges == ()


class TestScoreBatch:
    def test_mapping_lookup(self):
        gt = chain_gt()
        items = [(wrap(pair_text("table", TABLE, "cup", CUP)), 7)]
        scored = score_batch(items, {7: gt})
        assert scored[0].error is None
        assert scored[0].breakdown.total == pytest.approx(0.75)

    def test_unknown_ref_inline_error(self):
        items = [("<causal pairs>[]</causal pairs>", 1),
                 ("<causal pairs>[]</causal pairs>", 99)]
        scored = score_batch(items, {1: chain_gt()})
        assert scored[0].error is None
        assert scored[1].breakdown is None
        assert "99" in scored[1].error

    def test_order_preserved(self):
        gt = chain_gt()
        items = [("<causal pairs>[]</causal pairs>", i) for i in (3, 1, 2)]
        scored = score_batch(items, {1: gt, 2: gt, 3: gt})
        assert [s.index for s in scored] == [0, 1, 2]

    def test_callable_lookup(self):
        gt = chain_gt()
        scored = score_batch([("<causal pairs>[]</causal pairs>", 5)],
                             lambda ref: {5: gt}[ref])
        assert scored[0].error is None

    def test_empty_gt_reported_not_raised(self):
        empty = build_graph([Entity(0, "table", TABLE)], [])
        scored = score_batch([("<causal pairs>[]</causal pairs>", 1)], {1: empty})
        assert scored[0].breakdown is None
        assert scored[0].error
