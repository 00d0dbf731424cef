import math

import pytest

from causekit import (SearchParams, ToctSearch, Trajectory, filter_trajectories,
                      run_search, uct_score, vanilla_baseline)
from causekit.backend import CallableBackend, ScriptedBackend, ScriptExhausted
from causekit.graph import BoundingBox, CausalEdge, Entity, build_graph
from causekit.metrics import EmptyGroundTruth
from causekit.search import (SearchNode, UnvisitedNode,
                             assert_backprop_invariant, backpropagate,
                             dump_tree, select, state_value)
from causekit.actions import ReasoningState
from causekit.parsing import NamedBoxPair

from conftest import (assert_visit_conservation, make_region_world,
                      region_world_leaf_values)

pytest.importorskip("PIL")


def world_params(step_limit, iterations, branching=8, **overrides):
    return SearchParams(step_limit=step_limit, branching=branching,
                        iterations=iterations, pad_ratio=0.0,
                        use_region_crop=True, debug_checks=True, **overrides)


class TestUctScore:
    def test_formula(self):
        got = uct_score(0.4, 3, 10, 1.5)
        assert got == pytest.approx(0.4 + 1.5 * math.sqrt(math.log(10) / 3))

    def test_zero_exploration_weight(self):
        assert uct_score(0.7, 5, 9, 0.0) == pytest.approx(0.7)

    def test_unvisited_rejected(self):
        with pytest.raises(UnvisitedNode):
            uct_score(0.5, 0, 10, 1.0)

    def test_bad_parent_rejected(self):
        with pytest.raises(ValueError):
            uct_score(0.5, 1, 0, 1.0)


def leaf(q=0.0, n=0):
    node = SearchNode(state=ReasoningState())
    node.q_value = q
    node.visit_count = n
    return node


def parent_of(children, n=None):
    node = SearchNode(state=ReasoningState())
    node.children = list(children)
    node.expanded = True
    node.visit_count = n if n is not None else sum(c.visit_count for c in children)
    return node


class TestSelect:
    def test_unvisited_first_in_creation_order(self):
        a, b, c = leaf(n=2), leaf(n=0), leaf(n=0)
        root = parent_of([a, b, c], n=2)
        assert select(root, 1.0) == [root, b]

    def test_highest_uct_wins(self):
        a, b = leaf(q=0.2, n=5), leaf(q=0.9, n=5)
        root = parent_of([a, b])
        assert select(root, 0.5) == [root, b]

    def test_exploration_pulls_rarely_visited(self):
        # Equal Q: the sparser child has the bigger bonus.
        a, b = leaf(q=0.5, n=50), leaf(q=0.5, n=2)
        root = parent_of([a, b])
        assert select(root, 1.0)[-1] is b

    def test_stops_at_unexpanded(self):
        child = leaf(n=1)
        root = parent_of([child])
        path = select(root, 1.0)
        assert path == [root, child]

    def test_descends_multiple_levels(self):
        grandchild = leaf(q=0.3, n=1)
        mid = parent_of([grandchild])
        top = parent_of([mid])
        assert select(top, 1.0) == [top, mid, grandchild]


class TestBackpropagate:
    def test_single_rollout_running_mean(self):
        node = leaf()
        backpropagate([node], 0.8)
        backpropagate([node], 0.4)
        assert node.q_value == pytest.approx(0.6)
        assert node.visit_count == 2 and node.own_visits == 2

    def test_child_weighted_ancestors(self):
        child_a, child_b = leaf(), leaf()
        root = parent_of([child_a, child_b], n=0)
        backpropagate([root, child_a], 1.0)
        backpropagate([root, child_b], 0.0)
        backpropagate([root, child_b], 0.5)
        # child_a: Q=1.0 n=1; child_b: Q=0.25 n=2 -> root (1*1 + 0.25*2)/3
        assert child_b.q_value == pytest.approx(0.25)
        assert root.q_value == pytest.approx(0.5)
        assert root.visit_count == 3
        assert_backprop_invariant(root)
        assert_visit_conservation(root)

    def test_invariant_detects_corruption(self):
        child = leaf()
        root = parent_of([child], n=0)
        backpropagate([root, child], 0.7)
        root.q_value = 0.123
        with pytest.raises(AssertionError):
            assert_backprop_invariant(root)


class TestStateValue:
    def _state_and_gt(self):
        src = BoundingBox(0, 0, 10, 10)
        dst = BoundingBox(30, 30, 40, 40)
        pair = NamedBoxPair("a", src, "b", dst, ordered=True)
        state = ReasoningState(discovered_causality=(pair,))
        gt = build_graph([Entity(0, "a", src), Entity(1, "b", dst),
                          Entity(2, "c", BoundingBox(60, 60, 70, 70))],
                         [CausalEdge(0, 1), CausalEdge(1, 2)])
        return state, gt

    def test_recall_metric(self):
        state, gt = self._state_and_gt()
        assert state_value(state, gt) == pytest.approx(0.5)

    def test_reward_metric_adds_format_credit(self):
        state, gt = self._state_and_gt()
        got = state_value(state, gt, metric="reward")
        assert got == pytest.approx(0.5 * 0.5 + 0.4 * 1.0 + 0.1)

    def test_empty_state_scores_zero(self):
        _, gt = self._state_and_gt()
        assert state_value(ReasoningState(), gt) == 0.0


class TestParams:
    def test_defaults(self):
        p = SearchParams()
        assert p.step_limit == 12 and p.branching == 10 and p.iterations == 20
        assert p.w == pytest.approx(math.sqrt(2.0))

    def test_bad_values_rejected(self):
        with pytest.raises(ValueError):
            SearchParams(step_limit=0)
        with pytest.raises(ValueError):
            SearchParams(leaf_metric="loss")


class TestSearchOnScriptedWorld:
    def test_two_region_world_found_exactly(self, tmp_path):
        handler, gt, image = make_region_world(str(tmp_path), k=2)
        search = ToctSearch(CallableBackend(handler),
                            world_params(step_limit=6, iterations=40), image)
        trajectory = search.run(gt)
        assert trajectory.value == pytest.approx(1.0)
        assert not trajectory.degraded
        assert search.iterations_completed == 40
        assert search.root.visit_count == 40
        assert_visit_conservation(search.root)
        assert_backprop_invariant(search.root)
        actions = [s.action for s in trajectory.steps]
        assert actions == ["region_selection", "entity_recognition",
                           "causality_orientation"] * 2
        assert len(trajectory.final_graph.edges) == 2

    def test_step_limit_caps_loops(self, tmp_path):
        handler, gt, image = make_region_world(str(tmp_path), k=3)
        params = world_params(step_limit=7, iterations=80)
        trajectory = run_search(image, gt, CallableBackend(handler), params)
        values = region_world_leaf_values(3, 7)
        assert max(values) == pytest.approx(2 / 3)
        assert trajectory.value == pytest.approx(2 / 3)

    def test_single_region_world_ends_cleanly(self, tmp_path):
        handler, gt, image = make_region_world(str(tmp_path), k=1)
        trajectory = run_search(image, gt, CallableBackend(handler),
                                world_params(step_limit=9, iterations=30))
        assert trajectory.value == pytest.approx(1.0)
        # Greedy extraction runs past the good loop into the END leaf.
        assert trajectory.steps[-1].response == "END TRACE"

    def test_region_children_deduplicated(self, tmp_path):
        handler, gt, image = make_region_world(str(tmp_path), k=2)
        search = ToctSearch(CallableBackend(handler),
                            world_params(step_limit=6, iterations=1,
                                         branching=12), image)
        search.run(gt)
        # 12 samples collapse to three distinct replies: two regions + END.
        assert len(search.root.children) == 3
        ends = [c for c in search.root.children if c.terminal]
        assert len(ends) == 1

    def test_chain_steps_have_single_children(self, tmp_path):
        handler, gt, image = make_region_world(str(tmp_path), k=2)
        search = ToctSearch(CallableBackend(handler),
                            world_params(step_limit=6, iterations=40), image)
        search.run(gt)
        region_children = [c for c in search.root.children if not c.terminal]
        for node in region_children:
            assert len(node.children) == 1          # entity step
            assert len(node.children[0].children) == 1  # causality step

    def test_empty_gt_rejected(self, tmp_path):
        handler, _, image = make_region_world(str(tmp_path), k=2)
        empty = build_graph([Entity(0, "x", BoundingBox(0, 0, 1, 1))], [])
        with pytest.raises(EmptyGroundTruth):
            run_search(image, empty, CallableBackend(handler),
                       world_params(step_limit=6, iterations=5))


class TestDegradedRuns:
    def test_all_malformed_replies_terminate_root(self, three_node_gt):
        backend = CallableBackend(lambda req, i: "not parseable at all")
        search = ToctSearch(backend, SearchParams(step_limit=6, branching=4,
                                                  iterations=5))
        trajectory = search.run(three_node_gt)
        assert search.root.terminal
        assert trajectory.steps == ()
        assert trajectory.value == 0.0
        assert not trajectory.degraded

    def test_backend_failure_mid_expand_degrades(self, three_node_gt):
        region_reply = ("<think>r</think>\n<region name>spot</region name>\n"
                        "<bounding box>[0, 0, 50, 50]</bounding box>")
        backend = ScriptedBackend([(None, region_reply)])  # then exhausted
        search = ToctSearch(backend, SearchParams(step_limit=6, branching=3,
                                                  iterations=10))
        trajectory = search.run(three_node_gt)
        assert trajectory.degraded
        assert search.iterations_completed < 10
        # The child parsed before the failure is still on the tree.
        assert len(search.root.children) == 1

    def test_backend_failure_mid_simulate_keeps_value(self, tmp_path):
        handler, gt, image = make_region_world(str(tmp_path), k=1)
        calls = {"n": 0}

        def flaky(request, idx):
            calls["n"] += 1
            if calls["n"] > 8:
                raise ScriptExhausted("budget spent")
            return handler(request, idx)

        search = ToctSearch(CallableBackend(flaky),
                            world_params(step_limit=9, iterations=20), image)
        trajectory = search.run(gt)
        assert trajectory.degraded
        assert 0.0 <= trajectory.value <= 1.0


class TestVanillaBaseline:
    def test_single_call_recall(self, tmp_path):
        handler, gt, image = make_region_world(str(tmp_path), k=2)
        trajectory = vanilla_baseline(image, gt, CallableBackend(handler))
        assert trajectory.value == pytest.approx(0.5)  # pair 0 of 2
        assert len(trajectory.steps) == 1
        assert trajectory.steps[0].action == "e2e"

    def test_malformed_reply_scores_zero(self, three_node_gt):
        backend = CallableBackend(lambda req, i: "nonsense")
        trajectory = vanilla_baseline(None, three_node_gt, backend)
        assert trajectory.value == 0.0
        assert trajectory.final_graph.entities == ()

    def test_empty_gt_rejected(self, three_node_gt):
        empty = build_graph([Entity(0, "x", BoundingBox(0, 0, 1, 1))], [])
        backend = CallableBackend(lambda req, i: "nonsense")
        with pytest.raises(EmptyGroundTruth):
            vanilla_baseline(None, empty, backend)


def stub_trajectory(value):
    return Trajectory(steps=(), final_graph=build_graph([], []), value=value)


class TestFilterTrajectories:
    COHORT = [(0.0, 0.0), (0.5, 0.2), (0.3, 0.3), (0.4, 0.5), (0.0, 0.0)]

    def _pairs(self):
        return [(stub_trajectory(s), stub_trajectory(v))
                for s, v in self.COHORT]

    def test_strict_improvement_kept(self):
        kept, stats = filter_trajectories(self._pairs())
        assert len(kept) == 1
        assert kept[0][0].value == pytest.approx(0.5)
        assert stats.total == 5 and stats.kept == 1

    def test_tie_dropped(self):
        kept, _ = filter_trajectories([(stub_trajectory(0.3),
                                        stub_trajectory(0.3))])
        assert kept == []

    def test_zero_pair_accounting(self):
        _, stats = filter_trajectories(self._pairs())
        assert stats.zero_pairs == 2
        assert stats.mean_search == pytest.approx(0.24)
        assert stats.mean_vanilla == pytest.approx(0.2)
        assert stats.median_search == pytest.approx(0.3)
        assert stats.median_vanilla == pytest.approx(0.2)
        assert stats.mean_search_nonzero == pytest.approx(0.4)
        assert stats.mean_vanilla_nonzero == pytest.approx(1 / 3)
        assert stats.median_search_nonzero == pytest.approx(0.4)
        assert stats.median_vanilla_nonzero == pytest.approx(0.3)

    def test_empty_cohort(self):
        kept, stats = filter_trajectories([])
        assert kept == [] and stats.total == 0
        assert stats.mean_search is None and stats.median_vanilla is None


class TestDumpTree:
    def test_snapshot_shape(self, tmp_path):
        handler, gt, image = make_region_world(str(tmp_path), k=2)
        search = ToctSearch(CallableBackend(handler),
                            world_params(step_limit=6, iterations=10), image)
        search.run(gt)
        snapshot = dump_tree(search.root)
        assert snapshot["action"] is None
        assert snapshot["n"] == 10
        assert len(snapshot["children"]) == 3
        assert all(set(c) == {"action", "q", "n", "terminal", "steps",
                              "children"} for c in snapshot["children"])
