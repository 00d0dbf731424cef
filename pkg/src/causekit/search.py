"""Monte Carlo tree search over the fixed reasoning loop.

Each node holds the reasoning state after one model reply. Iterations
run select -> expand -> simulate -> backpropagate; the final trajectory
greedily follows the highest-value children. Node values live in [0,1]
because leaves are scored by graph recall against ground truth.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field, replace

from .actions import (Action, ReasoningState, render_e2e_prompt,
                      render_prompt)
from .assignment import match_entities
from .backend import BackendError, ChatRequest, cropped_image_ref
from .geometry import offset_box
from .graph import CausalGraph, build_graph
from .metrics import EmptyGroundTruth, score_graph
from .parsing import (NamedBoxPair, ParseError, entities_from_pairs,
                      parse_causal_pairs, parse_entity_pairs,
                      parse_region_choice)
from .reward import RewardWeights


class UnvisitedNode(ValueError):
    pass


@dataclass
class SearchParams:
    step_limit: int = 12
    branching: int = 10
    iterations: int = 20
    w: float = math.sqrt(2.0)
    threshold: float = 0.5
    leaf_metric: str = "recall"  # or "reward"
    weights: RewardWeights = field(default_factory=RewardWeights)
    expansion_temperature: float = 0.8
    pad_ratio: float = 0.1
    use_region_crop: bool = True
    seed: int | None = None
    debug_checks: bool = False

    def __post_init__(self):
        if min(self.step_limit, self.branching, self.iterations) < 1:
            raise ValueError("step_limit, branching, iterations must be >= 1")
        if self.leaf_metric not in ("recall", "reward"):
            raise ValueError(f"unknown leaf metric {self.leaf_metric!r}")


@dataclass(eq=False)
class SearchNode:
    state: ReasoningState
    incoming_result: str = ""   # model text that produced this state
    prompt: str = ""            # prompt that elicited incoming_result
    action: Action | None = None
    parsed: object = None
    q_value: float = 0.0
    visit_count: int = 0
    children: list["SearchNode"] = field(default_factory=list)
    terminal: bool = False
    expanded: bool = False
    # Own-rollout accumulator; q_value equals its mean until the node
    # gains visited children, after which the child-weighted formula wins.
    value_sum: float = 0.0
    own_visits: int = 0


@dataclass(frozen=True)
class TrajectoryStep:
    action: str
    prompt: str
    response: str
    parsed: object = None


@dataclass(frozen=True)
class Trajectory:
    steps: tuple[TrajectoryStep, ...]
    final_graph: CausalGraph
    value: float
    degraded: bool = False
    image: str | None = None


def uct_score(node_q: float, node_visits: int, parent_visits: int,
              w: float) -> float:
    """Exploitation plus exploration bonus for a visited node."""
    if node_visits < 1:
        raise UnvisitedNode("UCT is undefined at zero visits; "
                            "select unvisited children directly")
    if parent_visits < 1:
        raise ValueError("parent_visits must be >= 1")
    return node_q + w * math.sqrt(math.log(parent_visits) / node_visits)


def select(root: SearchNode, w: float) -> list[SearchNode]:
    """Walk from the root to the next node worth working on.

    Unvisited children come first (in creation order); otherwise the
    highest-UCT child wins. Stops at any unexpanded or terminal node.
    """
    path = [root]
    node = root
    while node.expanded and not node.terminal and node.children:
        unvisited = [c for c in node.children if c.visit_count == 0]
        if unvisited:
            node = unvisited[0]
        else:
            # max() keeps the first maximum, i.e. the earliest child.
            node = max(node.children,
                       key=lambda c: uct_score(c.q_value, c.visit_count,
                                               node.visit_count, w))
        path.append(node)
    return path


def backpropagate(path: list[SearchNode], leaf_value: float) -> None:
    """Record one rollout along `path` ending at the evaluated node."""
    tip = path[-1]
    tip.own_visits += 1
    tip.value_sum += leaf_value
    tip.visit_count += 1
    visited = [c for c in tip.children if c.visit_count > 0]
    if visited:
        tip.q_value = _child_weighted_q(visited)
    else:
        tip.q_value = tip.value_sum / tip.own_visits
    for node in reversed(path[:-1]):
        node.visit_count += 1
        node.q_value = _child_weighted_q(
            [c for c in node.children if c.visit_count > 0])


def _child_weighted_q(visited_children) -> float:
    total = sum(c.visit_count for c in visited_children)
    return sum(c.q_value * c.visit_count for c in visited_children) / total


def assert_backprop_invariant(root: SearchNode, tol: float = 1e-9) -> None:
    """Tree-walk check: every node with visited children carries exactly
    the visit-weighted mean of their values."""
    stack = [root]
    while stack:
        node = stack.pop()
        visited = [c for c in node.children if c.visit_count > 0]
        if visited:
            expected = _child_weighted_q(visited)
            if abs(node.q_value - expected) > tol:
                raise AssertionError(
                    f"node Q {node.q_value!r} != child-weighted {expected!r}")
        stack.extend(node.children)


def graph_from_state(state: ReasoningState) -> CausalGraph:
    entities, edges = entities_from_pairs(state.discovered_causality)
    return build_graph(entities, edges)


def state_value(state: ReasoningState, gt: CausalGraph,
                threshold: float = 0.5, metric: str = "recall",
                weights: RewardWeights = RewardWeights()) -> float:
    """Score a reasoning state's accumulated pairs against ground truth."""
    pred = graph_from_state(state)
    matching = match_entities(list(pred.entities), list(gt.entities),
                              threshold)
    score = score_graph(pred, gt, matching)
    if metric == "recall":
        return score.recall
    # The structured state is format-compliant by construction.
    return (weights.lambda_r * score.recall
            + weights.lambda_p * score.precision + weights.lambda_f)


class ToctSearch:
    """One search instance per image; not safe to share across threads."""

    def __init__(self, backend, params: SearchParams | None = None,
                 image: str | None = None):
        self.backend = backend
        self.params = params or SearchParams()
        self.image = image
        self.root = SearchNode(state=ReasoningState())
        self.degraded = False
        self.iterations_completed = 0

    # -- prompt plumbing ---------------------------------------------------

    def _request(self, state: ReasoningState, action: Action,
                 temperature: float) -> tuple[ChatRequest, tuple[float, float]]:
        _, user_text = render_prompt(action, state)
        image_ref = self.image
        offset = (0.0, 0.0)
        if (action is Action.ENTITY_RECOGNITION and self.image
                and self.params.use_region_crop and state.explored_regions):
            _, box = state.explored_regions[-1]
            image_ref, ox, oy = cropped_image_ref(self.image, box,
                                                  self.params.pad_ratio)
            offset = (ox, oy)
        request = ChatRequest(user_text=user_text, image_ref=image_ref,
                              temperature=temperature,
                              seed=self.params.seed)
        return request, offset

    @staticmethod
    def _shift_pair(pair: NamedBoxPair, dx: float, dy: float) -> NamedBoxPair:
        return replace(pair,
                       first_box=offset_box(pair.first_box, dx, dy),
                       second_box=offset_box(pair.second_box, dx, dy))

    def _apply(self, state: ReasoningState, action: Action, text: str,
               offset: tuple[float, float]) -> tuple[ReasoningState, bool, object]:
        """Parse one reply and fold it into the state.

        Returns (next_state, terminal, parsed). Raises ParseError on
        malformed text; the caller decides what a dud completion costs.
        """
        if action is Action.REGION_SELECTION:
            choice = parse_region_choice(text)
            if choice.end_trace:
                return state.advanced(action), True, choice
            return state.with_region(choice.name, choice.box), False, choice
        if action is Action.ENTITY_RECOGNITION:
            pairs = parse_entity_pairs(text)
            dx, dy = offset
            if dx or dy:
                pairs = [self._shift_pair(p, dx, dy) for p in pairs]
            return state.with_candidates(pairs), False, tuple(pairs)
        pairs = parse_causal_pairs(text)
        return state.with_causality(pairs), False, tuple(pairs)

    @staticmethod
    def _parsed_key(action: Action, parsed) -> tuple:
        if action is Action.REGION_SELECTION:
            if parsed.end_trace:
                return ("end",)
            box = parsed.box
            return ("region", parsed.name, box.x1, box.y1, box.x2, box.y2)
        return (action.value, parsed)

    # -- the four MCTS phases ----------------------------------------------

    def expand(self, node: SearchNode) -> list[SearchNode]:
        """Sample completions for the successor action; distinct parsed
        results become children. Raises on backend failure with any
        children created so far already attached."""
        if node.terminal:
            raise ValueError("cannot expand a terminal node")
        if node.state.step_index >= self.params.step_limit:
            node.terminal = True
            node.expanded = True
            return []

        action = node.state.next_action()
        created: list[SearchNode] = []
        seen: set[tuple] = set()
        malformed = 0
        try:
            request, offset = self._request(
                node.state, action, self.params.expansion_temperature)
            for _ in range(self.params.branching):
                response = self.backend.complete(request)
                try:
                    child_state, terminal, parsed = self._apply(
                        node.state, action, response.text, offset)
                except ParseError:
                    malformed += 1
                    continue
                key = self._parsed_key(action, parsed)
                if key in seen:
                    continue
                seen.add(key)
                child = SearchNode(
                    state=child_state,
                    incoming_result=response.text,
                    prompt=request.user_text,
                    action=action,
                    parsed=parsed,
                    terminal=(terminal or
                              child_state.step_index >= self.params.step_limit),
                )
                node.children.append(child)
                created.append(child)
        except BackendError:
            node.expanded = bool(created)
            raise
        node.expanded = True
        if not created and malformed:
            # Every completion flunked the grammar: nothing to grow here.
            node.terminal = True
        return created

    def simulate(self, node: SearchNode, gt: CausalGraph) -> float:
        """Greedy rollout from the node to a leaf; returns the leaf value.

        Backend trouble degrades the search but still yields the value
        of the deepest state reached.
        """
        state = node.state
        if not node.terminal:
            while state.step_index < self.params.step_limit:
                action = state.next_action()
                try:
                    request, offset = self._request(state, action, 0.0)
                    response = self.backend.complete(request)
                except BackendError:
                    self.degraded = True
                    break
                try:
                    state, terminal, _ = self._apply(
                        state, action, response.text, offset)
                except ParseError:
                    break
                if terminal:
                    break
        return state_value(state, gt, self.params.threshold,
                           self.params.leaf_metric, self.params.weights)

    def run(self, gt: CausalGraph) -> Trajectory:
        if not gt.edges:
            raise EmptyGroundTruth("ground-truth graph has no edges")
        for _ in range(self.params.iterations):
            path = select(self.root, self.params.w)
            tip = path[-1]
            if not tip.terminal and not tip.expanded:
                try:
                    created = self.expand(tip)
                except BackendError:
                    self.degraded = True
                    break
                if created:
                    tip = created[0]
                    path.append(tip)
            value = self.simulate(tip, gt)
            backpropagate(path, value)
            self.iterations_completed += 1
            if self.params.debug_checks:
                assert_backprop_invariant(self.root)
        return self.extract(gt)

    def extract(self, gt: CausalGraph) -> Trajectory:
        """Greedy descent through the highest-value children."""
        steps = []
        node = self.root
        while node.children:
            # Visited children outrank unvisited ones; among equals the
            # earliest-created child wins (max keeps the first maximum).
            node = max(node.children,
                       key=lambda c: (c.visit_count > 0, c.q_value))
            steps.append(TrajectoryStep(
                action=node.action.value, prompt=node.prompt,
                response=node.incoming_result, parsed=node.parsed))
        final_state = node.state
        return Trajectory(
            steps=tuple(steps),
            final_graph=graph_from_state(final_state),
            value=state_value(final_state, gt, self.params.threshold,
                              self.params.leaf_metric, self.params.weights),
            degraded=self.degraded,
            image=self.image,
        )


def run_search(image: str | None, gt: CausalGraph, backend,
               params: SearchParams | None = None) -> Trajectory:
    """Search one image's reasoning tree and return the best trajectory."""
    return ToctSearch(backend, params, image).run(gt)


def vanilla_baseline(image: str | None, gt: CausalGraph, backend,
                     threshold: float = 0.5) -> Trajectory:
    """Single greedy end-to-end call, the comparison target for filtering."""
    if not gt.edges:
        raise EmptyGroundTruth("ground-truth graph has no edges")
    _, user_text = render_e2e_prompt()
    request = ChatRequest(user_text=user_text, image_ref=image,
                          temperature=0.0)
    response = backend.complete(request)
    try:
        pairs = parse_causal_pairs(response.text)
    except ParseError:
        pairs = []
    entities, edges = entities_from_pairs(pairs)
    pred = build_graph(entities, edges)
    matching = match_entities(list(pred.entities), list(gt.entities),
                              threshold)
    value = score_graph(pred, gt, matching).recall
    step = TrajectoryStep(action="e2e", prompt=user_text,
                          response=response.text, parsed=tuple(pairs))
    return Trajectory(steps=(step,), final_graph=pred, value=value,
                      image=image)


@dataclass(frozen=True)
class FilterStats:
    total: int
    kept: int
    zero_pairs: int
    mean_search: float | None
    mean_vanilla: float | None
    median_search: float | None
    median_vanilla: float | None
    mean_search_nonzero: float | None
    mean_vanilla_nonzero: float | None
    median_search_nonzero: float | None
    median_vanilla_nonzero: float | None


def _stats(values) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    return statistics.fmean(values), statistics.median(values)


def filter_trajectories(pairs) -> tuple[list, FilterStats]:
    """Keep pairs where the searched trajectory strictly beats the
    one-step baseline; report value statistics with and without the
    pairs where both sides scored zero."""
    pairs = list(pairs)
    kept = [(t, v) for t, v in pairs if t.value > v.value]
    nonzero = [(t, v) for t, v in pairs if not (t.value == 0 and v.value == 0)]

    mean_s, median_s = _stats([t.value for t, _ in pairs])
    mean_v, median_v = _stats([v.value for _, v in pairs])
    mean_s_nz, median_s_nz = _stats([t.value for t, _ in nonzero])
    mean_v_nz, median_v_nz = _stats([v.value for _, v in nonzero])

    stats = FilterStats(
        total=len(pairs),
        kept=len(kept),
        zero_pairs=len(pairs) - len(nonzero),
        mean_search=mean_s, mean_vanilla=mean_v,
        median_search=median_s, median_vanilla=median_v,
        mean_search_nonzero=mean_s_nz, mean_vanilla_nonzero=mean_v_nz,
        median_search_nonzero=median_s_nz, median_vanilla_nonzero=median_v_nz,
    )
    return kept, stats


def dump_tree(node: SearchNode) -> dict:
    """Nested snapshot of the tree for debugging."""
    return {
        "action": node.action.value if node.action else None,
        "q": node.q_value,
        "n": node.visit_count,
        "terminal": node.terminal,
        "steps": node.state.step_index,
        "children": [dump_tree(c) for c in node.children],
    }
