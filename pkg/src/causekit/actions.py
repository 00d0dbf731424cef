"""The fixed three-step reasoning loop and its prompt templates.

Region selection, entity recognition, and causality orientation cycle
in that order. Each action has one prompt template; placeholders are
filled from the accumulated reasoning state.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, replace

from .graph import BoundingBox
from .parsing import NamedBoxPair, render_pair


class TemplateFieldMissing(ValueError):
    pass


class Action(enum.Enum):
    REGION_SELECTION = "region_selection"
    ENTITY_RECOGNITION = "entity_recognition"
    CAUSALITY_ORIENTATION = "causality_orientation"

    @property
    def successor(self) -> "Action":
        order = (Action.REGION_SELECTION, Action.ENTITY_RECOGNITION,
                 Action.CAUSALITY_ORIENTATION)
        return order[(order.index(self) + 1) % 3]


FIRST_ACTION = Action.REGION_SELECTION


@dataclass(frozen=True)
class ReasoningState:
    """Everything accumulated along one root-to-node path."""

    explored_regions: tuple = ()          # (name, BoundingBox) pairs
    discovered_causality: tuple = ()      # ordered NamedBoxPair, deduplicated
    # Pairs proposed by the latest entity-recognition step, consumed by
    # the next causality-orientation step. None until the first one runs.
    candidate_pairs: tuple | None = None
    last_action: Action | None = None
    step_index: int = 0

    def next_action(self) -> Action:
        if self.last_action is None:
            return FIRST_ACTION
        return self.last_action.successor

    def with_region(self, name: str, box: BoundingBox) -> "ReasoningState":
        return replace(self,
                       explored_regions=self.explored_regions + ((name, box),),
                       last_action=Action.REGION_SELECTION,
                       step_index=self.step_index + 1)

    def with_candidates(self, pairs) -> "ReasoningState":
        return replace(self,
                       candidate_pairs=tuple(pairs),
                       last_action=Action.ENTITY_RECOGNITION,
                       step_index=self.step_index + 1)

    def with_causality(self, pairs) -> "ReasoningState":
        merged = list(self.discovered_causality)
        for pair in pairs:
            if pair not in merged:
                merged.append(pair)
        return replace(self,
                       discovered_causality=tuple(merged),
                       last_action=Action.CAUSALITY_ORIENTATION,
                       step_index=self.step_index + 1)

    def advanced(self, action: Action) -> "ReasoningState":
        """Step counter bump for actions that contribute no new state
        (a failed parse still consumes a step)."""
        return replace(self, last_action=action,
                       step_index=self.step_index + 1)


REGION_SELECTION_TEMPLATE = """You are analyzing the causal relationships between entities in the image through multiple steps.
Your current reasoning trajectory is as follows:

Explored regions: {explored regions}.

Identified causal pairs: {causal pairs}.

Now we hope to look for new regions to discover more potential correlated entity pairs.
Please select the next most worthy region to focus on and explain your thinking process.
Note: the next region should be DIFFERENT from the previous explored regions.

-- If you think the exploration regions and identified causal pairs are SUFFICIENTLY COMPREHENSIVE, you should DIRECTLY output "END TRACE" and nothing else.

Otherwise, your output format should be as follows:

<think>
(State the reason as concisely as possible for selecting the new focused region.)
</think>

<region name>
(Output the name of the focused region and nothing else.)
</region name>

<bounding box>
(Output the bounding box of the focused region with format [x1, y1, x2, y2] and nothing else, where (x1, y1) is the top-left coordinate and (x2, y2) is the bottom-right coordinate of the bounding box.)
</bounding box>"""

ENTITY_RECOGNITION_TEMPLATE = """Your task is to identify all entity pairs that may have correlations in the image.
Each pair should have obvious potential correlations such as spatial dependence, support, grasping, placement, inclusion, etc.
Think and output all these correlated entity pairs and their bounding boxes.

Your output format should be as follows:

<think>
(Provide the concise thinking process for identifying correlated entity pairs.)
</think>

<entity pairs>
(Output all the correlated entity pairs in the format of "[{"entity1": [x1, y1, x2, y2], "entity2": [x1, y1, x2, y2]}, {"entity3": [x1, y1, x2, y2], "entity4": [x1, y1, x2, y2]}, ...]". You should use ACTUAL ENTITY NAME to replace the placeholders "entity1", "entity2", ... in the format. (x1, y1) is the top-left coordinate and (x2, y2) is the bottom-right coordinate of the bounding box.)
</entity pairs>"""

CAUSALITY_ORIENTATION_TEMPLATE = """Based on the image, your task is to determine whether causal relationships exist between the following entity pairs.
Entity pairs: {entity pairs}

The causality criteria are as follows:
For example, if the entity pairs are {{"A": [x1, y1, x2, y2], "B": [x1, y1, x2, y2]}} or {{"B": [x1, y1, x2, y2], "A": [x1, y1, x2, y2]}}:
- A is in direct contact with B.
- A's presence maintains B's current state.
- Removing A would cause B to lose its current state.
Then A is the cause and B is the effect.
(x1, y1) is the top-left coordinate and (x2, y2) is the bottom-right coordinate of the bounding box.

Your output format should be as follows:

<think>
(Consider entity pairs and keep the reasoning as concise as possible.)
</think>

<causal pairs>
(Output entity pairs with causal relationships only and if necessary, swap the ORDER of entities pairs to ensure the cause precedes the effect.)
</causal pairs>"""

E2E_TEMPLATE = """Identify all causal relationships between entities in the image based on the following criteria:
- A is in direct contact with B.
- A's presence maintains B's current state.
- Removing A would cause B to lose its current state.
Then A is the cause and B is the effect.

Please provide your reasoning process and output all the entity pairs with causal relationships and their bounding boxes in the following format:

<think>
(Provide your reasoning process for analyzing the image.)
</think>

<causal pairs>
(Output all the entity pairs with causal relationships and their bounding boxes in the format of "[{"cause": [x1, y1, x2, y2], "effect": [x1, y1, x2, y2]}, {"cause": [x1, y1, x2, y2], "effect": [x1, y1, x2, y2]}, ...]". You should use ACTUAL ENTITY NAME to replace the placeholders "cause" and "effect" in the format. (x1, y1) is the top-left coordinate and (x2, y2) is the bottom-right coordinate of the bounding box.)
</causal pairs>"""


def _render_regions(regions) -> str:
    parts = []
    for name, box in regions:
        parts.append("{%s: %s}" % (
            json.dumps(name), json.dumps([box.x1, box.y1, box.x2, box.y2])))
    return "[" + ", ".join(parts) + "]"


def _render_pairs(pairs) -> str:
    return "[" + ", ".join(render_pair(p) for p in pairs) + "]"


def render_prompt(action: Action, state: ReasoningState) -> tuple[str, str]:
    """Fill the template for `action` from `state`.

    Returns (system_text, user_text); the system role is unused by
    these grammars, so system_text is always empty.
    """
    if action is Action.REGION_SELECTION:
        text = REGION_SELECTION_TEMPLATE
        text = text.replace("{explored regions}",
                            _render_regions(state.explored_regions))
        text = text.replace("{causal pairs}",
                            _render_pairs(state.discovered_causality))
        return "", text
    if action is Action.ENTITY_RECOGNITION:
        return "", ENTITY_RECOGNITION_TEMPLATE
    if action is Action.CAUSALITY_ORIENTATION:
        if state.candidate_pairs is None:
            raise TemplateFieldMissing(
                "causality orientation needs candidate pairs from a prior "
                "entity-recognition step")
        return "", CAUSALITY_ORIENTATION_TEMPLATE.replace(
            "{entity pairs}", _render_pairs(state.candidate_pairs))
    raise TemplateFieldMissing(f"no template for {action!r}")


def render_e2e_prompt() -> tuple[str, str]:
    """The single-shot prompt used by the one-step baseline."""
    return "", E2E_TEMPLATE
