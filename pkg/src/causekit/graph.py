"""Causal graph data model: entities with boxes, directed causal edges,
and removal-intervention reachability.

Graphs are immutable after construction and safe to share across threads.
Entity identity is the integer id; labels are metadata and play no role in
structural evaluation.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional


class GraphError(ValueError):
    """Base class for graph construction/lookup failures."""


class InvalidBox(GraphError):
    pass


class DuplicateEntityId(GraphError):
    pass


class DanglingEdgeEndpoint(GraphError):
    pass


class SelfLoopEdge(GraphError):
    pass


class DuplicateEdge(GraphError):
    pass


class UnknownEntity(GraphError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel coordinates, corner-pair convention:
    (x1, y1) top-left, (x2, y2) bottom-right."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in coords):
            raise InvalidBox(f"box coordinates must be numbers, got {coords!r}")
        if not all(math.isfinite(c) for c in coords):
            raise InvalidBox(f"box coordinates must be finite, got {coords!r}")
        if min(coords) < 0:
            raise InvalidBox(f"box coordinates must be >= 0, got {coords!r}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise InvalidBox(
                f"box must satisfy x2 > x1 and y2 > y1, got {coords!r}"
            )

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class Entity:
    """A visual entity: category label plus bounding box."""

    id: int
    label: str
    box: BoundingBox

    def __post_init__(self):
        if not self.label:
            raise GraphError(f"entity {self.id} has an empty label")


@dataclass(frozen=True)
class CausalEdge:
    """Directed cause -> effect link between two entity ids.

    `predicate` names the causal mechanism (e.g. "support"); ground truth
    carries it, model predictions usually do not.
    """

    cause_id: int
    effect_id: int
    predicate: Optional[str] = None


@dataclass(frozen=True)
class CausalGraph:
    """Validated causal graph. Construct via :func:`build_graph`."""

    entities: tuple[Entity, ...]
    edges: tuple[CausalEdge, ...]

    def entity(self, entity_id: int) -> Entity:
        for e in self.entities:
            if e.id == entity_id:
                return e
        raise UnknownEntity(f"no entity with id {entity_id}")

    def entity_ids(self) -> set[int]:
        return {e.id for e in self.entities}

    def edge_set(self) -> set[tuple[int, int]]:
        return {(e.cause_id, e.effect_id) for e in self.edges}


def build_graph(entities: Iterable[Entity], edges: Iterable[CausalEdge]) -> CausalGraph:
    """Validate and assemble a CausalGraph.

    Raises DuplicateEntityId, DanglingEdgeEndpoint, SelfLoopEdge, or
    DuplicateEdge when the inputs violate the graph invariants.
    """
    entities = tuple(entities)
    edges = tuple(edges)

    ids: set[int] = set()
    for ent in entities:
        if ent.id in ids:
            raise DuplicateEntityId(f"entity id {ent.id} appears more than once")
        ids.add(ent.id)

    seen_pairs: set[tuple[int, int]] = set()
    for edge in edges:
        if edge.cause_id == edge.effect_id:
            raise SelfLoopEdge(f"edge {edge.cause_id} -> {edge.effect_id} is a self-loop")
        for endpoint in (edge.cause_id, edge.effect_id):
            if endpoint not in ids:
                raise DanglingEdgeEndpoint(
                    f"edge {edge.cause_id} -> {edge.effect_id} references unknown entity {endpoint}"
                )
        pair = (edge.cause_id, edge.effect_id)
        if pair in seen_pairs:
            raise DuplicateEdge(f"duplicate edge {edge.cause_id} -> {edge.effect_id}")
        seen_pairs.add(pair)

    return CausalGraph(entities=entities, edges=edges)


def removal_effects(graph: CausalGraph, entity_id: int) -> set[int]:
    """All entities whose state changes when `entity_id` is removed.

    Operationalized as directed reachability along cause -> effect edges
    (transitive closure of effects). The start entity itself is excluded,
    even when it sits on a cycle. Well-defined on cyclic graphs.
    """
    if entity_id not in graph.entity_ids():
        raise UnknownEntity(f"no entity with id {entity_id}")

    successors: dict[int, list[int]] = {}
    for edge in graph.edges:
        successors.setdefault(edge.cause_id, []).append(edge.effect_id)

    reached: set[int] = set()
    queue: deque[int] = deque(successors.get(entity_id, ()))
    while queue:
        node = queue.popleft()
        if node in reached:
            continue
        reached.add(node)
        queue.extend(successors.get(node, ()))

    reached.discard(entity_id)
    return reached
