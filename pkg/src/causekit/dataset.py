"""Dataset ingestion, validation, statistics, and corpus export.

Annotation boxes arrive as [x, y, w, h]; everything downstream speaks
corner coordinates. The conversion happens exactly once, here.

Validation is total: a record either loads cleanly, loads with warnings,
or is skipped with a single fatal report entry naming the violated rule.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass

from .geometry import NonPositiveExtent, xywh_to_corners
from .graph import (CausalEdge, CausalGraph, Entity, GraphError, build_graph)
from .reward import prediction_graph

# Entities this small are below the annotation floor (30x30 px area).
MIN_ENTITY_AREA = 900.0


class DatasetError(Exception):
    pass


class UnreadableFile(DatasetError):
    pass


class UnwritablePath(DatasetError):
    pass


@dataclass(frozen=True)
class ValidationIssue:
    img_id: int | None
    severity: str  # "fatal" or "warning"
    rule: str
    message: str

    def as_record(self) -> dict:
        return {"img_id": self.img_id, "severity": self.severity,
                "rule": self.rule, "message": self.message}


@dataclass(frozen=True)
class DatasetRecord:
    dataset_id: str
    img_id: int
    graph: CausalGraph
    image_path: str | None = None


class _Fatal(Exception):
    def __init__(self, rule: str, message: str):
        super().__init__(message)
        self.rule = rule


def _require(data: dict, key: str):
    if key not in data:
        raise _Fatal("missing-field", f"record lacks required field {key!r}")
    return data[key]


def _parse_entity(raw) -> Entity:
    if not isinstance(raw, dict):
        raise _Fatal("bad-entity", f"entity must be an object, got {raw!r}")
    for key in ("entity_id", "entity_name", "bbox"):
        if key not in raw:
            raise _Fatal("entity-missing-field", f"entity lacks {key!r}")
    entity_id = raw["entity_id"]
    if isinstance(entity_id, bool) or not isinstance(entity_id, int):
        raise _Fatal("bad-entity-id", f"entity_id must be an integer, got {entity_id!r}")
    name = raw["entity_name"]
    if not isinstance(name, str) or not name.strip():
        raise _Fatal("empty-entity-name", f"entity {entity_id} has no usable name")
    bbox = raw["bbox"]
    if (not isinstance(bbox, list) or len(bbox) != 4
            or any(isinstance(v, bool) or not isinstance(v, (int, float))
                   for v in bbox)):
        raise _Fatal("bad-bbox", f"entity {entity_id} bbox must be four numbers")
    try:
        box = xywh_to_corners(*(float(v) for v in bbox))
    except NonPositiveExtent:
        raise _Fatal("bad-bbox", f"entity {entity_id} has non-positive width or height")
    except GraphError as exc:
        raise _Fatal("bad-bbox", f"entity {entity_id}: {exc}")
    return Entity(id=entity_id, label=name, box=box)


def _parse_record(raw, index: int) -> tuple[DatasetRecord, list[ValidationIssue]]:
    if not isinstance(raw, dict):
        raise _Fatal("record-not-object", f"record {index} is not an object")
    img_id = _require(raw, "img_id")
    if isinstance(img_id, bool) or not isinstance(img_id, int):
        raise _Fatal("bad-img-id", f"img_id must be an integer, got {img_id!r}")
    dataset_id = _require(raw, "dataset_id")
    raw_entities = _require(raw, "entities")
    raw_relationships = _require(raw, "causal_relationships")

    if not isinstance(raw_entities, list):
        raise _Fatal("bad-entities", "entities must be a list")
    entities = [_parse_entity(e) for e in raw_entities]
    ids = Counter(e.id for e in entities)
    duplicates = [i for i, n in ids.items() if n > 1]
    if duplicates:
        raise _Fatal("duplicate-entity-id", f"entity ids repeated: {duplicates}")

    if not isinstance(raw_relationships, dict):
        raise _Fatal("bad-relationships",
                     "causal_relationships must map predicates to id pairs")
    if raw_relationships and not entities:
        raise _Fatal("empty-entities",
                     "relationships present but the entity list is empty")

    known = set(ids)
    edges: list[CausalEdge] = []
    seen_pairs: set[tuple[int, int]] = set()
    for predicate, pairs in raw_relationships.items():
        if not isinstance(pairs, list):
            raise _Fatal("bad-relationships",
                         f"predicate {predicate!r} must hold a list of pairs")
        for pair in pairs:
            if (not isinstance(pair, list) or len(pair) != 2
                    or any(isinstance(v, bool) or not isinstance(v, int)
                           for v in pair)):
                raise _Fatal("bad-relationship-entry",
                             f"relationship must be [cause_id, effect_id], got {pair!r}")
            cause, effect = pair
            if cause not in known or effect not in known:
                raise _Fatal("dangling-entity-ref",
                             f"relationship {pair} references an unknown entity")
            if cause == effect:
                raise _Fatal("self-loop", f"entity {cause} cannot cause itself")
            if (cause, effect) in seen_pairs:
                raise _Fatal("duplicate-edge",
                             f"relationship {pair} appears more than once")
            seen_pairs.add((cause, effect))
            edges.append(CausalEdge(cause_id=cause, effect_id=effect,
                                    predicate=predicate))

    warnings = [
        ValidationIssue(img_id, "warning", "small-entity",
                        f"entity {e.id} ({e.label!r}) area {e.box.area:.1f} px^2 "
                        f"is under the {MIN_ENTITY_AREA:.0f} px^2 floor")
        for e in entities if e.box.area < MIN_ENTITY_AREA
    ]

    image_path = raw.get("image_path")
    record = DatasetRecord(dataset_id=str(dataset_id), img_id=img_id,
                           graph=build_graph(entities, edges),
                           image_path=image_path)
    return record, warnings


def _read_raw_records(path) -> list:
    try:
        with open(path, encoding="utf-8") as handle:
            text = handle.read()
    except OSError as exc:
        raise UnreadableFile(str(exc)) from None
    stripped = text.lstrip()
    if stripped.startswith("["):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            return [_Fatal("undecodable-record", f"file is not valid JSON: {exc}")]
        return data if isinstance(data, list) else [data]
    records = []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            records.append(_Fatal("undecodable-record",
                                  f"line {number} is not valid JSON: {exc}"))
    return records


def load_dataset(path) -> tuple[list[DatasetRecord], list[ValidationIssue]]:
    """Read a JSON array or line-delimited file of annotation records.

    Returns the records that validate plus the full issue report;
    fatally flawed records are skipped, one report entry each.
    """
    records: list[DatasetRecord] = []
    issues: list[ValidationIssue] = []
    seen_ids: set[int] = set()
    for index, raw in enumerate(_read_raw_records(path)):
        if isinstance(raw, _Fatal):
            issues.append(ValidationIssue(None, "fatal", raw.rule, str(raw)))
            continue
        try:
            record, warnings = _parse_record(raw, index)
        except _Fatal as exc:
            img_id = raw.get("img_id") if isinstance(raw, dict) else None
            if not isinstance(img_id, int) or isinstance(img_id, bool):
                img_id = None
            issues.append(ValidationIssue(img_id, "fatal", exc.rule, str(exc)))
            continue
        issues.extend(warnings)
        if record.img_id in seen_ids:
            issues.append(ValidationIssue(
                record.img_id, "warning", "duplicate-img-id",
                f"img_id {record.img_id} appears again; keeping the first"))
            continue
        seen_ids.add(record.img_id)
        records.append(record)
    return records, issues


def _record_to_json(record: DatasetRecord) -> dict:
    entities = [{
        "entity_id": e.id,
        "entity_name": e.label,
        "bbox": [e.box.x1, e.box.y1, e.box.width, e.box.height],
    } for e in record.graph.entities]
    relationships: dict[str, list] = {}
    for edge in record.graph.edges:
        predicate = edge.predicate if edge.predicate is not None else "unspecified"
        relationships.setdefault(predicate, []).append(
            [edge.cause_id, edge.effect_id])
    data = {
        "dataset_id": record.dataset_id,
        "img_id": record.img_id,
        "entities": entities,
        "causal_relationships": relationships,
    }
    if record.image_path is not None:
        data["image_path"] = record.image_path
    return data


def save_dataset(records, path) -> int:
    """Write records as one JSON object per line; returns the count."""
    try:
        with open(path, "w", encoding="utf-8") as handle:
            count = 0
            for record in records:
                handle.write(json.dumps(_record_to_json(record)) + "\n")
                count += 1
    except OSError as exc:
        raise UnwritablePath(str(exc)) from None
    return count


@dataclass(frozen=True)
class DatasetStats:
    images: int
    entities: int
    categories: int
    relationships: int
    relationships_per_image: float
    relationship_histogram: dict[int, int]
    top_categories: tuple[tuple[str, int], ...]
    top_predicates: tuple[tuple[str, int], ...]


def dataset_stats(records, top_k: int = 10) -> DatasetStats:
    records = list(records)
    categories: Counter = Counter()
    predicates: Counter = Counter()
    histogram: Counter = Counter()
    total_entities = 0
    total_edges = 0
    for record in records:
        total_entities += len(record.graph.entities)
        total_edges += len(record.graph.edges)
        histogram[len(record.graph.edges)] += 1
        for entity in record.graph.entities:
            categories[entity.label] += 1
        for edge in record.graph.edges:
            if edge.predicate is not None:
                predicates[edge.predicate] += 1
    return DatasetStats(
        images=len(records),
        entities=total_entities,
        categories=len(categories),
        relationships=total_edges,
        relationships_per_image=(total_edges / len(records)) if records else 0.0,
        relationship_histogram=dict(sorted(histogram.items())),
        top_categories=tuple(categories.most_common(top_k)),
        top_predicates=tuple(predicates.most_common(top_k)),
    )


def export_sft_corpus(trajectories, path) -> int:
    """Write kept trajectories as line-delimited conversation records."""
    try:
        with open(path, "w", encoding="utf-8") as handle:
            count = 0
            for trajectory in trajectories:
                record = {
                    "image": trajectory.image,
                    "value": trajectory.value,
                    "turns": [{"action": s.action, "prompt": s.prompt,
                               "response": s.response}
                              for s in trajectory.steps],
                }
                handle.write(json.dumps(record) + "\n")
                count += 1
    except OSError as exc:
        raise UnwritablePath(str(exc)) from None
    return count


def read_sft_corpus(path) -> list[dict]:
    try:
        with open(path, encoding="utf-8") as handle:
            return [json.loads(line) for line in handle if line.strip()]
    except OSError as exc:
        raise UnreadableFile(str(exc)) from None


def load_predictions(path) -> tuple[dict[int, CausalGraph], list[ValidationIssue]]:
    """Read a predictions file keyed by img_id.

    Records may be full dataset-schema graphs or raw model text as
    {"img_id": ..., "text": ...}; the text route parses through the
    causal-pairs grammar and unparseable text yields an empty graph.
    """
    predictions: dict[int, CausalGraph] = {}
    issues: list[ValidationIssue] = []
    for index, raw in enumerate(_read_raw_records(path)):
        if isinstance(raw, _Fatal):
            issues.append(ValidationIssue(None, "fatal", raw.rule, str(raw)))
            continue
        if isinstance(raw, dict) and "text" in raw:
            img_id = raw.get("img_id")
            if isinstance(img_id, bool) or not isinstance(img_id, int):
                issues.append(ValidationIssue(
                    None, "fatal", "bad-img-id",
                    f"prediction record {index} lacks an integer img_id"))
                continue
            predictions[img_id] = prediction_graph(raw["text"])
            continue
        try:
            record, warnings = _parse_record(raw, index)
        except _Fatal as exc:
            img_id = raw.get("img_id") if isinstance(raw, dict) else None
            if not isinstance(img_id, int) or isinstance(img_id, bool):
                img_id = None
            issues.append(ValidationIssue(img_id, "fatal", exc.rule, str(exc)))
            continue
        issues.extend(warnings)
        predictions[record.img_id] = record.graph
    return predictions, issues
