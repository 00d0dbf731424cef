"""Parsers for the four tagged model-output grammars.

Every payload is a JSON-like list inside a named tag block. The crucial
constraint: a causal pair is an object of exactly two name->box entries
whose KEY ORDER encodes direction (first key causes the second). Standard
dict decoding would destroy that, so objects are decoded with
object_pairs_hook=list to keep duplicate keys and insertion order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .graph import BoundingBox, CausalEdge, Entity, GraphError

THINK_TAG = "think"
CAUSAL_TAG = "causal pairs"
ENTITY_TAG = "entity pairs"
REGION_TAG = "region name"
BOX_TAG = "bounding box"

END_TRACE = "END TRACE"

GRAMMARS = ("e2e", "region", "entity", "causality")


class ParseError(ValueError):
    pass


class MissingTag(ParseError):
    pass


class MalformedList(ParseError):
    pass


class WrongKeyCount(ParseError):
    pass


class BadBox(ParseError):
    pass


@dataclass(frozen=True)
class NamedBoxPair:
    """Two named, boxed entities; cause first when ordered."""

    first_name: str
    first_box: BoundingBox
    second_name: str
    second_box: BoundingBox
    ordered: bool


@dataclass(frozen=True)
class RegionChoice:
    name: str | None
    box: BoundingBox | None
    end_trace: bool


def extract_block(text: str, tag: str) -> str:
    """Return the body of the first <tag>...</tag> block, verbatim."""
    open_tag, close_tag = f"<{tag}>", f"</{tag}>"
    start = text.find(open_tag)
    if start < 0:
        raise MissingTag(f"missing {open_tag}")
    body_start = start + len(open_tag)
    end = text.find(close_tag, body_start)
    if end < 0:
        raise MissingTag(f"missing {close_tag}")
    return text[body_start:end]


def _reject_constant(token):
    # Strict JSON: NaN/Infinity never form a valid box or name.
    raise MalformedList(f"non-standard JSON constant {token!r}")


def _decode_list(body: str):
    try:
        value = json.loads(body, object_pairs_hook=list,
                           parse_constant=_reject_constant)
    except MalformedList:
        raise
    except (json.JSONDecodeError, RecursionError, ValueError) as exc:
        raise MalformedList(str(exc)) from None
    if not isinstance(value, list):
        raise MalformedList("payload must be a JSON list")
    return value


def _coerce_box(value) -> BoundingBox:
    if not isinstance(value, list) or len(value) != 4:
        raise BadBox(f"box must be four numbers, got {value!r}")
    for coord in value:
        if isinstance(coord, bool) or not isinstance(coord, (int, float)):
            raise BadBox(f"box coordinate {coord!r} is not a number")
    try:
        return BoundingBox(*(float(c) for c in value))
    except GraphError as exc:
        raise BadBox(str(exc)) from None


def _coerce_name(value) -> str:
    if not isinstance(value, str) or not value.strip():
        raise MalformedList(f"entity name must be a non-empty string, got {value!r}")
    return value


def _validate_record(record, ordered: bool) -> NamedBoxPair:
    # object_pairs_hook turns each JSON object into a list of (key, value)
    # tuples; any other shape means the record was not an object.
    if not isinstance(record, list) or any(
            not isinstance(item, tuple) for item in record):
        raise MalformedList(f"each record must be a two-entry object, got {record!r}")
    if len(record) != 2:
        raise WrongKeyCount(f"expected exactly 2 entries, got {len(record)}")
    (name_a, box_a), (name_b, box_b) = record
    return NamedBoxPair(
        first_name=_coerce_name(name_a),
        first_box=_coerce_box(box_a),
        second_name=_coerce_name(name_b),
        second_box=_coerce_box(box_b),
        ordered=ordered,
    )


def _parse_pairs(text: str, tag: str, ordered: bool) -> list[NamedBoxPair]:
    records = _decode_list(extract_block(text, tag))
    return [_validate_record(record, ordered) for record in records]


def parse_causal_pairs(text: str) -> list[NamedBoxPair]:
    """Parse a <causal pairs> block; first key is cause, second effect."""
    return _parse_pairs(text, CAUSAL_TAG, ordered=True)


def parse_entity_pairs(text: str) -> list[NamedBoxPair]:
    """Parse an <entity pairs> block; pair order carries no direction."""
    return _parse_pairs(text, ENTITY_TAG, ordered=False)


def parse_region_choice(text: str) -> RegionChoice:
    """Parse a region-selection reply, honoring the END TRACE sentinel."""
    if text.strip() == END_TRACE:
        return RegionChoice(name=None, box=None, end_trace=True)
    name = extract_block(text, REGION_TAG).strip()
    if not name:
        raise MalformedList("region name is empty")
    box_body = extract_block(text, BOX_TAG).strip()
    try:
        raw = json.loads(box_body, parse_constant=_reject_constant)
    except MalformedList:
        raise BadBox("box contains a non-standard JSON constant")
    except (json.JSONDecodeError, ValueError) as exc:
        raise BadBox(str(exc)) from None
    return RegionChoice(name=name, box=_coerce_box(raw), end_trace=False)


def format_compliance(text: str, grammar: str, graded: bool = False) -> float:
    """1.0 iff the text parses cleanly under the grammar, else 0.0.

    With graded=True, list grammars instead score the fraction of
    records that are individually well-formed (the enclosing tag and
    list syntax must still hold).
    """
    if grammar not in GRAMMARS:
        raise ValueError(f"unknown grammar {grammar!r}")
    if grammar == "region":
        try:
            parse_region_choice(text)
            return 1.0
        except ParseError:
            return 0.0

    tag = ENTITY_TAG if grammar == "entity" else CAUSAL_TAG
    ordered = grammar != "entity"
    if not graded:
        try:
            _parse_pairs(text, tag, ordered)
            return 1.0
        except ParseError:
            return 0.0
    try:
        records = _decode_list(extract_block(text, tag))
    except ParseError:
        return 0.0
    if not records:
        return 1.0
    good = 0
    for record in records:
        try:
            _validate_record(record, ordered)
            good += 1
        except ParseError:
            continue
    return good / len(records)


def entities_from_pairs(pairs) -> tuple[list[Entity], list[CausalEdge]]:
    """Collapse named pairs into entities and edges.

    Entities deduplicate on exact (name, box); edges deduplicate on the
    id pair. A pair whose two sides are the same entity is dropped, so
    downstream graph construction never sees a self-loop.
    """
    ids: dict[tuple, int] = {}
    entities: list[Entity] = []

    def intern(name: str, box: BoundingBox) -> int:
        key = (name, box.x1, box.y1, box.x2, box.y2)
        if key not in ids:
            ids[key] = len(entities)
            entities.append(Entity(id=len(entities), label=name, box=box))
        return ids[key]

    edges: list[CausalEdge] = []
    seen: set[tuple[int, int]] = set()
    for pair in pairs:
        a = intern(pair.first_name, pair.first_box)
        b = intern(pair.second_name, pair.second_box)
        if a == b or (a, b) in seen:
            continue
        seen.add((a, b))
        edges.append(CausalEdge(cause_id=a, effect_id=b))
    return entities, edges


def _render_box(box: BoundingBox) -> str:
    return json.dumps([box.x1, box.y1, box.x2, box.y2])


def render_pair(pair: NamedBoxPair) -> str:
    # Manual assembly: the two names may collide, which a dict cannot hold.
    return "{%s: %s, %s: %s}" % (
        json.dumps(pair.first_name), _render_box(pair.first_box),
        json.dumps(pair.second_name), _render_box(pair.second_box))


def serialize_pairs(pairs, tag: str = CAUSAL_TAG) -> str:
    """Emit pairs as a tagged block that reparses to an equal structure."""
    body = "[" + ", ".join(render_pair(p) for p in pairs) + "]"
    return f"<{tag}>{body}</{tag}>"


def serialize_region_choice(choice: RegionChoice) -> str:
    if choice.end_trace:
        return END_TRACE
    return (f"<{REGION_TAG}>{choice.name}</{REGION_TAG}>\n"
            f"<{BOX_TAG}>{_render_box(choice.box)}</{BOX_TAG}>")
