"""Scene-graph domain types, validation, graph utilities, and JSONL serialization."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, List, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

ATTRIBUTE_TAGS = ("color", "material", "size", "state")


class GraphValidationError(ValueError):
    """A record or graph violates a structural invariant."""


class StreamParseError(ValueError):
    """A JSONL stream could not be parsed."""


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, coordinates normalized to [0, 1] of the image frame."""

    x0: float
    y0: float
    x1: float
    y1: float

    def violations(self) -> List[str]:
        out = []
        if not (0.0 <= self.x0 <= self.x1 <= 1.0):
            out.append(f"BBox x ordering violated: expected 0 <= x0 <= x1 <= 1, got x0={self.x0}, x1={self.x1}")
        if not (0.0 <= self.y0 <= self.y1 <= 1.0):
            out.append(f"BBox y ordering violated: expected 0 <= y0 <= y1 <= 1, got y0={self.y0}, y1={self.y1}")
        return out

    @property
    def area(self) -> float:
        return max(0.0, self.x1 - self.x0) * max(0.0, self.y1 - self.y0)

    def contains(self, other: "BBox") -> bool:
        return (self.x0 <= other.x0 and self.y0 <= other.y0
                and other.x1 <= self.x1 and other.y1 <= self.y1)

    def as_list(self) -> List[float]:
        return [self.x0, self.y0, self.x1, self.y1]


@dataclass(frozen=True)
class Attribute:
    """One tagged attribute, e.g. ("color", "red")."""

    tag: str
    value: str


@dataclass(frozen=True)
class ObjectNode:
    id: int
    category: str
    attributes: Tuple[Attribute, ...]
    box: BBox

    def phrase(self) -> str:
        """Attribute values prepended to the category, space separated."""
        parts = [a.value for a in self.attributes] + [self.category]
        return " ".join(parts)


@dataclass(frozen=True)
class RelationEdge:
    subject_id: int
    predicate: str
    object_id: int

    def triple(self) -> Tuple[int, str, int]:
        return (self.subject_id, self.predicate, self.object_id)


@dataclass(frozen=True)
class SceneGraph:
    """Typed graph of one image: object nodes plus directed predicate edges."""

    nodes: Tuple[ObjectNode, ...]
    edges: Tuple[RelationEdge, ...]
    image_id: str = ""

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def m(self) -> int:
        return len(self.edges)

    def node_by_id(self, node_id: int) -> ObjectNode:
        for node in self.nodes:
            if node.id == node_id:
                return node
        raise KeyError(f"no node with id {node_id}")

    def out_edges(self, node_id: int) -> List[RelationEdge]:
        return [e for e in self.edges if e.subject_id == node_id]


@dataclass(frozen=True, eq=False)
class ImageRef:
    """Raster reference: a file path, inline pixels, or both after loading."""

    path: str = ""
    pixels: np.ndarray | None = None

    def load(self, base_dir: Union[str, Path, None] = None) -> np.ndarray:
        """Return HxWx3 uint8 pixels, reading from disk if needed."""
        if self.pixels is not None:
            return self.pixels
        if not self.path:
            raise ValueError("ImageRef has neither pixels nor a path")
        from PIL import Image

        p = Path(self.path)
        if base_dir is not None and not p.is_absolute():
            p = Path(base_dir) / p
        with Image.open(p) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)


@dataclass(frozen=True, eq=False)
class ImageSGPair:
    image: ImageRef
    graph: SceneGraph


@dataclass(frozen=True, eq=False)
class ImageTextPair:
    image: ImageRef
    caption: str

    def __post_init__(self):
        if not self.caption:
            raise GraphValidationError("caption must be non-empty")


def validate_graph(g: SceneGraph) -> List[str]:
    """Return every invariant violation; an empty list means the graph is valid."""
    violations: List[str] = []
    seen_ids = set()
    for node in g.nodes:
        if node.id in seen_ids:
            violations.append(f"duplicate node id {node.id}")
        seen_ids.add(node.id)
        if not node.category:
            violations.append(f"node {node.id} has empty category")
        for attr in node.attributes:
            if not attr.value:
                violations.append(f"node {node.id} has attribute with empty value")
            if attr.tag not in ATTRIBUTE_TAGS:
                violations.append(f"node {node.id} has unknown attribute tag {attr.tag!r}")
        violations.extend(f"node {node.id}: {v}" for v in node.box.violations())
    seen_triples = set()
    for edge in g.edges:
        if edge.subject_id == edge.object_id:
            violations.append(f"self-loop edge on node {edge.subject_id}")
        if edge.subject_id not in seen_ids:
            violations.append(f"dangling subject_id {edge.subject_id}")
        if edge.object_id not in seen_ids:
            violations.append(f"dangling object_id {edge.object_id}")
        if not edge.predicate:
            violations.append("edge has empty predicate")
        if edge.triple() in seen_triples:
            violations.append(f"duplicate edge {edge.triple()}")
        seen_triples.add(edge.triple())
    return violations


def connected_components(g: SceneGraph) -> List[SceneGraph]:
    """Partition into weakly-connected components (edge direction ignored).

    Node ids and relative node/edge order are preserved; isolated nodes
    come back as singleton components. Components are ordered by the first
    position of any of their nodes in g.nodes.
    """
    parent = {node.id: node.id for node in g.nodes}

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a: int, b: int) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb

    for edge in g.edges:
        union(edge.subject_id, edge.object_id)

    roots_in_order: List[int] = []
    for node in g.nodes:
        root = find(node.id)
        if root not in roots_in_order:
            roots_in_order.append(root)

    components = []
    for root in roots_in_order:
        nodes = tuple(n for n in g.nodes if find(n.id) == root)
        member_ids = {n.id for n in nodes}
        edges = tuple(e for e in g.edges if e.subject_id in member_ids)
        components.append(SceneGraph(nodes=nodes, edges=edges, image_id=g.image_id))
    return components


def union_box(boxes: Sequence[BBox]) -> BBox:
    """Minimal axis-aligned box containing every input box."""
    if not boxes:
        raise ValueError("union_box requires a non-empty list of boxes")
    return BBox(
        x0=min(b.x0 for b in boxes),
        y0=min(b.y0 for b in boxes),
        x1=max(b.x1 for b in boxes),
        y1=max(b.y1 for b in boxes),
    )


# --- JSONL serialization ---------------------------------------------------
#
# One record per line, UTF-8:
# {"image_id": str, "image": path-or-inline, "nodes": [...], "edges": [...]}


def _attr_from_json(raw, node_id: int) -> Attribute:
    if isinstance(raw, str):
        logger.warning("node %d: untagged attribute %r admitted with tag 'state'", node_id, raw)
        return Attribute(tag="state", value=raw)
    if not isinstance(raw, dict) or "value" not in raw:
        raise GraphValidationError(f"field attributes of node {node_id} must be "
                                   f"{{tag, value}} objects, got {raw!r}")
    tag = raw.get("tag", "")
    if tag not in ATTRIBUTE_TAGS:
        logger.warning("node %d: attribute tag %r admitted as 'state'", node_id, tag)
        tag = "state"
    return Attribute(tag=tag, value=str(raw["value"]))


def _require(record: dict, key: str, where: str):
    if key not in record:
        raise GraphValidationError(f"missing field {key} in {where}")
    return record[key]


def record_to_pair(record: dict) -> ImageSGPair:
    """Build a validated ImageSGPair from one decoded JSONL record."""
    image_raw = _require(record, "image", "record")
    if isinstance(image_raw, str):
        image = ImageRef(path=image_raw)
    else:
        pixels = np.asarray(image_raw, dtype=np.uint8)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise GraphValidationError("field image: inline pixels must be HxWx3")
        image = ImageRef(pixels=pixels)

    nodes = []
    for raw in _require(record, "nodes", "record"):
        node_id = int(_require(raw, "id", "node"))
        box_raw = _require(raw, "box", f"node {node_id}")
        if len(box_raw) != 4:
            raise GraphValidationError(f"field box of node {node_id} must have 4 coordinates")
        nodes.append(ObjectNode(
            id=node_id,
            category=str(_require(raw, "category", f"node {node_id}")),
            attributes=tuple(_attr_from_json(a, node_id) for a in raw.get("attributes", [])),
            box=BBox(*(float(c) for c in box_raw)),
        ))
    edges = []
    for raw in _require(record, "edges", "record"):
        edges.append(RelationEdge(
            subject_id=int(_require(raw, "subject", "edge")),
            predicate=str(_require(raw, "predicate", "edge")),
            object_id=int(_require(raw, "object", "edge")),
        ))
    graph = SceneGraph(nodes=tuple(nodes), edges=tuple(edges),
                       image_id=str(record.get("image_id", "")))
    violations = validate_graph(graph)
    if violations:
        raise GraphValidationError("; ".join(violations))
    return ImageSGPair(image=image, graph=graph)


def pair_to_record(pair: ImageSGPair) -> dict:
    g = pair.graph
    if pair.image.path:
        image_field: Union[str, list] = pair.image.path
    elif pair.image.pixels is not None:
        image_field = pair.image.pixels.tolist()
    else:
        raise ValueError("pair image has neither path nor pixels")
    return {
        "image_id": g.image_id,
        "image": image_field,
        "nodes": [
            {
                "id": n.id,
                "category": n.category,
                "attributes": [{"tag": a.tag, "value": a.value} for a in n.attributes],
                "box": n.box.as_list(),
            }
            for n in g.nodes
        ],
        "edges": [
            {"subject": e.subject_id, "predicate": e.predicate, "object": e.object_id}
            for e in g.edges
        ],
    }


def parse_scene_graph_stream(stream: Union[IO, Iterable[bytes], Iterable[str]]) -> List[ImageSGPair]:
    """Parse newline-delimited JSON records into validated pairs, order preserved.

    Malformed JSON raises StreamParseError naming the line; schema or
    invariant violations raise GraphValidationError naming the record.
    """
    pairs: List[ImageSGPair] = []
    record_no = 0
    for line_no, line in enumerate(stream, start=1):
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        if not line.strip():
            continue
        record_no += 1
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise StreamParseError(f"line {line_no}: malformed JSON: {exc}") from exc
        try:
            pairs.append(record_to_pair(record))
        except GraphValidationError as exc:
            raise GraphValidationError(f"record {record_no} (line {line_no}): {exc}") from exc
    return pairs


def dumps_record(record: dict) -> str:
    """Canonical one-line JSON encoding used for every JSONL artifact."""
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def write_jsonl(path: Union[str, Path], records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(dumps_record(record) + "\n")


def read_jsonl(path: Union[str, Path]) -> List[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(json.loads(line))
    return out
