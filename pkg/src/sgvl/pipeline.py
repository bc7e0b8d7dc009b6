"""Graph preprocessing, graph-to-caption generation, and graph-based hard negatives.

Preprocessing turns an arbitrary image-graph pair into a small subgraph whose
connected components are directed paths, which is what the caption grammar
consumes. Negative rules mutate a graph into one that no longer describes the
image; the mutated graph is captioned with the same grammar.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Set, Tuple, Union

import numpy as np

from .graph import (
    Attribute,
    BBox,
    ImageRef,
    ImageSGPair,
    ObjectNode,
    RelationEdge,
    SceneGraph,
    connected_components,
    union_box,
)


class NegativeRule(enum.Enum):
    ASYMMETRIC_SWAP = "asymmetric_swap"
    RELATION_FALSIFY = "relation_falsify"
    ATTRIBUTE_FALSIFY = "attribute_falsify"
    ATTRIBUTE_SWAP = "attribute_swap"


ALL_RULES = (
    NegativeRule.ASYMMETRIC_SWAP,
    NegativeRule.RELATION_FALSIFY,
    NegativeRule.ATTRIBUTE_FALSIFY,
    NegativeRule.ATTRIBUTE_SWAP,
)


class NoNegativeError(ValueError):
    """No negative rule is applicable to the given graph."""


class NotAPathError(ValueError):
    """A component handed to the caption grammar is not a directed path."""


@dataclass(frozen=True)
class RuleConfig:
    """Pools the negative rules draw from, plus the subgraph size bound."""

    asymmetric_predicates: FrozenSet[str]
    predicate_replacements: Dict[str, Tuple[str, ...]]
    attribute_pools: Dict[str, Tuple[str, ...]]
    max_objects: int = 10

    def __post_init__(self):
        for pred, repl in self.predicate_replacements.items():
            if pred in repl:
                raise ValueError(f"replacement pool for {pred!r} contains the predicate itself")

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "RuleConfig":
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
        return cls(
            asymmetric_predicates=frozenset(raw.get("asymmetric_predicates", [])),
            predicate_replacements={
                k: tuple(v) for k, v in raw.get("predicate_replacements", {}).items()
            },
            attribute_pools={k: tuple(v) for k, v in raw.get("attribute_pools", {}).items()},
            max_objects=int(raw.get("max_objects", 10)),
        )

    def to_json_dict(self) -> dict:
        return {
            "asymmetric_predicates": sorted(self.asymmetric_predicates),
            "predicate_replacements": {k: sorted(v) for k, v in
                                       sorted(self.predicate_replacements.items())},
            "attribute_pools": {k: sorted(v) for k, v in sorted(self.attribute_pools.items())},
            "max_objects": self.max_objects,
        }


@dataclass(frozen=True)
class CaptionPair:
    positive: str
    negative: str
    rule: NegativeRule

    def __post_init__(self):
        if not self.positive or not self.negative:
            raise ValueError("captions must be non-empty")
        if self.positive == self.negative:
            raise ValueError("negative caption must differ from the positive one")


def extract_subgraph_random_walk(g: SceneGraph, rng: np.random.Generator) -> SceneGraph:
    """Extract a directed-path subgraph by a random walk over edges.

    Starts on a uniformly random edge, then repeatedly follows a uniformly
    random outgoing edge of the current head node. The walk ends at a node
    with no outgoing edges, or just before a node would be visited twice,
    so the result is always a single simple directed path.
    """
    if not g.edges:
        raise ValueError("random walk requires a graph with at least one edge")
    start = g.edges[int(rng.integers(len(g.edges)))]
    path_edges = [start]
    visited = [start.subject_id, start.object_id]
    current = start.object_id
    while True:
        outgoing = g.out_edges(current)
        if not outgoing:
            break
        step = outgoing[int(rng.integers(len(outgoing)))]
        if step.object_id in visited:
            break
        path_edges.append(step)
        visited.append(step.object_id)
        current = step.object_id
    member_ids = set(visited)
    nodes = tuple(n for n in g.nodes if n.id in member_ids)
    return SceneGraph(nodes=nodes, edges=tuple(path_edges), image_id=g.image_id)


def _crop_rect_pixels(box: BBox, width: int, height: int) -> Tuple[int, int, int, int]:
    x0 = int(math.floor(box.x0 * width))
    y0 = int(math.floor(box.y0 * height))
    x1 = max(x0 + 1, int(math.ceil(box.x1 * width)))
    y1 = max(y0 + 1, int(math.ceil(box.y1 * height)))
    return x0, y0, min(x1, width), min(y1, height)


def _renormalize(box: BBox, rect: Tuple[int, int, int, int],
                 width: int, height: int) -> BBox:
    rx0, ry0, rx1, ry1 = rect
    cw, ch = rx1 - rx0, ry1 - ry0
    return BBox(
        x0=min(1.0, max(0.0, (box.x0 * width - rx0) / cw)),
        y0=min(1.0, max(0.0, (box.y0 * height - ry0) / ch)),
        x1=min(1.0, max(0.0, (box.x1 * width - rx0) / cw)),
        y1=min(1.0, max(0.0, (box.y1 * height - ry0) / ch)),
    )


def crop_and_densify(pair: ImageSGPair, g1: SceneGraph,
                     base_dir: Union[str, Path, None] = None) -> ImageSGPair:
    """Crop the image to g1's node boxes and re-add residual content.

    The crop rectangle is the union of g1's boxes. Every residual node of
    the full graph whose box lies fully inside the crop is added back,
    together with residual edges whose endpoints are both present. All
    boxes are re-expressed in the crop frame and clamped to [0, 1].
    """
    pixels = pair.image.load(base_dir)
    height, width = pixels.shape[:2]
    g1_boxes = [n.box for n in g1.nodes]
    crop = union_box(g1_boxes)
    rect = _crop_rect_pixels(crop, width, height)
    rx0, ry0, rx1, ry1 = rect
    cropped = pixels[ry0:ry1, rx0:rx1]
    crop_frame = BBox(rx0 / width, ry0 / height, rx1 / width, ry1 / height)

    g1_ids = {n.id for n in g1.nodes}
    kept_ids: Set[int] = set(g1_ids)
    for node in pair.graph.nodes:
        if node.id not in g1_ids and crop_frame.contains(node.box):
            kept_ids.add(node.id)

    g1_triples = {e.triple() for e in g1.edges}
    nodes = tuple(
        ObjectNode(id=n.id, category=n.category, attributes=n.attributes,
                   box=_renormalize(n.box, rect, width, height))
        for n in pair.graph.nodes if n.id in kept_ids
    )
    edges = tuple(g1.edges) + tuple(
        e for e in pair.graph.edges
        if e.triple() not in g1_triples
        and e.subject_id in kept_ids and e.object_id in kept_ids
    )
    graph = SceneGraph(nodes=nodes, edges=edges, image_id=pair.graph.image_id)
    return ImageSGPair(image=ImageRef(pixels=np.ascontiguousarray(cropped)), graph=graph)


def accept_subgraph(g1: SceneGraph, cfg: RuleConfig) -> bool:
    """Size filter: both node count and edge count bounded by max_objects."""
    return g1.n <= cfg.max_objects and g1.m <= cfg.max_objects


def _component_path_order(component: SceneGraph) -> List[RelationEdge]:
    """Order a path component's edges from its source node to its sink."""
    out_by_subject: Dict[int, List[RelationEdge]] = {}
    in_degree = {n.id: 0 for n in component.nodes}
    for e in component.edges:
        out_by_subject.setdefault(e.subject_id, []).append(e)
        in_degree[e.object_id] += 1
    if any(len(v) > 1 for v in out_by_subject.values()) or any(d > 1 for d in in_degree.values()):
        raise NotAPathError(f"component of {component.image_id!r} is not a directed path")
    starts = [n.id for n in component.nodes if in_degree[n.id] == 0 and n.id in out_by_subject]
    if len(starts) != 1 or len(component.edges) != len(component.nodes) - 1:
        raise NotAPathError(f"component of {component.image_id!r} is not a directed path")
    ordered = []
    current = starts[0]
    while current in out_by_subject:
        edge = out_by_subject[current][0]
        ordered.append(edge)
        current = edge.object_id
    if len(ordered) != len(component.edges):
        raise NotAPathError(f"component of {component.image_id!r} is not a directed path")
    return ordered


def graph_to_caption(g: SceneGraph) -> str:
    """Render a graph whose components are directed paths as one caption.

    Each edge becomes "<attrs> <category> <predicate> <attrs> <category>";
    a node spanning consecutive edges has its phrase repeated. Components
    are joined by ". " and the caption ends with a period. An isolated
    node contributes just its phrase.
    """
    parts = []
    for component in connected_components(g):
        if not component.edges:
            parts.append(component.nodes[0].phrase())
            continue
        words: List[str] = []
        for edge in _component_path_order(component):
            words.append(component.node_by_id(edge.subject_id).phrase())
            words.append(edge.predicate)
            words.append(component.node_by_id(edge.object_id).phrase())
        parts.append(" ".join(words))
    if not parts:
        raise ValueError("cannot caption an empty graph")
    return ". ".join(parts) + "."


def caption_in_stored_order(g: SceneGraph) -> str:
    """Caption emitting edges in stored order, without the path requirement.

    Mutated graphs are captioned this way: a subgraph extracted by the
    random walk stores its edges in path order, so after a mutation the
    emission is the positive caption with just the mutated edge altered,
    even when an asymmetric swap broke the path structure.
    """
    with_edges: List[str] = []
    touched = set()
    for edge in g.edges:
        subj, obj = g.node_by_id(edge.subject_id), g.node_by_id(edge.object_id)
        with_edges.append(f"{subj.phrase()} {edge.predicate} {obj.phrase()}")
        touched.add(edge.subject_id)
        touched.add(edge.object_id)
    parts = [" ".join(with_edges)] if with_edges else []
    parts += [n.phrase() for n in g.nodes if n.id not in touched]
    if not parts:
        raise ValueError("cannot caption an empty graph")
    return ". ".join(parts) + "."


def _replace_edge(g: SceneGraph, index: int, new_edge: RelationEdge) -> SceneGraph:
    edges = list(g.edges)
    edges[index] = new_edge
    return SceneGraph(nodes=g.nodes, edges=tuple(edges), image_id=g.image_id)


def _replace_attr(g: SceneGraph, node_id: int, attr_idx: int, value: str) -> SceneGraph:
    nodes = []
    for node in g.nodes:
        if node.id == node_id:
            attrs = list(node.attributes)
            attrs[attr_idx] = Attribute(tag=attrs[attr_idx].tag, value=value)
            node = ObjectNode(id=node.id, category=node.category,
                              attributes=tuple(attrs), box=node.box)
        nodes.append(node)
    return SceneGraph(nodes=tuple(nodes), edges=g.edges, image_id=g.image_id)


def apply_negative_rule(g: SceneGraph, rule: NegativeRule, cfg: RuleConfig,
                        rng: np.random.Generator) -> Optional[SceneGraph]:
    """Apply one mutation of the given kind, or return None when no site exists.

    Candidate sites are enumerated in graph order and chosen uniformly; the
    RNG is consumed only when at least one site exists, so replaying a seed
    reproduces the choice sequence exactly.
    """
    triples = {e.triple() for e in g.edges}

    if rule is NegativeRule.ASYMMETRIC_SWAP:
        candidates = []
        for i, e in enumerate(g.edges):
            if e.predicate not in cfg.asymmetric_predicates:
                continue
            reversed_triple = (e.object_id, e.predicate, e.subject_id)
            if reversed_triple in triples:
                continue
            if g.node_by_id(e.subject_id).phrase() == g.node_by_id(e.object_id).phrase():
                continue
            candidates.append(i)
        if not candidates:
            return None
        i = candidates[int(rng.integers(len(candidates)))]
        e = g.edges[i]
        return _replace_edge(g, i, RelationEdge(e.object_id, e.predicate, e.subject_id))

    if rule is NegativeRule.RELATION_FALSIFY:
        candidates = []
        for i, e in enumerate(g.edges):
            pool = [p for p in cfg.predicate_replacements.get(e.predicate, ())
                    if (e.subject_id, p, e.object_id) not in triples]
            if pool:
                candidates.append((i, tuple(pool)))
        if not candidates:
            return None
        i, pool = candidates[int(rng.integers(len(candidates)))]
        new_pred = pool[int(rng.integers(len(pool)))]
        e = g.edges[i]
        return _replace_edge(g, i, RelationEdge(e.subject_id, new_pred, e.object_id))

    if rule is NegativeRule.ATTRIBUTE_FALSIFY:
        candidates = []
        for node in g.nodes:
            for ai, attr in enumerate(node.attributes):
                pool = [v for v in cfg.attribute_pools.get(attr.tag, ()) if v != attr.value]
                if pool:
                    candidates.append((node.id, ai, tuple(pool)))
        if not candidates:
            return None
        node_id, ai, pool = candidates[int(rng.integers(len(candidates)))]
        value = pool[int(rng.integers(len(pool)))]
        return _replace_attr(g, node_id, ai, value)

    if rule is NegativeRule.ATTRIBUTE_SWAP:
        sites = []  # (node_id, attr_idx, value) per attribute, grouped by tag below
        by_tag: Dict[str, List[Tuple[int, int, str]]] = {}
        for node in g.nodes:
            for ai, attr in enumerate(node.attributes):
                by_tag.setdefault(attr.tag, []).append((node.id, ai, attr.value))
        for tag_sites in by_tag.values():
            for a in range(len(tag_sites)):
                for b in range(a + 1, len(tag_sites)):
                    na, _, va = tag_sites[a]
                    nb, _, vb = tag_sites[b]
                    if na != nb and va != vb:
                        sites.append((tag_sites[a], tag_sites[b]))
        if not sites:
            return None
        (na, ia, va), (nb, ib, vb) = sites[int(rng.integers(len(sites)))]
        mutated = _replace_attr(g, na, ia, vb)
        return _replace_attr(mutated, nb, ib, va)

    raise ValueError(f"unknown rule {rule!r}")


def sample_caption_pair(g: SceneGraph, cfg: RuleConfig,
                        rng: np.random.Generator) -> CaptionPair:
    """Caption the graph and one randomly-chosen applicable negative mutation.

    Rules are drawn uniformly without replacement until one applies.
    """
    positive = graph_to_caption(g)
    order = rng.permutation(len(ALL_RULES))
    for rule_idx in order:
        rule = ALL_RULES[int(rule_idx)]
        mutated = apply_negative_rule(g, rule, cfg, rng)
        if mutated is not None:
            return CaptionPair(positive=positive,
                               negative=graph_to_caption(mutated), rule=rule)
    raise NoNegativeError("no negative derivable: no rule is applicable to this graph")
