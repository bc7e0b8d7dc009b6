"""Synthetic compositional scenes: flat-color shapes with exact scene graphs.

The renderer is pixel-deterministic (no anti-aliasing); every emitted
relation is geometrically true of the rendered boxes, and attribute values
(color, size) are grounded in the drawn pixels. Paired swap samples probe
whether a model binds attributes to objects and reads relation direction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .graph import Attribute, BBox, ImageRef, ImageSGPair, ObjectNode, RelationEdge, SceneGraph
from .pipeline import RuleConfig, graph_to_caption

COLOR_RGB: Dict[str, Tuple[int, int, int]] = {
    "red": (220, 50, 40),
    "green": (60, 180, 75),
    "blue": (0, 110, 220),
    "yellow": (240, 220, 50),
    "purple": (150, 60, 190),
    "orange": (245, 130, 40),
}

OPPOSITE_PREDICATE = {
    "left of": "right of",
    "right of": "left of",
    "above": "below",
    "below": "above",
}


@dataclass(frozen=True)
class SyntheticConfig:
    shapes: Tuple[str, ...] = ("circle", "square", "triangle")
    colors: Tuple[str, ...] = ("red", "green", "blue", "yellow", "purple", "orange")
    sizes: Tuple[str, ...] = ("small", "large")
    predicates: Tuple[str, ...] = ("left of", "right of", "above", "below")
    min_objects: int = 2
    max_objects: int = 5
    image_size: int = 32
    size_attribute_prob: float = 0.5
    seed: int = 0

    def lexicon(self) -> List[str]:
        words: List[str] = []
        for group in (self.shapes, self.colors, self.sizes):
            words.extend(group)
        for p in self.predicates:
            words.extend(p.split())
        words += ["and", "."]
        return list(dict.fromkeys(words))

    def rule_config(self) -> RuleConfig:
        return RuleConfig(
            asymmetric_predicates=frozenset(self.predicates),
            predicate_replacements={p: (OPPOSITE_PREDICATE[p],)
                                    for p in self.predicates if p in OPPOSITE_PREDICATE},
            attribute_pools={"color": tuple(self.colors), "size": tuple(self.sizes)},
            max_objects=10,
        )

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "SyntheticConfig":
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
        known = set(cls.__dataclass_fields__)
        raw = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
        return cls(**{k: v for k, v in raw.items() if k in known})


@dataclass(frozen=True)
class PlacedShape:
    shape: str
    color: str
    cx: int
    cy: int
    half: int      # half-extent in pixels

    @property
    def box_px(self) -> Tuple[int, int, int, int]:
        return (self.cx - self.half, self.cy - self.half,
                self.cx + self.half, self.cy + self.half)

    def size_class(self, threshold: int) -> str:
        return "small" if self.half <= threshold else "large"


def _draw(canvas: np.ndarray, s: PlacedShape) -> None:
    size = canvas.shape[0]
    ys, xs = np.mgrid[0:size, 0:size]
    if s.shape == "circle":
        mask = (xs - s.cx) ** 2 + (ys - s.cy) ** 2 <= s.half ** 2
    elif s.shape == "square":
        mask = (np.abs(xs - s.cx) <= s.half) & (np.abs(ys - s.cy) <= s.half)
    elif s.shape == "triangle":
        rel_y = ys - (s.cy - s.half)
        mask = (rel_y >= 0) & (rel_y <= 2 * s.half) & (np.abs(xs - s.cx) * 2 <= rel_y)
    else:
        raise ValueError(f"unknown shape {s.shape!r}")
    canvas[mask] = COLOR_RGB[s.color]


def render(shapes: Sequence[PlacedShape], image_size: int) -> np.ndarray:
    canvas = np.zeros((image_size, image_size, 3), dtype=np.uint8)
    for s in shapes:
        _draw(canvas, s)
    return canvas


def _boxes_overlap(a: Tuple[int, int, int, int], b: Tuple[int, int, int, int],
                   margin: int = 1) -> bool:
    return not (a[2] + margin < b[0] or b[2] + margin < a[0]
                or a[3] + margin < b[1] or b[3] + margin < a[1])


def _place_shapes(cfg: SyntheticConfig, rng: np.random.Generator,
                  count: int) -> List[PlacedShape]:
    size = cfg.image_size
    lo, hi = max(3, size // 11), max(4, size // 6)
    placed: List[PlacedShape] = []
    for _ in range(count):
        for _attempt in range(60):
            half = int(rng.integers(lo, hi + 1))
            cx = int(rng.integers(half, size - half))
            cy = int(rng.integers(half, size - half))
            cand = PlacedShape(
                shape=cfg.shapes[int(rng.integers(len(cfg.shapes)))],
                color=cfg.colors[int(rng.integers(len(cfg.colors)))],
                cx=cx, cy=cy, half=half,
            )
            if all(not _boxes_overlap(cand.box_px, p.box_px) for p in placed):
                placed.append(cand)
                break
    return placed


def _normalized_box(px_box: Tuple[int, int, int, int], size: int) -> BBox:
    x0, y0, x1, y1 = px_box
    return BBox(x0 / size, y0 / size, (x1 + 1) / size, (y1 + 1) / size)


def _true_edge(a_idx: int, b_idx: int, a: PlacedShape, b: PlacedShape,
               rng: np.random.Generator) -> RelationEdge:
    """One geometrically true relation for a shape pair, on the dominant axis."""
    dx, dy = b.cx - a.cx, b.cy - a.cy
    if abs(dx) >= abs(dy):
        left_first = dx > 0
        subj, obj = (a_idx, b_idx) if left_first else (b_idx, a_idx)
        if rng.integers(2):
            return RelationEdge(subj, "left of", obj)
        return RelationEdge(obj, "right of", subj)
    top_first = dy > 0
    subj, obj = (a_idx, b_idx) if top_first else (b_idx, a_idx)
    if rng.integers(2):
        return RelationEdge(subj, "above", obj)
    return RelationEdge(obj, "below", subj)


def gen_synthetic_scene(cfg: SyntheticConfig, rng: np.random.Generator,
                        image_id: str = "") -> ImageSGPair:
    """Render one scene and emit its exact graph (tight boxes, true relations)."""
    count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    placed = _place_shapes(cfg, rng, count)
    size_threshold = (max(3, cfg.image_size // 11) + max(4, cfg.image_size // 6)) // 2
    nodes = []
    for i, s in enumerate(placed):
        attrs = [Attribute("color", s.color)]
        if rng.random() < cfg.size_attribute_prob:
            attrs.append(Attribute("size", s.size_class(size_threshold)))
        nodes.append(ObjectNode(id=i, category=s.shape, attributes=tuple(attrs),
                                box=_normalized_box(s.box_px, cfg.image_size)))
    edges = []
    for i in range(len(placed)):
        for j in range(i + 1, len(placed)):
            edges.append(_true_edge(i, j, placed[i], placed[j], rng))
    graph = SceneGraph(nodes=tuple(nodes), edges=tuple(edges), image_id=image_id)
    return ImageSGPair(image=ImageRef(pixels=render(placed, cfg.image_size)), graph=graph)


def plain_caption(graph: SceneGraph, rng: np.random.Generator) -> str:
    """Bag-style caption: node phrases in random order joined by "and"."""
    phrases = [n.phrase() for n in graph.nodes]
    order = rng.permutation(len(phrases))
    return " and ".join(phrases[i] for i in order) + "."


@dataclass(frozen=True, eq=False)
class WinogroundSample:
    """Two image-text pairs with swapped content: each caption describes
    exactly one of the two images."""

    image_0: np.ndarray
    image_1: np.ndarray
    caption_0: str
    caption_1: str
    category: str    # "relation" or "attribute"


def _two_shape_scene(cfg: SyntheticConfig, rng: np.random.Generator,
                     predicate: str) -> Tuple[PlacedShape, PlacedShape]:
    """Two non-overlapping shapes arranged so `a predicate b` holds with margin."""
    size = cfg.image_size
    lo, hi = max(3, size // 11), max(4, size // 6)
    cats = rng.choice(len(cfg.shapes), size=2, replace=False)
    cols = rng.choice(len(cfg.colors), size=2, replace=False)
    for _ in range(100):
        halves = rng.integers(lo, hi + 1, size=2)
        h0, h1 = int(halves[0]), int(halves[1])
        if predicate in ("left of", "right of"):
            mid = size // 2
            c0 = (int(rng.integers(h0, mid - h0)), int(rng.integers(h0, size - h0)))
            c1 = (int(rng.integers(mid + h1, size - h1)), int(rng.integers(h1, size - h1)))
            if predicate == "right of":
                c0, c1 = c1, c0
        else:
            mid = size // 2
            c0 = (int(rng.integers(h0, size - h0)), int(rng.integers(h0, mid - h0)))
            c1 = (int(rng.integers(h1, size - h1)), int(rng.integers(mid + h1, size - h1)))
            if predicate == "below":
                c0, c1 = c1, c0
        a = PlacedShape(cfg.shapes[int(cats[0])], cfg.colors[int(cols[0])],
                        c0[0], c0[1], h0)
        b = PlacedShape(cfg.shapes[int(cats[1])], cfg.colors[int(cols[1])],
                        c1[0], c1[1], h1)
        if not _boxes_overlap(a.box_px, b.box_px):
            return a, b
    raise RuntimeError("could not place a two-shape scene")


def _pair_graph(a: PlacedShape, b: PlacedShape, predicate: str,
                cfg: SyntheticConfig, image_id: str) -> SceneGraph:
    nodes = tuple(
        ObjectNode(id=i, category=s.shape, attributes=(Attribute("color", s.color),),
                   box=_normalized_box(s.box_px, cfg.image_size))
        for i, s in enumerate((a, b))
    )
    return SceneGraph(nodes=nodes, edges=(RelationEdge(0, predicate, 1),),
                      image_id=image_id)


def _restyle(template: PlacedShape, source: PlacedShape) -> PlacedShape:
    """Shape identity from `source` at the placement of `template`."""
    return PlacedShape(source.shape, source.color, template.cx, template.cy,
                       template.half)


def gen_winoground_sample(cfg: SyntheticConfig, rng: np.random.Generator,
                          sample_id: str = "") -> WinogroundSample:
    """One swap pair. The second image is an independent rendering (fresh
    positions and sizes); only the structure the captions pin down, the
    relation direction and the color binding, differs between the two."""
    predicate = cfg.predicates[int(rng.integers(len(cfg.predicates)))]
    a, b = _two_shape_scene(cfg, rng, predicate)
    fresh_a, fresh_b = _two_shape_scene(cfg, rng, predicate)
    if rng.integers(2):
        # relation swap: the same two objects, now "b predicate a"
        a1 = _restyle(fresh_a, b)
        b1 = _restyle(fresh_b, a)
        g1 = _pair_graph(a1, b1, predicate, cfg, sample_id)
        category = "relation"
    else:
        # attribute swap: same relation, colors exchanged between the objects
        a1 = PlacedShape(a.shape, b.color, fresh_a.cx, fresh_a.cy, fresh_a.half)
        b1 = PlacedShape(b.shape, a.color, fresh_b.cx, fresh_b.cy, fresh_b.half)
        g1 = _pair_graph(a1, b1, predicate, cfg, sample_id)
        category = "attribute"
    g0 = _pair_graph(a, b, predicate, cfg, sample_id)
    return WinogroundSample(
        image_0=render((a, b), cfg.image_size),
        image_1=render((a1, b1), cfg.image_size),
        caption_0=graph_to_caption(g0),
        caption_1=graph_to_caption(g1),
        category=category,
    )


def gen_winoground_set(cfg: SyntheticConfig, rng: np.random.Generator,
                       count: int) -> List[WinogroundSample]:
    if count < 1:
        raise ValueError("count must be >= 1")
    return [gen_winoground_sample(cfg, rng, sample_id=f"wino-{i:06d}")
            for i in range(count)]
