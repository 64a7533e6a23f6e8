"""Region-level image representations from a synthetic detector substitute,
plus confidence filtering and the anchor-overlap region-masking strategy.

A scene is a set of detected regions (normalized boxes, feature vectors,
class distributions) whose ground-truth graph renders the caption. Region
features are a fixed embedding of (class, attribute) plus seeded noise, so
scenes with shared content land near each other in feature space without
any real image decoding.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError, EmptySceneError, InputError
from .grammar import CaptionGrammar, SceneGraph
from .rng import as_generator

DEFAULT_CONF_THRESHOLD = 0.2
DEFAULT_MAX_BOXES = 100  # full-scale default; desk configs use 10
REGION_MASK_RATE = 0.15
OVERLAP_MASK_THRESHOLD = 0.3


@dataclass(frozen=True)
class RegionBox:
    """Normalized box corners; x1 < x2 and y1 < y2 with positive area."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (
            0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0
        ):
            raise InputError(f"degenerate or out-of-range box {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def geometry(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2, self.area])


def overlap_ratio(candidate: RegionBox, anchor: RegionBox) -> float:
    """Fraction of the candidate's area covered by the anchor: 0 when
    disjoint, 1 when the candidate lies inside the anchor."""
    ix = max(0.0, min(candidate.x2, anchor.x2) - max(candidate.x1, anchor.x1))
    iy = max(0.0, min(candidate.y2, anchor.y2) - max(candidate.y1, anchor.y1))
    return (ix * iy) / candidate.area


@dataclass
class RegionSet:
    """Detected regions of one image: boxes, d_v-dim features, K-way class
    distributions. Lists agree in length; distributions sum to 1."""

    boxes: list[RegionBox]
    features: np.ndarray
    class_dist: np.ndarray

    def __post_init__(self):
        t = len(self.boxes)
        self.features = np.asarray(self.features, dtype=np.float64).reshape(t, -1)
        self.class_dist = np.asarray(self.class_dist, dtype=np.float64).reshape(t, -1)
        if not np.all(np.isfinite(self.features)):
            raise InputError("region features must be finite")
        if t and not np.all(np.abs(self.class_dist.sum(axis=1) - 1.0) <= 1e-6):
            raise InputError("class distributions must sum to 1 (within 1e-6)")

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def confidences(self) -> np.ndarray:
        return self.class_dist.max(axis=1) if len(self.boxes) else np.zeros(0)

    @property
    def labels(self) -> np.ndarray:
        return self.class_dist.argmax(axis=1)

    def subset(self, indices) -> "RegionSet":
        indices = list(indices)
        return RegionSet(
            boxes=[self.boxes[i] for i in indices],
            features=self.features[indices].copy(),
            class_dist=self.class_dist[indices].copy(),
        )


@dataclass
class SyntheticScene:
    """A generated image stand-in: regions plus the ground-truth graph the
    caption was rendered from."""

    regions: RegionSet
    graph: SceneGraph


@dataclass(frozen=True)
class SceneConfig:
    """Vocabularies and shape/noise knobs for the synthetic detector."""

    objects: tuple = ()
    attributes: tuple = ()
    relations: tuple = ()
    object_weights: tuple | None = None
    d_v: int = 32
    n_classes: int = 16
    max_regions: int = 10
    max_objects: int = 4
    attr_prob: float = 0.9
    relation_prob: float = 0.8
    extra_region_prob: float = 0.45
    low_conf_prob: float = 0.15
    high_conf: float = 0.97
    feature_scale: float = 0.5
    feature_noise: float = 0.1

    def __post_init__(self):
        if not (self.objects and self.attributes and self.relations):
            raise ConfigError("scene vocabularies must be nonempty")
        if len(self.objects) > self.n_classes:
            raise ConfigError("more object kinds than detector classes")
        if self.object_weights is not None and len(self.object_weights) != len(self.objects):
            raise ConfigError("object_weights must match the object vocabulary")

    def grammar(self) -> CaptionGrammar:
        return CaptionGrammar(self.objects, self.attributes, self.relations)

    def class_of(self, obj: str) -> int:
        return self.objects.index(obj)


def default_scene_config(**overrides) -> SceneConfig:
    from . import grammar as g

    base = dict(
        objects=g.DEFAULT_OBJECTS, attributes=g.DEFAULT_ATTRIBUTES, relations=g.DEFAULT_RELATIONS
    )
    base.update(overrides)
    return SceneConfig(**base)


@lru_cache(maxsize=8)
def _embedding_tables(objects, attributes, d_v, scale):
    """Fixed per-(class, attribute) feature embeddings shared by all scenes."""
    import zlib

    entropy = zlib.crc32(("|".join(objects) + "#" + "|".join(attributes) + f"#{d_v}").encode())
    g = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
    class_vecs = g.normal(size=(len(objects), d_v)) * scale
    attr_vecs = g.normal(size=(len(attributes) + 1, d_v)) * (scale * 0.5)  # last row: no attr
    return class_vecs, attr_vecs


def _sample_box(gen) -> RegionBox:
    w = float(gen.uniform(0.15, 0.45))
    h = float(gen.uniform(0.15, 0.45))
    x1 = float(gen.uniform(0.0, 1.0 - w))
    y1 = float(gen.uniform(0.0, 1.0 - h))
    return RegionBox(round(x1, 6), round(y1, 6), round(x1 + w, 6), round(y1 + h, 6))


def _jittered_overlap_box(gen, base: RegionBox) -> RegionBox:
    """A duplicate-detection box substantially overlapping the base box."""
    w = base.x2 - base.x1
    h = base.y2 - base.y1
    dx = float(gen.uniform(-0.3, 0.3)) * w
    dy = float(gen.uniform(-0.3, 0.3)) * h
    sx = float(gen.uniform(0.6, 1.1))
    sy = float(gen.uniform(0.6, 1.1))
    x1 = min(max(base.x1 + dx, 0.0), 0.98)
    y1 = min(max(base.y1 + dy, 0.0), 0.98)
    x2 = min(x1 + w * sx, 1.0)
    y2 = min(y1 + h * sy, 1.0)
    if x2 - x1 < 1e-3:
        x2 = min(x1 + 1e-3, 1.0)
    if y2 - y1 < 1e-3:
        y2 = min(y1 + 1e-3, 1.0)
    return RegionBox(round(x1, 6), round(y1, 6), round(x2, 6), round(y2, 6))


def generate_synthetic_scene(config: SceneConfig, rng) -> tuple[SyntheticScene, str]:
    """Sample a scene graph, its caption, and overlapping region detections.

    Deterministic per rng stream; every graph object appears as the argmax
    class of at least one region."""
    gen = as_generator(rng)
    n_obj = int(gen.integers(1, min(config.max_objects, len(config.objects)) + 1))
    p = None
    if config.object_weights is not None:
        w = np.asarray(config.object_weights, dtype=np.float64)
        p = w / w.sum()
    class_ids = gen.choice(len(config.objects), size=n_obj, replace=False, p=p)
    names = [config.objects[int(c)] for c in class_ids]

    attributes = []
    attr_index: dict[str, int | None] = {}
    for name in names:
        if gen.random() < config.attr_prob:
            k = int(gen.integers(0, len(config.attributes)))
            attributes.append((name, config.attributes[k]))
            attr_index[name] = k
        else:
            attr_index[name] = None
    relations = []
    for i in range(1, n_obj):
        if gen.random() < config.relation_prob:
            rel = config.relations[int(gen.integers(0, len(config.relations)))]
            relations.append((names[i - 1], rel, names[i]))
    graph = SceneGraph(objects=list(names), attributes=attributes, relations=relations)
    caption = config.grammar().render(graph)

    class_vecs, attr_vecs = _embedding_tables(
        config.objects, config.attributes, config.d_v, config.feature_scale
    )
    boxes: list[RegionBox] = []
    feats: list[np.ndarray] = []
    dists: list[np.ndarray] = []

    def add_region(name: str, box: RegionBox, low_conf: bool) -> None:
        cls = config.class_of(name)
        ai = attr_index[name]
        base = class_vecs[cls] + attr_vecs[-1 if ai is None else ai]
        feats.append(base + gen.normal(size=config.d_v) * config.feature_noise)
        conf = float(gen.uniform(0.05, 0.19)) if low_conf else config.high_conf
        dist = np.full(config.n_classes, (1.0 - conf) / (config.n_classes - 1))
        dist[cls] = conf
        dists.append(dist)
        boxes.append(box)

    primaries = {}
    for name in names:
        box = _sample_box(gen)
        primaries[name] = box
        add_region(name, box, low_conf=False)
    while len(boxes) < config.max_regions:
        if gen.random() >= config.extra_region_prob:
            break
        name = names[int(gen.integers(0, n_obj))]
        box = _jittered_overlap_box(gen, primaries[name])
        add_region(name, box, low_conf=gen.random() < config.low_conf_prob)

    regions = RegionSet(boxes=boxes, features=np.array(feats), class_dist=np.array(dists))
    return SyntheticScene(regions=regions, graph=graph), caption


def select_regions(
    detections: RegionSet,
    conf_threshold: float = DEFAULT_CONF_THRESHOLD,
    max_boxes: int = DEFAULT_MAX_BOXES,
) -> RegionSet:
    """Keep regions whose max class probability exceeds the threshold, then
    truncate to max_boxes by descending confidence (stable on ties)."""
    conf = detections.confidences
    kept = [i for i in range(len(detections)) if conf[i] > conf_threshold]
    if not kept:
        raise EmptySceneError("all regions fell below the confidence threshold")
    kept.sort(key=lambda i: (-conf[i], i))
    return detections.subset(kept[:max_boxes])


@dataclass
class RegionMaskPlan:
    """Anchors plus every region they co-mask, with reconstruction targets.

    Applying the plan zeroes masked feature rows; boxes stay visible so the
    model can localize its predictions."""

    anchor_indices: list[int]
    masked_indices: list[int]
    feature_targets: np.ndarray
    class_targets: np.ndarray

    def is_empty(self) -> bool:
        return not self.masked_indices


def sample_region_mask(
    regions: RegionSet,
    rng,
    mask_rate: float = REGION_MASK_RATE,
    overlap_threshold: float = OVERLAP_MASK_THRESHOLD,
) -> RegionMaskPlan:
    """Draw anchors independently at `mask_rate`, then co-mask every region
    whose overlap ratio with any anchor exceeds `overlap_threshold`."""
    gen = as_generator(rng)
    t = len(regions)
    draws = gen.random(t)
    anchors = [i for i in range(t) if draws[i] < mask_rate]
    masked = set(anchors)
    for a in anchors:
        for i in range(t):
            if i not in masked and overlap_ratio(regions.boxes[i], regions.boxes[a]) > overlap_threshold:
                masked.add(i)
    masked_sorted = sorted(masked)
    return RegionMaskPlan(
        anchor_indices=anchors,
        masked_indices=masked_sorted,
        feature_targets=regions.features[masked_sorted].copy(),
        class_targets=regions.class_dist[masked_sorted].copy(),
    )


def apply_region_mask(regions: RegionSet, plan: RegionMaskPlan) -> RegionSet:
    """New RegionSet with the plan's feature rows replaced by zeros."""
    feats = regions.features.copy()
    if plan.masked_indices:
        feats[plan.masked_indices] = 0.0
    return RegionSet(boxes=list(regions.boxes), features=feats, class_dist=regions.class_dist.copy())


# -- scene records on disk -------------------------------------------------------


@dataclass
class SceneRecord:
    """One image record in a line-delimited scene file."""

    id: str
    regions: RegionSet
    caption: str
    graph: SceneGraph | None = None

    def to_json(self) -> str:
        doc = {
            "id": self.id,
            "caption": self.caption,
            "boxes": [[b.x1, b.y1, b.x2, b.y2] for b in self.regions.boxes],
            "features": self.regions.features.tolist(),
            "class_dist": self.regions.class_dist.tolist(),
            "graph": self.graph.to_dict() if self.graph is not None else None,
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "SceneRecord":
        doc = json.loads(line)
        regions = RegionSet(
            boxes=[RegionBox(*b) for b in doc["boxes"]],
            features=np.array(doc["features"], dtype=np.float64),
            class_dist=np.array(doc["class_dist"], dtype=np.float64),
        )
        graph = SceneGraph.from_dict(doc["graph"]) if doc.get("graph") else None
        return cls(id=doc["id"], regions=regions, caption=doc["caption"], graph=graph)


SCENE_FILE_VERSION = "vlpt-scenes 1"


def write_scene_file(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": SCENE_FILE_VERSION}) + "\n")
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_scene_file(path) -> list[SceneRecord]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        try:
            if json.loads(header).get("format") != SCENE_FILE_VERSION:
                raise InputError(f"{path}: unsupported scene file version")
        except json.JSONDecodeError as e:
            raise InputError(f"{path}: not a scene file") from e
        return [SceneRecord.from_json(line) for line in fh if line.strip()]
