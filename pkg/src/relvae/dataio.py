"""Scene records, embedding tables, synthetic scene generation, few-shot splits.

File formats
------------
* ``scenes.jsonl``   one JSON scene object per line.
* ``embeddings.tsv`` ``label<TAB>v1<TAB>...<TAB>vD``.
* ``split.json``     ``{"k", "seed", "items": {predicate: [[image_id, rel_idx]]}, "deficit"}``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image, ImageDraw

__all__ = [
    "BBox", "ObjectInstance", "RelationTriplet", "SceneRecord", "EmbeddingTable",
    "FewShotSplit", "ContextInput", "SynthConfig",
    "DataError", "SceneParseError", "SceneValidationError", "EmbeddingError", "UnknownLabelError",
    "load_scenes", "write_scenes", "load_embeddings", "write_embeddings",
    "generate_synthetic_dataset", "build_fewshot_split", "rare_predicate_subset",
    "iter_contexts", "scene_image", "save_split", "load_split",
]


class DataError(ValueError):
    """Base class for dataset validation and parse failures."""


class SceneParseError(DataError):
    pass


class SceneValidationError(DataError):
    def __init__(self, scene_id: str, fld: str, message: str):
        super().__init__(f"scene {scene_id!r}, field {fld!r}: {message}")
        self.scene_id = scene_id
        self.field = fld


class EmbeddingError(DataError):
    pass


class UnknownLabelError(DataError):
    pass


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixel coordinates, origin top-left."""

    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def intersection_area(self, other: "BBox") -> float:
        w = min(self.x2, other.x2) - max(self.x1, other.x1)
        h = min(self.y2, other.y2) - max(self.y1, other.y1)
        return max(0.0, w) * max(0.0, h)

    def iou(self, other: "BBox") -> float:
        inter = self.intersection_area(other)
        union = self.area + other.area - inter
        return inter / union if union > 0 else 0.0

    def union_box(self, other: "BBox") -> "BBox":
        return BBox(min(self.x1, other.x1), min(self.y1, other.y1),
                    max(self.x2, other.x2), max(self.y2, other.y2))

    def contains(self, other: "BBox") -> bool:
        return (other.x1 >= self.x1 and other.y1 >= self.y1
                and other.x2 <= self.x2 and other.y2 <= self.y2)

    def validate(self, scene_id: str, width: float, height: float) -> None:
        if not (0 <= self.x1 < self.x2 <= width):
            raise SceneValidationError(scene_id, "bbox", f"x span [{self.x1}, {self.x2}] invalid for width {width}")
        if not (0 <= self.y1 < self.y2 <= height):
            raise SceneValidationError(scene_id, "bbox", f"y span [{self.y1}, {self.y2}] invalid for height {height}")


@dataclass(frozen=True)
class ObjectInstance:
    id: int
    label: str
    bbox: BBox


@dataclass(frozen=True)
class RelationTriplet:
    subject_id: int
    object_id: int
    predicate: str


@dataclass(frozen=True)
class SceneRecord:
    """One image plus its annotated object instances and relation triplets."""

    image_id: str
    width: int
    height: int
    image_source: str
    objects: tuple[ObjectInstance, ...]
    relations: tuple[RelationTriplet, ...]

    def object_by_id(self, oid: int) -> ObjectInstance:
        for o in self.objects:
            if o.id == oid:
                return o
        raise SceneValidationError(self.image_id, "relations", f"object id {oid} not in scene")

    def validate(self) -> None:
        ids = [o.id for o in self.objects]
        if len(ids) != len(set(ids)):
            raise SceneValidationError(self.image_id, "objects", "duplicate object ids")
        for o in self.objects:
            o.bbox.validate(self.image_id, self.width, self.height)
        known = set(ids)
        seen: set[tuple[int, int, str]] = set()
        for r in self.relations:
            if r.subject_id == r.object_id:
                raise SceneValidationError(self.image_id, "relations", f"subject == object ({r.subject_id})")
            for oid in (r.subject_id, r.object_id):
                if oid not in known:
                    raise SceneValidationError(self.image_id, "relations", f"object id {oid} not in scene")
            key = (r.subject_id, r.object_id, r.predicate)
            if key in seen:
                raise SceneValidationError(self.image_id, "relations", f"duplicate triplet {key}")
            seen.add(key)


@dataclass
class EmbeddingTable:
    """Label -> fixed-length real vector; every scene label must resolve here."""

    dim: int
    entries: dict[str, np.ndarray]

    def vector(self, label: str) -> np.ndarray:
        try:
            return self.entries[label]
        except KeyError:
            raise UnknownLabelError(f"label {label!r} not in embedding table") from None

    def __contains__(self, label: str) -> bool:
        return label in self.entries

    def labels(self) -> list[str]:
        return list(self.entries)


@dataclass(frozen=True)
class ContextInput:
    """The <subject, object> pair of one relation, predicate excluded."""

    scene: SceneRecord
    subject: ObjectInstance
    object: ObjectInstance
    relation_index: int | None = None


@dataclass
class FewShotSplit:
    k: int
    seed: int
    items: dict[str, list[tuple[str, int]]]
    deficit_report: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# JSON-lines scene files


def _scene_from_dict(d: dict, line_no: int) -> SceneRecord:
    try:
        objects = tuple(
            ObjectInstance(id=int(o["id"]), label=str(o["label"]), bbox=BBox(*map(float, o["bbox"])))
            for o in d["objects"]
        )
        relations = tuple(
            RelationTriplet(int(r["subject_id"]), int(r["object_id"]), str(r["predicate"]))
            for r in d["relations"]
        )
        return SceneRecord(
            image_id=str(d["image_id"]),
            width=int(d["width"]),
            height=int(d["height"]),
            image_source=str(d["image_source"]),
            objects=objects,
            relations=relations,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneParseError(f"line {line_no}: malformed scene object ({exc})") from exc


def load_scenes(path: str | Path) -> list[SceneRecord]:
    """Load and validate a scenes.jsonl file; invalid records raise, never skip."""
    scenes = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SceneParseError(f"line {line_no}: invalid JSON ({exc.msg})") from exc
            scene = _scene_from_dict(raw, line_no)
            scene.validate()
            scenes.append(scene)
    return scenes


def _scene_to_dict(s: SceneRecord) -> dict:
    return {
        "image_id": s.image_id,
        "width": s.width,
        "height": s.height,
        "image_source": s.image_source,
        "objects": [
            {"id": o.id, "label": o.label, "bbox": [o.bbox.x1, o.bbox.y1, o.bbox.x2, o.bbox.y2]}
            for o in s.objects
        ],
        "relations": [
            {"subject_id": r.subject_id, "object_id": r.object_id, "predicate": r.predicate}
            for r in s.relations
        ],
    }


def write_scenes(scenes: list[SceneRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenes:
            fh.write(json.dumps(_scene_to_dict(s)) + "\n")


# ---------------------------------------------------------------------------
# Embedding tables


def load_embeddings(path: str | Path) -> EmbeddingTable:
    entries: dict[str, np.ndarray] = {}
    dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            label, values = parts[0], parts[1:]
            if label in entries:
                raise EmbeddingError(f"line {line_no}: duplicate label {label!r}")
            try:
                vec = np.array([float(v) for v in values], dtype=np.float32)
            except ValueError as exc:
                raise EmbeddingError(f"line {line_no}: non-numeric value ({exc})") from exc
            if dim is None:
                dim = len(vec)
                if dim == 0:
                    raise EmbeddingError(f"line {line_no}: row has no values")
            elif len(vec) != dim:
                raise EmbeddingError(f"line {line_no}: ragged row ({len(vec)} values, expected {dim})")
            if not np.any(vec):
                raise EmbeddingError(f"line {line_no}: zero vector for label {label!r}")
            entries[label] = vec
    if dim is None:
        raise EmbeddingError("embedding file is empty")
    return EmbeddingTable(dim=dim, entries=entries)


def write_embeddings(table: EmbeddingTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for label, vec in table.entries.items():
            fh.write(label + "\t" + "\t".join(repr(float(v)) for v in vec) + "\n")


def _label_embedding(label: str, dim: int) -> np.ndarray:
    """Unit-norm vector seeded by a stable hash of the label string."""
    seed = int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    return (v / np.linalg.norm(v)).astype(np.float32)


# ---------------------------------------------------------------------------
# Synthetic scenes

SPATIAL_PREDICATES = ("left-of", "right-of", "above", "below",
                      "inside", "larger-than", "same-color-as", "touching")

_COLOR_RGB = {
    "red": (214, 48, 49),
    "green": (56, 166, 83),
    "blue": (46, 94, 214),
    "yellow": (230, 196, 41),
    "purple": (142, 68, 173),
    "orange": (230, 126, 34),
}


@dataclass(frozen=True)
class SynthConfig:
    n_scenes: int = 60
    image_size: int = 64
    colors: tuple[str, ...] = ("red", "green", "blue", "yellow")
    shapes: tuple[str, ...] = ("circle", "square")
    predicates: tuple[str, ...] = SPATIAL_PREDICATES
    min_objects: int = 3
    max_objects: int = 4
    min_size: int = 10
    max_size: int = 26
    nest_prob: float = 0.2
    touch_prob: float = 0.2
    embedding_dim: int = 50
    larger_ratio: float = 1.5

    def categories(self) -> list[str]:
        return [f"{c}-{s}" for c in self.colors for s in self.shapes]


def _color_of(label: str) -> str:
    return label.split("-", 1)[0]


def holds(predicate: str, subj: ObjectInstance, obj: ObjectInstance,
          larger_ratio: float = 1.5) -> bool:
    """Geometric ground truth for one synthetic predicate on a (subject, object) pair."""
    a, b = subj.bbox, obj.bbox
    if predicate == "left-of":
        return a.center[0] < b.center[0] and b.x1 - a.x2 > 0
    if predicate == "right-of":
        return a.center[0] > b.center[0] and a.x1 - b.x2 > 0
    if predicate == "above":
        return a.center[1] < b.center[1] and b.y1 - a.y2 > 0
    if predicate == "below":
        return a.center[1] > b.center[1] and a.y1 - b.y2 > 0
    if predicate == "inside":
        return b.contains(a) and a.area < b.area
    if predicate == "larger-than":
        return a.area > larger_ratio * b.area
    if predicate == "same-color-as":
        return _color_of(subj.label) == _color_of(obj.label)
    if predicate == "touching":
        return (a.intersection_area(b) > 0
                and not a.contains(b) and not b.contains(a))
    raise ValueError(f"unknown synthetic predicate {predicate!r}")


def _place_objects(cfg: SynthConfig, rng: np.random.Generator) -> list[BBox]:
    size = cfg.image_size
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    boxes: list[BBox] = []
    for _ in range(n):
        mode = rng.random()
        placed = None
        if boxes and mode < cfg.nest_prob:
            hosts = [b for b in boxes if b.width >= cfg.min_size + 6 and b.height >= cfg.min_size + 6]
            if hosts:
                host = hosts[int(rng.integers(len(hosts)))]
                w = float(rng.integers(cfg.min_size // 2 + 2, max(int(host.width) - 4, cfg.min_size // 2 + 3)))
                h = float(rng.integers(cfg.min_size // 2 + 2, max(int(host.height) - 4, cfg.min_size // 2 + 3)))
                w = min(w, host.width - 4)
                h = min(h, host.height - 4)
                x1 = host.x1 + 2 + rng.random() * (host.width - w - 4)
                y1 = host.y1 + 2 + rng.random() * (host.height - h - 4)
                placed = BBox(round(x1), round(y1), round(x1) + w, round(y1) + h)
        elif boxes and mode < cfg.nest_prob + cfg.touch_prob:
            anchor = boxes[int(rng.integers(len(boxes)))]
            w = float(rng.integers(cfg.min_size, cfg.max_size + 1))
            h = float(rng.integers(cfg.min_size, cfg.max_size + 1))
            side = int(rng.integers(4))
            overlap = 2.0
            if side == 0:
                x1, y1 = anchor.x2 - overlap, anchor.y1 + rng.random() * 4 - 2
            elif side == 1:
                x1, y1 = anchor.x1 - w + overlap, anchor.y1 + rng.random() * 4 - 2
            elif side == 2:
                x1, y1 = anchor.x1 + rng.random() * 4 - 2, anchor.y2 - overlap
            else:
                x1, y1 = anchor.x1 + rng.random() * 4 - 2, anchor.y1 - h + overlap
            x1 = min(max(x1, 0.0), size - w)
            y1 = min(max(y1, 0.0), size - h)
            cand = BBox(round(x1), round(y1), round(x1) + w, round(y1) + h)
            if cand.intersection_area(anchor) > 0 and not anchor.contains(cand) and not cand.contains(anchor):
                placed = cand
        if placed is None:
            for _ in range(50):
                w = float(rng.integers(cfg.min_size, cfg.max_size + 1))
                h = float(rng.integers(cfg.min_size, cfg.max_size + 1))
                x1 = float(rng.integers(0, size - int(w) + 1))
                y1 = float(rng.integers(0, size - int(h) + 1))
                cand = BBox(x1, y1, x1 + w, y1 + h)
                if all(cand.iou(b) < 0.25 for b in boxes):
                    placed = cand
                    break
            else:
                continue  # crowded scene, drop this object
        boxes.append(placed)
    return boxes


def generate_synthetic_dataset(cfg: SynthConfig, seed: int) -> tuple[list[SceneRecord], EmbeddingTable]:
    """Procedural colored-shape scenes with geometrically derived relations.

    Relations are exhaustive: for every ordered object pair, every
    predicate in ``cfg.predicates`` that geometrically holds is emitted,
    so re-deriving any emitted predicate from the boxes reproduces it.
    Deterministic in (cfg, seed), including file bytes after writing.
    """
    if len(cfg.categories()) < 8:
        raise DataError("need at least 8 object categories")
    if len(cfg.predicates) < 8:
        raise DataError("need at least 8 predicates")
    if cfg.image_size < 2 * cfg.min_size:
        raise DataError(
            f"image_size {cfg.image_size} too small to place requested objects "
            f"(min object size {cfg.min_size})"
        )
    rng = np.random.default_rng(seed)
    categories = cfg.categories()
    scenes: list[SceneRecord] = []
    for i in range(cfg.n_scenes):
        boxes = _place_objects(cfg, rng)
        objects = tuple(
            ObjectInstance(id=j, label=categories[int(rng.integers(len(categories)))], bbox=b)
            for j, b in enumerate(boxes)
        )
        relations = []
        for s in objects:
            for o in objects:
                if s.id == o.id:
                    continue
                for p in cfg.predicates:
                    if holds(p, s, o, cfg.larger_ratio):
                        relations.append(RelationTriplet(s.id, o.id, p))
        scene = SceneRecord(
            image_id=f"synth-{i:05d}",
            width=cfg.image_size,
            height=cfg.image_size,
            image_source="synthetic",
            objects=objects,
            relations=tuple(relations),
        )
        scene.validate()
        scenes.append(scene)
    table = EmbeddingTable(
        dim=cfg.embedding_dim,
        entries={c: _label_embedding(c, cfg.embedding_dim) for c in categories},
    )
    return scenes, table


def scene_image(scene: SceneRecord, root: str | Path | None = None) -> np.ndarray:
    """Raster for a scene as float32 [3, H, W] in [0, 1].

    ``image_source == "synthetic"`` renders the record's shapes; anything
    else is treated as an image path (relative to ``root`` if given).
    """
    if scene.image_source == "synthetic":
        return _render_scene(scene)
    path = Path(scene.image_source)
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    img = Image.open(path).convert("RGB").resize((scene.width, scene.height))
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def _render_scene(scene: SceneRecord) -> np.ndarray:
    img = Image.new("RGB", (scene.width, scene.height), (235, 235, 235))
    draw = ImageDraw.Draw(img)
    # big shapes first so nested ones stay visible
    order = sorted(scene.objects, key=lambda o: (-o.bbox.area, o.id))
    for o in order:
        color, shape = o.label.split("-", 1)
        rgb = _COLOR_RGB.get(color, (90, 90, 90))
        xy = [o.bbox.x1, o.bbox.y1, o.bbox.x2 - 1, o.bbox.y2 - 1]
        outline = tuple(max(0, c - 60) for c in rgb)
        if shape == "circle":
            draw.ellipse(xy, fill=rgb, outline=outline)
        else:
            draw.rectangle(xy, fill=rgb, outline=outline)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


# ---------------------------------------------------------------------------
# Few-shot splits and context streams


def build_fewshot_split(scenes: list[SceneRecord], k: int, seed: int) -> FewShotSplit:
    """Per-predicate uniform sampling of k relation instances, without replacement."""
    if k < 1:
        raise DataError(f"k must be >= 1 (got {k})")
    if not scenes:
        raise DataError("empty dataset")
    pools: dict[str, list[tuple[str, int]]] = {}
    for s in scenes:
        for idx, r in enumerate(s.relations):
            pools.setdefault(r.predicate, []).append((s.image_id, idx))
    rng = np.random.default_rng(seed)
    items: dict[str, list[tuple[str, int]]] = {}
    deficit: list[str] = []
    for pred in sorted(pools):
        pool = pools[pred]
        if len(pool) <= k:
            items[pred] = list(pool)
            if len(pool) < k:
                deficit.append(pred)
        else:
            chosen = rng.choice(len(pool), size=k, replace=False)
            items[pred] = [pool[int(i)] for i in chosen]
    return FewShotSplit(k=k, seed=seed, items=items, deficit_report=deficit)


def save_split(split: FewShotSplit, path: str | Path) -> None:
    payload = {
        "k": split.k,
        "seed": split.seed,
        "items": {p: [[sid, idx] for sid, idx in pairs] for p, pairs in split.items.items()},
        "deficit": split.deficit_report,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_split(path: str | Path) -> FewShotSplit:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return FewShotSplit(
        k=int(payload["k"]),
        seed=int(payload["seed"]),
        items={p: [(sid, int(idx)) for sid, idx in pairs] for p, pairs in payload["items"].items()},
        deficit_report=list(payload["deficit"]),
    )


def rare_predicate_subset(scenes: list[SceneRecord], n: int) -> list[str]:
    """The n least frequent predicates, ascending frequency, ties lexicographic."""
    counts: dict[str, int] = {}
    for s in scenes:
        for r in s.relations:
            counts[r.predicate] = counts.get(r.predicate, 0) + 1
    if n > len(counts):
        raise DataError(f"n={n} exceeds predicate vocabulary size {len(counts)}")
    ordered = sorted(counts, key=lambda p: (counts[p], p))
    return ordered[:n]


def iter_contexts(scenes: list[SceneRecord], include_predicates: bool
                  ) -> Iterator[tuple[ContextInput, str | None]]:
    """One context per annotated relation, optionally with its predicate stripped."""
    for s in scenes:
        for idx, r in enumerate(s.relations):
            ctx = ContextInput(
                scene=s,
                subject=s.object_by_id(r.subject_id),
                object=s.object_by_id(r.object_id),
                relation_index=idx,
            )
            yield ctx, (r.predicate if include_predicates else None)


def resolve_split_contexts(split: FewShotSplit, scenes: list[SceneRecord]
                           ) -> list[tuple[ContextInput, str]]:
    """Materialize a split's (scene_id, relation_index) items into labeled contexts."""
    by_id = {s.image_id: s for s in scenes}
    out = []
    for pred in sorted(split.items):
        for sid, idx in split.items[pred]:
            if sid not in by_id:
                raise DataError(f"split references unknown scene {sid!r}")
            s = by_id[sid]
            if idx >= len(s.relations):
                raise DataError(f"split references relation {idx} of scene {sid!r} (has {len(s.relations)})")
            r = s.relations[idx]
            if r.predicate != pred:
                raise DataError(f"split item ({sid}, {idx}) has predicate {r.predicate!r}, expected {pred!r}")
            ctx = ContextInput(s, s.object_by_id(r.subject_id), s.object_by_id(r.object_id), idx)
            out.append((ctx, pred))
    return out


def predicate_vocabulary(scenes: list[SceneRecord]) -> list[str]:
    return sorted({r.predicate for s in scenes for r in s.relations})
