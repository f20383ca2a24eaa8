"""
Scene graphs - ground-truth entities, 2-D geometry, and scene-file I/O.

Scenes are immutable after load. Everything that changes during reasoning
lives in a ViewState (see canvas).
"""

import json
import logging
import math
import random
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    model_serializer,
    model_validator,
)

from .errors import AnnotationParseError, DomainError

logger = logging.getLogger(__name__)


def _num(value: float) -> Union[int, float]:
    """Write integral coordinates as integers so files stay byte-stable"""
    value = float(value)
    return int(value) if value.is_integer() else value


class BBox(BaseModel):
    """Axis-aligned rectangle in scene pixels, origin top-left"""

    model_config = ConfigDict(frozen=True)

    x0: float
    y0: float
    x1: float
    y1: float

    @model_validator(mode="before")
    @classmethod
    def from_corners(cls, data: Any) -> Any:
        if isinstance(data, (list, tuple)):
            if len(data) != 4:
                raise ValueError(f"bbox needs 4 coordinates, got {len(data)}")
            return dict(zip(("x0", "y0", "x1", "y1"), data))
        return data

    @model_validator(mode="after")
    def check_order(self) -> "BBox":
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise ValueError(f"negative-size bbox {self.as_list()}")
        return self

    @model_serializer
    def serialize(self) -> List[Union[int, float]]:
        return self.as_list()

    @classmethod
    def of(cls, x0: float, y0: float, x1: float, y1: float) -> "BBox":
        return cls(x0=x0, y0=y0, x1=x1, y1=y1)

    def as_list(self) -> List[Union[int, float]]:
        return [_num(self.x0), _num(self.y0), _num(self.x1), _num(self.y1)]

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    def contains(self, other: "BBox") -> bool:
        return (
            self.x0 <= other.x0
            and self.y0 <= other.y0
            and other.x1 <= self.x1
            and other.y1 <= self.y1
        )

    def overlaps(self, other: "BBox") -> bool:
        """True when the two rectangles share a region of positive area"""
        return (
            min(self.x1, other.x1) > max(self.x0, other.x0)
            and min(self.y1, other.y1) > max(self.y0, other.y0)
        )


def bbox_union(a: BBox, b: BBox) -> BBox:
    return BBox.of(min(a.x0, b.x0), min(a.y0, b.y0), max(a.x1, b.x1), max(a.y1, b.y1))


def bbox_intersection(a: BBox, b: BBox) -> Optional[BBox]:
    """Closed-rectangle intersection; touching boxes give a zero-area box"""
    x0, y0 = max(a.x0, b.x0), max(a.y0, b.y0)
    x1, y1 = min(a.x1, b.x1), min(a.y1, b.y1)
    if x0 > x1 or y0 > y1:
        return None
    return BBox.of(x0, y0, x1, y1)


def bbox_gap(a: BBox, b: BBox) -> float:
    """Distance between the closest points of two rectangles (0 if they meet)"""
    dx = max(0.0, a.x0 - b.x1, b.x0 - a.x1)
    dy = max(0.0, a.y0 - b.y1, b.y0 - a.y1)
    return math.hypot(dx, dy)


class Entity(BaseModel):
    """A recognized object of the scene graph"""

    model_config = ConfigDict(frozen=True)

    id: str = Field(min_length=1)
    label: str = Field(min_length=1)
    bbox: BBox
    confidence: float = Field(ge=0.0, le=1.0)
    color: Optional[str] = None
    text: Tuple[str, ...] = ()


class Scene(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str = Field(min_length=1)
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    image_ref: Optional[str] = None
    caption: Optional[str] = None
    entities: Tuple[Entity, ...] = ()

    @model_validator(mode="after")
    def check_entities(self) -> "Scene":
        seen = set()
        bounds = self.bounds
        for entity in self.entities:
            if entity.id in seen:
                raise ValueError(f"duplicate entity id {entity.id!r}")
            seen.add(entity.id)
            if not bounds.contains(entity.bbox):
                raise ValueError(f"entity {entity.id!r} bbox outside scene bounds")
        return self

    @property
    def bounds(self) -> BBox:
        return BBox.of(0, 0, self.width, self.height)

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    def entity(self, entity_id: str) -> Entity:
        for entity in self.entities:
            if entity.id == entity_id:
                return entity
        raise KeyError(entity_id)


def area_fraction(b: BBox, s: Scene) -> float:
    """Share of the scene area covered by ``b``"""
    if not s.bounds.contains(b):
        raise DomainError(f"bbox {b.as_list()} outside scene {s.id!r} bounds")
    return b.area / (s.width * s.height)


class SceneSet:
    """Ordered, id-indexed collection of scenes"""

    def __init__(self, scenes: Sequence[Scene] = ()):
        self._scenes: Tuple[Scene, ...] = tuple(scenes)
        self._index: Dict[str, Scene] = {}
        for scene in self._scenes:
            if scene.id in self._index:
                raise AnnotationParseError(f"duplicate scene id {scene.id!r}")
            self._index[scene.id] = scene

    def __iter__(self) -> Iterator[Scene]:
        return iter(self._scenes)

    def __len__(self) -> int:
        return len(self._scenes)

    def __contains__(self, scene_id: object) -> bool:
        return scene_id in self._index

    def __getitem__(self, index: int) -> Scene:
        return self._scenes[index]

    def get(self, scene_id: str) -> Scene:
        try:
            return self._index[scene_id]
        except KeyError:
            raise DomainError(f"unknown scene {scene_id!r}") from None

    @property
    def scenes(self) -> Tuple[Scene, ...]:
        return self._scenes


def _read_json(source: Union[str, Path]) -> Dict[str, Any]:
    path = Path(source)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise AnnotationParseError(f"invalid JSON: {e}", record=str(path)) from e
    if not isinstance(data, dict) or not isinstance(data.get("scenes"), list):
        raise AnnotationParseError("top level must be an object with a 'scenes' list", record=str(path))
    return data


def parse_scenes(data: Dict[str, Any]) -> SceneSet:
    scenes = []
    for i, record in enumerate(data.get("scenes", [])):
        try:
            scenes.append(Scene.model_validate(record))
        except ValidationError as e:
            raise AnnotationParseError(str(e), record=f"scenes[{i}]") from e
    return SceneSet(scenes)


def load_scenes(path: Union[str, Path]) -> SceneSet:
    """Load a scene file (full schema, color/text/caption included)"""
    return parse_scenes(_read_json(path))


def dump_scenes(scenes: Union[SceneSet, Sequence[Scene]]) -> str:
    payload = {"scenes": [scene.model_dump(mode="json") for scene in scenes]}
    return json.dumps(payload, indent=2, ensure_ascii=False) + "\n"


def write_scenes(scenes: Union[SceneSet, Sequence[Scene]], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_scenes(scenes), encoding="utf-8")
    return path


def _entity_rejection(record: Dict[str, Any]) -> Optional[str]:
    """Reason a detection record is dropped rather than failing the import"""
    bbox = record.get("bbox")
    if isinstance(bbox, (list, tuple)) and len(bbox) == 4:
        try:
            x0, y0, x1, y1 = (float(v) for v in bbox)
        except (TypeError, ValueError):
            return None
        if x0 > x1 or y0 > y1:
            return f"negative-size bbox {list(bbox)}"
    confidence = record.get("confidence")
    if isinstance(confidence, (int, float)) and not 0.0 <= confidence <= 1.0:
        return f"confidence {confidence} outside [0, 1]"
    return None


def import_detections(path: Union[str, Path]) -> SceneSet:
    """
    Import detector output into scenes.

    Records with a negative-size bbox, a confidence outside [0, 1], or a bbox
    outside the image are rejected with a warning. Anything else that fails
    validation aborts the import with an error naming the record.
    """
    data = _read_json(path)
    scenes = []
    for i, image in enumerate(data["scenes"]):
        where = f"scenes[{i}]"
        if not isinstance(image, dict):
            raise AnnotationParseError("image record must be an object", record=where)
        raw_entities = image.get("entities", [])
        if not isinstance(raw_entities, list):
            raise AnnotationParseError("'entities' must be a list", record=where)

        header = {k: v for k, v in image.items() if k != "entities"}
        try:
            empty = Scene.model_validate({**header, "entities": []})
        except ValidationError as e:
            raise AnnotationParseError(str(e), record=where) from e

        entities: List[Entity] = []
        seen = set()
        for j, record in enumerate(raw_entities):
            entity_where = f"{where}.entities[{j}]"
            if not isinstance(record, dict):
                raise AnnotationParseError("entity record must be an object", record=entity_where)
            reason = _entity_rejection(record)
            if reason:
                logger.warning(f"Rejected {entity_where}: {reason}")
                continue
            try:
                entity = Entity.model_validate(record)
            except ValidationError as e:
                raise AnnotationParseError(str(e), record=entity_where) from e
            if not empty.bounds.contains(entity.bbox):
                logger.warning(f"Rejected {entity_where}: bbox outside {empty.width}x{empty.height} image")
                continue
            if entity.id in seen:
                raise AnnotationParseError(f"duplicate entity id {entity.id!r}", record=entity_where)
            seen.add(entity.id)
            entities.append(entity)

        scenes.append(empty.model_copy(update={"entities": tuple(entities)}))
    logger.info(f"Imported {len(scenes)} scenes with {sum(len(s.entities) for s in scenes)} entities")
    return SceneSet(scenes)


# Synthetic scene vocabulary
CONTAINERS = ("bus", "truck", "shop", "van", "train")
CARRIERS = ("sign", "poster", "plate", "banner")
LOOSE = ("person", "dog", "cat", "car", "bicycle", "cup", "bench", "umbrella")
DISTRACTORS = ("kite", "frisbee", "bottle")
PALETTE = ("red", "orange", "yellow", "green", "blue", "purple", "pink", "brown", "black", "white", "gray")
WORDS = (
    "STOP", "EXIT", "OPEN", "CAFE", "MAIN ST", "BWI AIRPORT", "ROUTE 12",
    "NO PARKING", "SALE", "HOTEL", "PHARMACY", "BUS ONLY", "ONE WAY", "TAXI",
)


class _Builder:
    """Accumulates entities for one generated scene"""

    def __init__(self, rng: random.Random):
        self.rng = rng
        self.entities: List[Entity] = []
        self.used: set = set()

    def confidence(self) -> float:
        return round(self.rng.uniform(0.55, 0.99), 2)

    def add(self, label: str, box: Tuple[int, int, int, int], color: str,
            text: Sequence[str] = (), confidence: Optional[float] = None) -> None:
        self.entities.append(Entity(
            id=f"e{len(self.entities) + 1}",
            label=label,
            bbox=BBox.of(*box),
            confidence=self.confidence() if confidence is None else confidence,
            color=color,
            text=tuple(text),
        ))

    def pick_label(self, pool: Sequence[str]) -> Optional[str]:
        free = [label for label in pool if label not in self.used]
        if not free:
            return None
        label = self.rng.choice(free)
        self.used.add(label)
        return label


def _container_cluster(b: _Builder, cell: Tuple[int, int, int, int]) -> bool:
    x0, y0, x1, y1 = cell
    label = b.pick_label(CONTAINERS)
    carrier = b.pick_label(CARRIERS)
    if label is None or carrier is None:
        return False
    rng = b.rng
    w = rng.randint(90, x1 - x0)
    h = rng.randint(80, y1 - y0)
    cx = rng.randint(x0, x1 - w)
    cy = rng.randint(y0, y1 - h)
    color, carrier_color = rng.sample(PALETTE, 2)
    b.add(label, (cx, cy, cx + w, cy + h), color)

    sw = rng.randint(20, w // 2)
    sh = rng.randint(12, max(12, int(h * 0.4)))
    sx = rng.randint(cx + 2, cx + w - sw - 2)
    sy = rng.randint(cy + 2, cy + h - sh - 2)
    words = rng.sample(WORDS, rng.choice((1, 1, 2)))
    b.add(carrier, (sx, sy, sx + sw, sy + sh), carrier_color, text=words)
    return True


def _loose_cluster(b: _Builder, cell: Tuple[int, int, int, int]) -> bool:
    x0, y0, x1, y1 = cell
    label = b.pick_label(LOOSE)
    if label is None:
        return False
    rng = b.rng
    members = [label] * rng.choice((2, 2, 3))
    extra = b.pick_label(LOOSE) if rng.random() < 0.5 and len(members) == 2 else None
    if extra:
        members.append(extra)
    colors = iter(rng.sample(PALETTE, len(members)))

    x = rng.randint(x0, x0 + 10)
    for member in members:
        w = rng.randint(25, 44)
        h = rng.randint(30, min(100, y1 - y0))
        top = rng.randint(y0, y1 - h)
        b.add(member, (x, top, x + w, top + h), next(colors))
        x += w + rng.randint(0, 10)
    return True


def _single(b: _Builder, cell: Tuple[int, int, int, int]) -> bool:
    x0, y0, x1, y1 = cell
    rng = b.rng
    if rng.random() < 0.5:
        label = b.pick_label(CARRIERS)
        text = rng.sample(WORDS, 1)
    else:
        label = b.pick_label(LOOSE)
        text = []
    if label is None:
        return False
    w = rng.randint(30, 90)
    h = rng.randint(20, 90)
    x = rng.randint(x0, x1 - w)
    y = rng.randint(y0, y1 - h)
    b.add(label, (x, y, x + w, y + h), rng.choice(PALETTE), text=text)
    return True


def generate_scene(scene_id: str, rng: random.Random, width: int = 640, height: int = 480) -> Scene:
    """
    Build one synthetic scene on a 3x2 grid of padded cells.

    Cells are padded so objects in different cells never come within the
    default grouping distance of each other; each label appears in at most
    one cell.
    """
    b = _Builder(rng)
    cols, rows, pad = 3, 2, 25
    cell_w, cell_h = width // cols, height // rows
    cells = [
        (c * cell_w + pad, r * cell_h + pad, (c + 1) * cell_w - pad, r * cell_h + cell_h - pad)
        for r in range(rows) for c in range(cols)
    ]
    empty = []
    for cell in cells:
        kind = rng.choices(("container", "loose", "single", "empty"), weights=(3, 3, 2, 1))[0]
        placed = {
            "container": _container_cluster,
            "loose": _loose_cluster,
            "single": _single,
        }.get(kind, lambda *_: False)(b, cell)
        if not placed:
            empty.append(cell)

    if empty and rng.random() < 0.7:
        x0, y0, x1, y1 = rng.choice(empty)
        label = b.pick_label(DISTRACTORS)
        if label:
            w, h = rng.randint(20, 60), rng.randint(20, 60)
            x, y = rng.randint(x0, x1 - w), rng.randint(y0, y1 - h)
            b.add(label, (x, y, x + w, y + h), rng.choice(PALETTE),
                  confidence=round(rng.uniform(0.3, 0.5), 2))

    return Scene(id=scene_id, width=width, height=height, entities=tuple(b.entities))


def generate_scenes(count: int, seed: int = 0, width: int = 640, height: int = 480) -> SceneSet:
    """Deterministic synthetic scene set"""
    rng = random.Random(seed)
    return SceneSet(
        generate_scene(f"scene-{i:05d}", rng, width=width, height=height)
        for i in range(count)
    )
