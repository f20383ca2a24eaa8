"""
The working image: viewport, marks, highlights, crop-and-enlarge, and
deterministic raster export.

All operations return new ViewState values; inputs are never mutated.
"""

import base64
import io
import logging
from enum import Enum
from typing import Optional, Sequence, Tuple, Union

from PIL import Image, ImageColor, ImageDraw
from pydantic import BaseModel, ConfigDict, model_validator

from .errors import DomainError, RenderError
from .scene import BBox, Scene, bbox_intersection

logger = logging.getLogger(__name__)

MARK_COLOR = (255, 0, 0)
HIGHLIGHT_COLOR = (255, 0, 255)
FALLBACK_FILL = (128, 128, 128)
BACKGROUND = (255, 255, 255)


class AnnotationKind(str, Enum):
    MARK = "mark"
    HIGHLIGHT = "highlight"


class Annotation(BaseModel):
    """A red-box mark or a highlight drawn on the working image"""

    model_config = ConfigDict(frozen=True)

    kind: AnnotationKind
    rect: BBox
    ref_entity_ids: Tuple[str, ...] = ()


class ViewState(BaseModel):
    """The current image: a scene seen through a viewport, plus annotations"""

    model_config = ConfigDict(frozen=True)

    scene_id: str
    viewport: BBox
    annotations: Tuple[Annotation, ...] = ()

    @model_validator(mode="after")
    def check_annotations(self) -> "ViewState":
        for annotation in self.annotations:
            if not self.viewport.contains(annotation.rect):
                raise ValueError(f"annotation {annotation.rect.as_list()} outside viewport")
        return self

    @property
    def marks(self) -> Tuple[Annotation, ...]:
        return tuple(a for a in self.annotations if a.kind == AnnotationKind.MARK)

    @property
    def highlights(self) -> Tuple[Annotation, ...]:
        return tuple(a for a in self.annotations if a.kind == AnnotationKind.HIGHLIGHT)

    @property
    def last_mark(self) -> Optional[Annotation]:
        marks = self.marks
        return marks[-1] if marks else None


def full_view(s: Scene) -> ViewState:
    return ViewState(scene_id=s.id, viewport=s.bounds)


def _clip(v: ViewState, rect: BBox, what: str) -> BBox:
    clipped = bbox_intersection(rect, v.viewport)
    if clipped is None:
        raise DomainError(f"{what} {rect.as_list()} lies outside viewport {v.viewport.as_list()}")
    if clipped != rect:
        logger.warning(f"Clipped {what} {rect.as_list()} to viewport as {clipped.as_list()}")
    return clipped


def add_mark(v: ViewState, rect: BBox, ref_entity_ids: Sequence[str] = ()) -> ViewState:
    mark = Annotation(kind=AnnotationKind.MARK, rect=_clip(v, rect, "mark"),
                      ref_entity_ids=tuple(ref_entity_ids))
    return v.model_copy(update={"annotations": v.annotations + (mark,)})


def add_highlights(
    v: ViewState,
    rects: Sequence[BBox],
    ids: Sequence[Union[str, Sequence[str]]] = (),
) -> ViewState:
    """Append one Highlight per rect; ``ids`` is empty or parallel to ``rects``"""
    if ids and len(ids) != len(rects):
        raise DomainError(f"{len(ids)} id entries for {len(rects)} highlight rects")
    added = []
    for i, rect in enumerate(rects):
        refs: Tuple[str, ...] = ()
        if ids:
            refs = (ids[i],) if isinstance(ids[i], str) else tuple(ids[i])
        added.append(Annotation(kind=AnnotationKind.HIGHLIGHT, rect=_clip(v, rect, "highlight"),
                                ref_entity_ids=refs))
    if not added:
        return v
    return v.model_copy(update={"annotations": v.annotations + tuple(added)})


def crop_zoom(v: ViewState, rect: BBox) -> ViewState:
    """
    Replace the viewport with ``rect`` (logical zoom).

    Annotations without a positive-area overlap are dropped, the rest are
    clipped to the new viewport.
    """
    if rect.area <= 0:
        raise DomainError(f"cannot crop to zero-area rect {rect.as_list()}")
    if not v.viewport.contains(rect):
        raise DomainError(f"crop rect {rect.as_list()} outside viewport {v.viewport.as_list()}")
    kept = []
    for annotation in v.annotations:
        if not annotation.rect.overlaps(rect):
            continue
        clipped = bbox_intersection(annotation.rect, rect)
        kept.append(annotation.model_copy(update={"rect": clipped}))
    return ViewState(scene_id=v.scene_id, viewport=rect, annotations=tuple(kept))


def to_pixels(viewport: BBox, rect: BBox, out_w: int, out_h: int) -> Tuple[float, float, float, float]:
    """Affine image of a scene rect in the rendered frame"""
    sx = out_w / viewport.width
    sy = out_h / viewport.height
    return (
        (rect.x0 - viewport.x0) * sx,
        (rect.y0 - viewport.y0) * sy,
        (rect.x1 - viewport.x0) * sx,
        (rect.y1 - viewport.y0) * sy,
    )


def from_pixels(viewport: BBox, box: Sequence[float], out_w: int, out_h: int) -> BBox:
    """Inverse of ``to_pixels``; ``box`` is [x0, y0, x1, y1] in the rendered frame"""
    x0, y0, x1, y1 = (float(c) for c in box)
    sx = viewport.width / out_w
    sy = viewport.height / out_h
    return BBox.of(
        viewport.x0 + x0 * sx,
        viewport.y0 + y0 * sy,
        viewport.x0 + x1 * sx,
        viewport.y0 + y1 * sy,
    )


def pixel_box(viewport: BBox, rect: BBox, out_w: int, out_h: int) -> Optional[Tuple[int, int, int, int]]:
    """Inclusive pixel rectangle covered by ``rect``, or None if it rounds away"""
    px0, py0, px1, py1 = to_pixels(viewport, rect, out_w, out_h)
    left, top = round(px0), round(py0)
    right, bottom = round(px1) - 1, round(py1) - 1
    if right < left or bottom < top:
        return None
    return left, top, right, bottom


def stroke_width(out_w: int, out_h: int) -> int:
    return max(1, round(0.02 * min(out_w, out_h)))


def _fill(color: Optional[str]) -> Tuple[int, int, int]:
    if color is None:
        return FALLBACK_FILL
    try:
        return ImageColor.getrgb(color)[:3]
    except ValueError:
        logger.warning(f"Unknown color {color!r}, drawing mid-gray")
        return FALLBACK_FILL


def _base_image(v: ViewState, scene: Scene, out_w: int, out_h: int) -> Image.Image:
    if scene.image_ref:
        try:
            with Image.open(scene.image_ref) as source:
                source = source.convert("RGB")
        except (FileNotFoundError, OSError) as e:
            raise RenderError(f"cannot read image {scene.image_ref!r}: {e}") from e
        fx = source.width / scene.width
        fy = source.height / scene.height
        # at least one source pixel, even for viewports thinner than a pixel
        x0 = min(round(v.viewport.x0 * fx), source.width - 1)
        y0 = min(round(v.viewport.y0 * fy), source.height - 1)
        x1 = max(x0 + 1, min(round(v.viewport.x1 * fx), source.width))
        y1 = max(y0 + 1, min(round(v.viewport.y1 * fy), source.height))
        try:
            return source.crop((x0, y0, x1, y1)).resize((out_w, out_h), Image.Resampling.BILINEAR)
        except ValueError as e:
            raise RenderError(f"cannot crop {scene.image_ref!r} to {v.viewport.as_list()}: {e}") from e

    image = Image.new("RGB", (out_w, out_h), BACKGROUND)
    draw = ImageDraw.Draw(image)
    for entity in scene.entities:
        if not entity.bbox.overlaps(v.viewport):
            continue
        clipped = bbox_intersection(entity.bbox, v.viewport)
        box = pixel_box(v.viewport, clipped, out_w, out_h)
        if box is not None:
            draw.rectangle(box, fill=_fill(entity.color))
    return image


def render(v: ViewState, scene: Scene, out_w: int, out_h: int) -> bytes:
    """PNG bytes of the view, annotations drawn over the entities"""
    if out_w <= 0 or out_h <= 0:
        raise DomainError(f"render size must be positive, got {out_w}x{out_h}")
    if v.scene_id != scene.id:
        raise DomainError(f"view belongs to scene {v.scene_id!r}, not {scene.id!r}")

    image = _base_image(v, scene, out_w, out_h)
    draw = ImageDraw.Draw(image)
    width = stroke_width(out_w, out_h)
    for annotation in v.annotations:
        box = pixel_box(v.viewport, annotation.rect, out_w, out_h)
        if box is None:
            continue
        color = MARK_COLOR if annotation.kind == AnnotationKind.MARK else HIGHLIGHT_COLOR
        draw.rectangle(box, outline=color, width=width)

    buffer = io.BytesIO()
    image.save(buffer, format="PNG")
    return buffer.getvalue()


def encode_png_b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")
