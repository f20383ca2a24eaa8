"""
The tool pool: Grounding, Highlight, OCR and Answer.

Each tool has a typed invocation and output. Backends are bound per tool
kind. The oracle backend answers from the scene graph. Remote backends speak
the wire protocol (see ``reasonforge.client``).
"""

import logging
import re
from enum import Enum
from typing import Annotated, Dict, List, Literal, Mapping, Optional, Protocol, Sequence, Set, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, model_serializer, model_validator

from .canvas import ViewState, add_highlights, add_mark, crop_zoom
from .errors import ExecutionError, ReasonForgeError
from .scene import BBox, Entity, Scene, SceneSet, area_fraction, bbox_intersection

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.2

COLOR_WORDS = frozenset({
    "red", "orange", "yellow", "green", "blue", "purple", "pink", "brown",
    "black", "white", "gray", "grey", "silver", "gold", "beige", "cyan",
    "violet", "navy", "maroon", "tan", "magenta",
})


class OutputClass(str, Enum):
    IMAGE = "image"
    TEXT = "text"


class ToolKind(str, Enum):
    """The four tools of the reasoner"""
    GROUNDING = "grounding"
    HIGHLIGHT = "highlight"
    OCR = "ocr"
    ANSWER = "answer"

    @property
    def output_class(self) -> OutputClass:
        if self in (ToolKind.GROUNDING, ToolKind.HIGHLIGHT):
            return OutputClass.IMAGE
        return OutputClass.TEXT

    @property
    def is_inferring(self) -> bool:
        """Tools that read information out of the image (crop rule applies)"""
        return self in (ToolKind.OCR, ToolKind.ANSWER)

    @property
    def is_graphical(self) -> bool:
        return self.output_class == OutputClass.IMAGE


class ToolInvocation(BaseModel):
    """A tool call with the arguments its kind requires, and no others"""

    model_config = ConfigDict(frozen=True)

    kind: ToolKind
    target_entity: Optional[str] = None
    question: Optional[str] = None
    characters: Optional[Tuple[str, ...]] = None

    @model_validator(mode="after")
    def check_arguments(self) -> "ToolInvocation":
        kind = self.kind
        if kind.is_graphical:
            if not (self.target_entity and self.target_entity.strip()):
                raise ValueError(f"{kind.value} requires target_entity")
            if self.question is not None or self.characters is not None:
                raise ValueError(f"{kind.value} takes only target_entity")
        elif kind == ToolKind.OCR:
            if self.target_entity is not None or self.question is not None or self.characters is not None:
                raise ValueError("ocr takes no arguments")
        else:
            if not (self.question and self.question.strip()):
                raise ValueError("answer requires question")
            if self.target_entity is not None:
                raise ValueError("answer does not take target_entity")
        return self

    @model_serializer
    def serialize(self) -> Dict[str, object]:
        return self.to_record()

    @classmethod
    def grounding(cls, target: str) -> "ToolInvocation":
        return cls(kind=ToolKind.GROUNDING, target_entity=target)

    @classmethod
    def highlight(cls, target: str) -> "ToolInvocation":
        return cls(kind=ToolKind.HIGHLIGHT, target_entity=target)

    @classmethod
    def ocr(cls) -> "ToolInvocation":
        return cls(kind=ToolKind.OCR)

    @classmethod
    def answer(cls, question: str, characters: Optional[Sequence[str]] = None) -> "ToolInvocation":
        return cls(kind=ToolKind.ANSWER, question=question,
                   characters=None if characters is None else tuple(characters))

    def args(self) -> Dict[str, object]:
        """Wire-protocol argument object"""
        args: Dict[str, object] = {}
        if self.target_entity is not None:
            args["target_entity"] = self.target_entity
        if self.question is not None:
            args["question"] = self.question
        if self.characters is not None:
            args["characters"] = list(self.characters)
        return args

    @classmethod
    def from_wire(cls, tool: str, args: Optional[Mapping[str, object]] = None) -> "ToolInvocation":
        return cls.model_validate({"kind": str(tool).lower(), **dict(args or {})})

    def to_record(self) -> Dict[str, object]:
        return {"kind": self.kind.value, **self.args()}


class ImageOut(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["image"] = "image"
    view: ViewState


class TextOut(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["text"] = "text"
    items: Tuple[str, ...] = ()


class AnswerOut(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["answer"] = "answer"
    answer: str


ToolOutput = Annotated[Union[ImageOut, TextOut, AnswerOut], Field(discriminator="kind")]
tool_output_adapter: TypeAdapter = TypeAdapter(ToolOutput)


def output_class_of(output: Union[ImageOut, TextOut, AnswerOut]) -> OutputClass:
    return OutputClass.IMAGE if isinstance(output, ImageOut) else OutputClass.TEXT


def check_output(kind: ToolKind, output: object, endpoint: Optional[str] = None) -> None:
    """Reject outputs whose class does not match the tool (never coerced)"""
    if not isinstance(output, (ImageOut, TextOut, AnswerOut)):
        raise ExecutionError(f"backend returned {type(output).__name__}", kind=kind.value, endpoint=endpoint)
    if output_class_of(output) != kind.output_class:
        raise ExecutionError(
            f"expected {kind.output_class.value} output, got {output.kind}",
            kind=kind.value, endpoint=endpoint,
        )
    if kind == ToolKind.ANSWER and not isinstance(output, AnswerOut):
        raise ExecutionError("answer tool must return an answer", kind=kind.value, endpoint=endpoint)
    if kind == ToolKind.OCR and not isinstance(output, TextOut):
        raise ExecutionError("ocr tool must return text items", kind=kind.value, endpoint=endpoint)


class ToolBackend(Protocol):
    name: str

    def execute(self, view: ViewState, invocation: ToolInvocation) -> Union[ImageOut, TextOut, AnswerOut]:
        ...


# Phrase matching

def words(text: str) -> List[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


def names_label(phrase: str, label: str) -> bool:
    """Word-bounded label mention, optional plural suffix"""
    pattern = r"\b" + re.escape(label.lower()) + r"(?:s|es)?\b"
    return re.search(pattern, phrase.lower()) is not None


def named_colors(phrase: str) -> Set[str]:
    return {w for w in words(phrase) if w in COLOR_WORDS}


def describes(entity: Entity, phrase: str) -> bool:
    if not names_label(phrase, entity.label):
        return False
    colors = named_colors(phrase)
    if not colors:
        return True
    return entity.color is not None and entity.color.lower() in colors


def visible_entities(scene: Scene, viewport: BBox) -> List[Entity]:
    return [e for e in scene.entities if e.bbox.overlaps(viewport)]


def oracle_match(scene: Scene, viewport: BBox, target_entity: str) -> List[Entity]:
    """Visible entities described by the phrase, largest first then by id"""
    found = [e for e in visible_entities(scene, viewport) if describes(e, target_entity)]
    return sorted(found, key=lambda e: (-e.bbox.area, e.id))


def _clipped(entity: Entity, viewport: BBox) -> Optional[BBox]:
    return bbox_intersection(entity.bbox, viewport)


def _core_subject(subject: str) -> str:
    """Strip a trailing spatial context clause ("... near the bus")"""
    for marker in (" near ", " among "):
        index = subject.find(marker)
        if index >= 0:
            subject = subject[:index]
    return subject.strip()


def _resolve_entity(scene: Scene, view: ViewState, subject: str) -> Entity:
    core = _core_subject(subject)
    if any(names_label(core, e.label) for e in scene.entities):
        matches = oracle_match(scene, view.viewport, core)
        if not matches:
            raise ExecutionError(f"no visible entity matches {core!r}", kind=ToolKind.ANSWER.value)
        return matches[0]

    visible = visible_entities(scene, view.viewport)
    mark = view.last_mark
    if mark is not None:
        for entity_id in mark.ref_entity_ids:
            try:
                return scene.entity(entity_id)
            except KeyError:
                continue
        inside = [e for e in visible if e.bbox.overlaps(mark.rect)]
        if inside:
            return min(inside, key=lambda e: (-bbox_intersection(e.bbox, mark.rect).area, e.id))
    if not visible:
        raise ExecutionError("no entity in view", kind=ToolKind.ANSWER.value)
    return min(visible, key=lambda e: (-_clipped(e, view.viewport).area, e.id))


def _strip_question(text: str) -> str:
    return text.strip().rstrip("?").strip()


_COUNT = re.compile(r"^how many (.+?)(?: are| is)? (?:in|on|inside|among|near|within) (.+)$")
_COUNT_BARE = re.compile(r"^how many (.+?)(?: are there| are visible)?$")
_COLOR = re.compile(r"^what colou?r is (.+)$")
_TEXT_SUBJECT = (
    re.compile(r"text (?:on|of) (.+)$"),
    re.compile(r"written on (.+)$"),
    re.compile(r"^what does (.+) say$"),
)
_LABEL = re.compile(r"^what (?:kind of |type of )?object is (.+)$")


def _is_echo(item: str, question_words: Set[str]) -> bool:
    item_words = words(item)
    return bool(item_words) and set(item_words) <= question_words


def _join_characters(question: str, characters: Sequence[str]) -> str:
    """Join characters, dropping items that merely repeat the question"""
    question_words = set(words(question))
    kept = [c for c in characters if not _is_echo(c, question_words)]
    return " ".join(kept or characters)


def _count(scene: Scene, view: ViewState, subject: str) -> str:
    labels = {e.label for e in scene.entities if names_label(subject, e.label)}
    highlights = view.highlights
    if highlights:
        if not labels:
            return str(len(highlights))
        total = 0
        for annotation in highlights:
            refs = []
            for entity_id in annotation.ref_entity_ids:
                try:
                    refs.append(scene.entity(entity_id))
                except KeyError:
                    continue
            if any(describes(e, subject) for e in refs):
                total += 1
        return str(total)
    return str(len(oracle_match(scene, view.viewport, subject)))


def _text_answer(scene: Scene, view: ViewState, question: str, subject: Optional[str],
                 characters: Optional[Sequence[str]]) -> str:
    if subject:
        core = _core_subject(subject)
        if any(names_label(core, e.label) for e in scene.entities):
            entity = _resolve_entity(scene, view, subject)
            items = list(entity.text)
            if characters:
                items = [t for t in items if t in characters]
            if items:
                return " ".join(items)
    if characters:
        return _join_characters(question, characters)
    return " ".join(t for e in visible_entities(scene, view.viewport) for t in e.text)


def oracle_answer(scene: Scene, view: ViewState, question: str,
                  characters: Optional[Sequence[str]] = None) -> str:
    """
    Answer template-shaped questions from the scene graph.

    Supported shapes: counting ("How many ..."), color ("What color is ..."),
    text ("What is the text on ...", or any question when characters are
    given) and label ("What kind of object is ...").
    """
    q = _strip_question(question).lower()

    match = _COUNT.match(q) or _COUNT_BARE.match(q)
    if match:
        return _count(scene, view, match.group(1))

    match = _COLOR.match(q)
    if match:
        entity = _resolve_entity(scene, view, match.group(1))
        if entity.color is None:
            raise ExecutionError(f"entity {entity.id} has no color", kind=ToolKind.ANSWER.value)
        return entity.color

    subject = None
    for pattern in _TEXT_SUBJECT:
        found = pattern.search(q)
        if found:
            subject = found.group(1)
            break
    if characters or subject is not None or "text" in words(q):
        return _text_answer(scene, view, question, subject, characters)

    match = _LABEL.match(q)
    if match:
        return _resolve_entity(scene, view, match.group(1)).label

    raise ExecutionError("unanswerable by oracle", kind=ToolKind.ANSWER.value)


class OracleToolBackend:
    """Deterministic scene-graph implementation of every tool"""

    name = "oracle"

    def __init__(self, scenes: SceneSet):
        self.scenes = scenes

    def execute(self, view: ViewState, invocation: ToolInvocation) -> Union[ImageOut, TextOut, AnswerOut]:
        scene = self.scenes.get(view.scene_id)
        kind = invocation.kind

        if kind == ToolKind.GROUNDING:
            matches = oracle_match(scene, view.viewport, invocation.target_entity)
            if not matches:
                raise ExecutionError(f"no match for {invocation.target_entity!r}", kind=kind.value)
            best = matches[0]
            return ImageOut(view=add_mark(view, _clipped(best, view.viewport), [best.id]))

        if kind == ToolKind.HIGHLIGHT:
            matches = oracle_match(scene, view.viewport, invocation.target_entity)
            rects = [_clipped(e, view.viewport) for e in matches]
            return ImageOut(view=add_highlights(view, rects, [e.id for e in matches]))

        if kind == ToolKind.OCR:
            items = [t for e in visible_entities(scene, view.viewport) for t in e.text]
            return TextOut(items=tuple(items))

        return AnswerOut(answer=oracle_answer(scene, view, invocation.question, invocation.characters))


class ToolBackendBinding:
    """
    One backend per tool kind plus the crop threshold alpha.

    Example:
        binding = ToolBackendBinding.oracle(scenes, alpha=0.2)
        output = invoke(full_view(scene), ToolInvocation.ocr(), binding)
    """

    def __init__(self, scenes: SceneSet, backends: Mapping[ToolKind, ToolBackend], alpha: float = DEFAULT_ALPHA):
        if not 0.0 < alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {alpha}")
        missing = [k.value for k in ToolKind if k not in backends]
        if missing:
            raise ValueError(f"no backend bound for: {', '.join(missing)}")
        self.scenes = scenes
        self.alpha = alpha
        self._backends: Dict[ToolKind, ToolBackend] = dict(backends)

    @classmethod
    def oracle(cls, scenes: SceneSet, alpha: float = DEFAULT_ALPHA) -> "ToolBackendBinding":
        backend = OracleToolBackend(scenes)
        return cls(scenes, {kind: backend for kind in ToolKind}, alpha=alpha)

    def backend_for(self, kind: ToolKind) -> ToolBackend:
        return self._backends[kind]

    def with_backend(self, kind: ToolKind, backend: ToolBackend) -> "ToolBackendBinding":
        backends = dict(self._backends)
        backends[kind] = backend
        return ToolBackendBinding(self.scenes, backends, alpha=self.alpha)

    def describe(self) -> Dict[str, str]:
        return {kind.value: self._backends[kind].name for kind in ToolKind}


def preprocess_for_tool(v: ViewState, kind: ToolKind, alpha: float, scene: Scene) -> ViewState:
    """Crop-and-enlarge on the latest mark when an inferring tool meets a small red box"""
    if not kind.is_inferring:
        return v
    mark = v.last_mark
    if mark is None or mark.rect.area <= 0:
        return v
    if area_fraction(mark.rect, scene) < alpha:
        return crop_zoom(v, mark.rect)
    return v


def dispatch(v: ViewState, inv: ToolInvocation, binding: ToolBackendBinding) -> Union[ImageOut, TextOut, AnswerOut]:
    """Run the bound backend on an already-preprocessed view"""
    backend = binding.backend_for(inv.kind)
    endpoint = getattr(backend, "endpoint", None)
    try:
        output = backend.execute(v, inv)
    except ExecutionError:
        raise
    except ReasonForgeError as e:
        raise ExecutionError(str(e), kind=inv.kind.value, endpoint=endpoint) from e
    check_output(inv.kind, output, endpoint=endpoint)
    if isinstance(output, ImageOut) and output.view.scene_id != v.scene_id:
        raise ExecutionError("output view belongs to another scene", kind=inv.kind.value, endpoint=endpoint)
    return output


def invoke(v: ViewState, inv: ToolInvocation, binding: ToolBackendBinding) -> Union[ImageOut, TextOut, AnswerOut]:
    scene = binding.scenes.get(v.scene_id)
    return dispatch(preprocess_for_tool(v, inv.kind, binding.alpha, scene), inv, binding)
