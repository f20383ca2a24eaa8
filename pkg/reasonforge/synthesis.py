"""
Least-to-most reasoning-data synthesis.

Pipeline per scene:
    recognize_entities -> build_nodes -> sample_chain -> synthesize_path
    -> validate_example

Chains are built from the answer-bearing node outwards to the whole image.
Each edge becomes a sub-question with a tool call (Questioner). The
sub-questions are folded into one main question (Combiner). The path is
executed whole-image-first with oracle tools to obtain its gold answer.
"""

import logging
import random
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from typing import Annotated, Iterable, List, Literal, Optional, Protocol, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .canvas import ViewState, full_view
from .errors import DomainError, PolicyError, SynthesisError
from .reasoner import ReasoningTask, ScriptedPolicy, Termination, run
from .scene import BBox, Entity, Scene, SceneSet, area_fraction, bbox_gap, bbox_union
from .tools import (
    DEFAULT_ALPHA,
    AnswerOut,
    ImageOut,
    TextOut,
    ToolBackendBinding,
    ToolInvocation,
    ToolKind,
    named_colors,
    names_label,
    words,
)

logger = logging.getLogger(__name__)

DEFAULT_MIN_CONFIDENCE = 0.5
DEFAULT_DELTA = 0.05
DEFAULT_MAX_CHAIN_LEN = 4
DEFAULT_MAX_ATTEMPTS = 4
PATH_FORMAT = "v1"


# Profiles and nodes

class NodeKind(str, Enum):
    SINGLE_ENTITY = "single_entity"
    ENTITY_GROUP = "entity_group"
    WHOLE_IMAGE = "whole_image"


class SizeProfile(BaseModel):
    model_config = ConfigDict(frozen=True)

    width_frac: float = Field(gt=0.0, le=1.0)
    height_frac: float = Field(gt=0.0, le=1.0)
    area_frac: float = Field(gt=0.0, le=1.0)


class SingleEntityProfile(BaseModel):
    """Label, Location, Color, Text and Size of one entity"""

    model_config = ConfigDict(frozen=True)

    kind: Literal["single_entity"] = "single_entity"
    entity_id: str
    label: str
    location: BBox
    color: Optional[str] = None
    text: Tuple[str, ...] = ()
    size: SizeProfile


class EntityGroupProfile(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["entity_group"] = "entity_group"
    caption: str
    member_ids: Tuple[str, ...]
    member_labels: Tuple[str, ...]

    @property
    def majority_label(self) -> str:
        counts = Counter(self.member_labels)
        return min(counts, key=lambda label: (-counts[label], label))


class WholeImageProfile(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["whole_image"] = "whole_image"
    caption: str

NodeProfile = Annotated[
    Union[SingleEntityProfile, EntityGroupProfile, WholeImageProfile],
    Field(discriminator="kind"),
]


class Node(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    view: ViewState
    profile: NodeProfile

    @property
    def kind(self) -> NodeKind:
        return NodeKind(self.profile.kind)


class Chain(BaseModel):
    """Nodes N_1..N_M (answer node first, whole image last) and edge tools"""

    model_config = ConfigDict(frozen=True)

    nodes: Tuple[Node, ...]
    edge_tools: Tuple[ToolKind, ...]

    @model_validator(mode="after")
    def check_shape(self) -> "Chain":
        if len(self.nodes) < 2:
            raise ValueError("a chain needs at least two nodes")
        if len(self.edge_tools) != len(self.nodes) - 1:
            raise ValueError("a chain needs exactly one tool per edge")
        return self

    def signature(self) -> Tuple[Tuple[str, ...], Tuple[str, ...]]:
        return tuple(n.id for n in self.nodes), tuple(t.value for t in self.edge_tools)


def chain_violations(chain: Chain, max_chain_len: int = DEFAULT_MAX_CHAIN_LEN) -> List[str]:
    problems = []
    if chain.nodes[-1].kind != NodeKind.WHOLE_IMAGE:
        problems.append("last node is not the whole image")
    if any(n.kind == NodeKind.WHOLE_IMAGE for n in chain.nodes[:-1]):
        problems.append("whole-image node before the end of the chain")
    if len(chain.nodes) > max_chain_len:
        problems.append(f"chain of {len(chain.nodes)} nodes exceeds {max_chain_len}")
    for m, tool in enumerate(chain.edge_tools):
        terminal = m == 0
        if terminal and tool.is_graphical:
            problems.append(f"terminal edge uses graphical tool {tool.value}")
        if not terminal and not tool.is_graphical:
            problems.append(f"intermediary edge {m + 1} uses textual tool {tool.value}")
        head = chain.nodes[m].profile
        if tool == ToolKind.OCR and not (isinstance(head, SingleEntityProfile) and head.text):
            problems.append(f"edge {m + 1} uses ocr on a node without text")
    return problems


# Entity recognition and node construction

def recognize_entities(s: Scene, min_confidence: float = DEFAULT_MIN_CONFIDENCE) -> List[Entity]:
    """Entities strictly above the confidence cutoff, in scene order"""
    return [e for e in s.entities if e.confidence > min_confidence]


def plural(word: str) -> str:
    if word.endswith(("s", "x", "z", "ch", "sh")):
        return word + "es"
    return word + "s"


def count_phrase(labels: Iterable[str]) -> str:
    """"2 persons and 1 dog" - labels sorted, counts pluralized"""
    counts = Counter(labels)
    parts = [f"{n} {plural(label) if n > 1 else label}" for label, n in sorted(counts.items())]
    if len(parts) <= 1:
        return "".join(parts)
    return ", ".join(parts[:-1]) + " and " + parts[-1]


def _clusters(entities: Sequence[Entity], threshold: float) -> List[List[Entity]]:
    parent = list(range(len(entities)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(entities)):
        for j in range(i + 1, len(entities)):
            if bbox_gap(entities[i].bbox, entities[j].bbox) <= threshold:
                parent[find(j)] = find(i)

    groups: dict = {}
    for i, entity in enumerate(entities):
        groups.setdefault(find(i), []).append(entity)
    clusters = [members for members in groups.values() if len(members) >= 2]
    return sorted(clusters, key=lambda members: entities.index(members[0]))


def build_nodes(s: Scene, entities: Sequence[Entity], delta: float = DEFAULT_DELTA) -> List[Node]:
    """Single-entity nodes, then entity groups, then the one whole-image node"""
    if delta <= 0:
        raise DomainError(f"proximity delta must be positive, got {delta}")
    kept = [e for e in entities if e.bbox.area > 0]
    nodes: List[Node] = []

    for e in kept:
        profile = SingleEntityProfile(
            entity_id=e.id,
            label=e.label,
            location=e.bbox,
            color=e.color,
            text=e.text,
            size=SizeProfile(
                width_frac=e.bbox.width / s.width,
                height_frac=e.bbox.height / s.height,
                area_frac=area_fraction(e.bbox, s),
            ),
        )
        nodes.append(Node(id=f"entity:{e.id}", view=ViewState(scene_id=s.id, viewport=e.bbox), profile=profile))

    for n, members in enumerate(_clusters(kept, delta * s.diagonal), start=1):
        viewport = members[0].bbox
        for member in members[1:]:
            viewport = bbox_union(viewport, member.bbox)
        profile = EntityGroupProfile(
            caption=f"a group of {count_phrase(m.label for m in members)}",
            member_ids=tuple(m.id for m in members),
            member_labels=tuple(m.label for m in members),
        )
        nodes.append(Node(id=f"group:{n}", view=ViewState(scene_id=s.id, viewport=viewport), profile=profile))

    if s.caption:
        caption = s.caption
    elif kept:
        caption = f"an image with {count_phrase(e.label for e in kept)}"
    else:
        caption = "an empty image"
    nodes.append(Node(id="whole", view=full_view(s), profile=WholeImageProfile(caption=caption)))
    return nodes


# Chain sampling

def _textual_ok(node: Node, tool: ToolKind) -> bool:
    profile = node.profile
    if isinstance(profile, SingleEntityProfile):
        if tool == ToolKind.OCR:
            return bool(profile.text)
        return profile.color is not None or bool(profile.text)
    return isinstance(profile, EntityGroupProfile) and tool == ToolKind.ANSWER


def _graphical_tools(node: Node) -> List[ToolKind]:
    if node.kind == NodeKind.SINGLE_ENTITY:
        return [ToolKind.GROUNDING, ToolKind.HIGHLIGHT]
    if node.kind == NodeKind.ENTITY_GROUP:
        return [ToolKind.HIGHLIGHT]
    return []


def sample_chain(nodes: Sequence[Node], rng: random.Random,
                 max_chain_len: int = DEFAULT_MAX_CHAIN_LEN) -> Optional[Chain]:
    """
    Grow a chain from the answer node outwards.

    The terminal tool (OCR or Answer) is drawn first, then a head node that
    permits it. Each later node must spatially contain the previous one and
    is reached by a graphical tool. The whole-image node closes the chain
    when no candidate remains, when it is drawn, or at the length limit.
    """
    if max_chain_len < 2:
        raise DomainError(f"max_chain_len must be >= 2, got {max_chain_len}")
    whole = [n for n in nodes if n.kind == NodeKind.WHOLE_IMAGE]
    if len(whole) != 1:
        return None
    whole_node = whole[0]
    others = [n for n in nodes if n.kind != NodeKind.WHOLE_IMAGE]

    tools = [ToolKind.OCR, ToolKind.ANSWER]
    rng.shuffle(tools)
    for terminal in tools:
        candidates = [n for n in others if _textual_ok(n, terminal)]
        if candidates:
            break
    else:
        return None

    chain = [rng.choice(candidates)]
    edge_tools = [terminal]
    remaining = [n for n in others if n.id != chain[0].id]
    while True:
        inner = chain[-1].view.viewport
        candidates = [n for n in remaining if n.view.viewport.contains(inner)]
        if len(chain) + 1 >= max_chain_len or not candidates:
            chain.append(whole_node)
            break
        pick = rng.choice(candidates + [whole_node])
        chain.append(pick)
        if pick is whole_node:
            break
        edge_tools.append(rng.choice(_graphical_tools(pick)))
        remaining = [n for n in remaining if n.id != pick.id]
    return Chain(nodes=tuple(chain), edge_tools=tuple(edge_tools))


# Template question grammar

STOPWORDS = frozenset(
    "a an the of on in is are what where which regions show how many color colour "
    "text near and does say".split()
)

PREFIXES = {
    "where": "Where is ",
    "which": "Which regions show ",
    "text": "What is the text on ",
    "color": "What color is ",
}
_COUNT_QUESTION = re.compile(r"^How many (?P<plural>.+?) are in (?P<body>.+)\?$")


def node_ref(profile, with_color: bool = True) -> str:
    if isinstance(profile, SingleEntityProfile):
        if with_color and profile.color:
            return f"the {profile.color} {profile.label}"
        return f"the {profile.label}"
    if isinstance(profile, EntityGroupProfile):
        caption = profile.caption.strip()
        for article in ("a ", "an "):
            if caption.lower().startswith(article):
                return "the " + caption[len(article):]
        return caption if caption.lower().startswith("the ") else "the " + caption
    raise SynthesisError("the whole image has no referent")


def context_refs(tail) -> List[str]:
    return [] if isinstance(tail, WholeImageProfile) else [node_ref(tail)]


def compose(shape: str, refs: Sequence[str], plural_label: Optional[str] = None) -> str:
    body = " near ".join(refs)
    if shape == "count":
        return f"How many {plural_label} are in {body}?"
    return f"{PREFIXES[shape]}{body}?"


class ParsedQuestion(BaseModel):
    shape: str
    refs: Tuple[str, ...]
    plural_label: Optional[str] = None


def parse_question(question: str) -> Optional[ParsedQuestion]:
    """Template grammar: shape prefix, head referent, then ' near ' contexts"""
    question = question.strip()
    match = _COUNT_QUESTION.match(question)
    if match:
        return ParsedQuestion(shape="count", refs=tuple(match.group("body").split(" near ")),
                              plural_label=match.group("plural"))
    for shape, prefix in PREFIXES.items():
        if question.startswith(prefix) and question.endswith("?"):
            body = question[len(prefix):-1]
            if body:
                return ParsedQuestion(shape=shape, refs=tuple(body.split(" near ")))
    return None


_TOOL_SHAPES = {
    ToolKind.GROUNDING: {"where"},
    ToolKind.HIGHLIGHT: {"which"},
    ToolKind.OCR: {"text"},
    ToolKind.ANSWER: {"color", "text", "count"},
}


# Generators

class Questioner(Protocol):
    name: str

    def generate(self, head, tail, tool: ToolKind) -> Tuple[str, ToolInvocation]:
        ...


class Combiner(Protocol):
    name: str

    def combine(self, outer: str, inner: str) -> str:
        ...


class TemplateQuestioner:
    """Deterministic sub-question templates per (head kind, tail kind, tool)"""

    name = "template"

    def generate(self, head, tail, tool: ToolKind) -> Tuple[str, ToolInvocation]:
        if isinstance(head, WholeImageProfile):
            raise SynthesisError("the whole image cannot head an edge")
        context = context_refs(tail)
        ref = node_ref(head)

        if tool == ToolKind.GROUNDING:
            if not isinstance(head, SingleEntityProfile):
                raise SynthesisError("grounding needs a single entity")
            return compose("where", [ref] + context), ToolInvocation.grounding(ref)

        if tool == ToolKind.HIGHLIGHT:
            question = compose("which", [ref] + context)
            if isinstance(head, EntityGroupProfile):
                return question, ToolInvocation.highlight(plural(head.majority_label))
            return question, ToolInvocation.highlight(ref)

        if tool == ToolKind.OCR:
            if not (isinstance(head, SingleEntityProfile) and head.text):
                raise SynthesisError("ocr needs an entity with text")
            return compose("text", [ref] + context), ToolInvocation.ocr()

        if isinstance(head, EntityGroupProfile):
            question = compose("count", [ref] + context, plural(head.majority_label))
        elif head.color:
            question = compose("color", [node_ref(head, with_color=False)] + context)
        elif head.text:
            question = compose("text", [ref] + context)
        else:
            raise SynthesisError(f"nothing to ask about {ref}")
        return question, ToolInvocation.answer(question)


class TemplateCombiner:
    """
    Referent substitution: the inner question's context is attached after the
    last mention of its referent in the outer question.
    """

    name = "template"

    def combine(self, outer: str, inner: str) -> str:
        parsed = parse_question(inner)
        if parsed is None:
            raise SynthesisError(f"cannot parse inner question {inner!r}")
        referent = parsed.refs[0]
        context = "".join(" near " + r for r in parsed.refs[1:])
        if not context:
            return outer
        mentions = list(re.finditer(r"(?<!\w)" + re.escape(referent) + r"(?!\w)", outer))
        if mentions:
            end = mentions[-1].end()
            if outer[end:].startswith(context):
                return outer
            return outer[:end] + context + outer[end:]
        stem = outer.rstrip()
        if stem.endswith("?"):
            return stem[:-1] + context + "?"
        return stem + context


class GeneratorBinding:
    """Generators plus the knobs of the synthesis pipeline"""

    def __init__(
        self,
        questioner: Optional[Questioner] = None,
        combiner: Optional[Combiner] = None,
        rng_seed: int = 0,
        proximity_delta: float = DEFAULT_DELTA,
        min_confidence: float = DEFAULT_MIN_CONFIDENCE,
        alpha: float = DEFAULT_ALPHA,
        max_attempts: int = DEFAULT_MAX_ATTEMPTS,
    ):
        if not 0.0 <= min_confidence <= 1.0:
            raise ValueError(f"min_confidence must be in [0, 1], got {min_confidence}")
        if proximity_delta <= 0:
            raise ValueError(f"proximity_delta must be positive, got {proximity_delta}")
        if max_attempts < 1:
            raise ValueError(f"max_attempts must be >= 1, got {max_attempts}")
        self.questioner = questioner or TemplateQuestioner()
        self.combiner = combiner or TemplateCombiner()
        self.rng_seed = rng_seed
        self.proximity_delta = proximity_delta
        self.min_confidence = min_confidence
        self.alpha = alpha
        self.max_attempts = max_attempts

    @property
    def uses_templates(self) -> bool:
        return isinstance(self.questioner, TemplateQuestioner) and isinstance(self.combiner, TemplateCombiner)


# Paths

class PathStep(BaseModel):
    model_config = ConfigDict(frozen=True)

    view: ViewState
    sub_question: str
    invocation: ToolInvocation


class ReasoningPath(BaseModel):
    """Execution-ordered steps, main question and gold answer"""

    model_config = ConfigDict(frozen=True)

    format: Literal["v1"] = PATH_FORMAT
    path_id: str
    scene_id: str
    main_question: str
    gold_answer: str
    steps: Tuple[PathStep, ...]
    chain: Optional[Chain] = None

    @property
    def appended_answer(self) -> bool:
        """True when an Answer step consumes a terminal OCR result"""
        return (
            len(self.steps) >= 2
            and self.steps[-1].invocation.kind == ToolKind.ANSWER
            and self.steps[-2].invocation.kind == ToolKind.OCR
        )

    @property
    def edge_count(self) -> int:
        return len(self.steps) - (1 if self.appended_answer else 0)

    def edge_steps(self) -> List[PathStep]:
        """Steps realizing edges 1..M-1, in edge order (answer edge first)"""
        return list(reversed(self.steps[:self.edge_count]))

    def task(self) -> ReasoningTask:
        return ReasoningTask(task_id=self.path_id, scene_id=self.scene_id,
                             question=self.main_question, gold_answer=self.gold_answer)


class _PathScript:
    """Feeds generated edge steps to the engine, then answers from OCR output"""

    name = "synthesis"

    def __init__(self, script: Sequence[Tuple[str, ToolInvocation]], main_question: str, read_then_answer: bool):
        self.script = list(script)
        self.main_question = main_question
        self.read_then_answer = read_then_answer

    def step(self, view, question, prior_sub_questions, context=None):
        k = len(prior_sub_questions)
        if k < len(self.script):
            return self.script[k]
        if self.read_then_answer and k == len(self.script):
            return self.main_question, ToolInvocation.answer(self.main_question, list(context or ()))
        raise PolicyError("path script exhausted")


def synthesize_path(
    chain: Chain,
    questioner: Questioner,
    combiner: Combiner,
    scene: Scene,
    alpha: float = DEFAULT_ALPHA,
    path_id: Optional[str] = None,
) -> ReasoningPath:
    """
    Turn a chain into an executable reasoning path.

    Sub-questions come from the Questioner per edge; the main question folds
    them with the Combiner starting from the answer edge. Steps run in
    execution order (whole-image side first); a terminal OCR edge gets an
    Answer step that reads its characters.
    """
    generated = []
    for m, tool in enumerate(chain.edge_tools):
        head, tail = chain.nodes[m].profile, chain.nodes[m + 1].profile
        try:
            question, invocation = questioner.generate(head, tail, tool)
        except SynthesisError:
            raise
        except Exception as e:
            raise SynthesisError(f"questioner {questioner.name} failed on edge {m + 1}: {e}") from e
        if invocation.kind != tool:
            raise SynthesisError(f"questioner returned {invocation.kind.value} for a {tool.value} edge")
        generated.append((question, invocation))

    main_question = generated[0][0]
    for question, _ in generated[1:]:
        try:
            main_question = combiner.combine(main_question, question)
        except SynthesisError:
            raise
        except Exception as e:
            raise SynthesisError(f"combiner {combiner.name} failed: {e}") from e

    path_id = path_id or f"{scene.id}-path"
    script = list(reversed(generated))
    read_then_answer = chain.edge_tools[0] == ToolKind.OCR
    policy = _PathScript(script, main_question, read_then_answer)
    binding = ToolBackendBinding.oracle(SceneSet([scene]), alpha=alpha)
    task = ReasoningTask(task_id=path_id, scene_id=scene.id, question=main_question)
    trace = run(task, policy, binding, max_steps=len(script) + 1, context_passthrough=True)
    if trace.termination != Termination.ANSWERED:
        reason = trace.failed.error if trace.failed else trace.termination.value
        raise SynthesisError(f"oracle execution of {path_id} failed: {reason}")

    steps = tuple(PathStep(view=s.view_before, sub_question=s.sub_question, invocation=s.invocation)
                  for s in trace.steps)
    return ReasoningPath(path_id=path_id, scene_id=scene.id, main_question=main_question,
                         gold_answer=trace.final_answer, steps=steps, chain=chain)


# Validation

class ValidationReport(BaseModel):
    path_id: str
    sub_question_ok: bool
    argument_ok: bool
    main_question_ok: bool
    diagnostics: Tuple[str, ...] = ()

    @property
    def passed(self) -> bool:
        return self.sub_question_ok and self.argument_ok and self.main_question_ok


def _profile_described(profile, phrase: str) -> bool:
    if isinstance(profile, SingleEntityProfile):
        if not names_label(phrase, profile.label):
            return False
        colors = named_colors(phrase)
        return not colors or (profile.color is not None and profile.color.lower() in colors)
    if isinstance(profile, EntityGroupProfile):
        return names_label(phrase, profile.majority_label)
    return False


def _expected_answer(head, question: str) -> Optional[str]:
    parsed = parse_question(question)
    if isinstance(head, EntityGroupProfile):
        label = head.majority_label
        return str(sum(1 for member in head.member_labels if member == label))
    if isinstance(head, SingleEntityProfile):
        if parsed is not None and parsed.shape == "color":
            return head.color
        if head.text:
            return " ".join(head.text)
        return head.color
    return None


def _check_sub_questions(path: ReasoningPath, grammar: bool) -> List[str]:
    problems = []
    chain = path.chain
    edges = path.edge_steps()
    if chain is None:
        for e, step in enumerate(edges, start=1):
            if grammar and parse_question(step.sub_question) is None:
                problems.append(f"edge {e}: sub-question does not follow the template grammar")
            elif not step.sub_question.strip().endswith("?"):
                problems.append(f"edge {e}: sub-question is not a question")
        return problems

    if len(edges) != len(chain.edge_tools):
        return [f"{len(edges)} edge steps for a chain of {len(chain.edge_tools)} edges"]
    problems.extend(chain_violations(chain, max_chain_len=len(chain.nodes)))

    for e, (step, tool) in enumerate(zip(edges, chain.edge_tools)):
        head, tail = chain.nodes[e].profile, chain.nodes[e + 1].profile
        where = f"edge {e + 1}"
        if step.invocation.kind != tool:
            problems.append(f"{where}: step uses {step.invocation.kind.value}, chain says {tool.value}")
            continue

        if grammar:
            parsed = parse_question(step.sub_question)
            if parsed is None or parsed.shape not in _TOOL_SHAPES[tool]:
                problems.append(f"{where}: {step.sub_question!r} is not a {tool.value} question")
                continue
            expected_head = node_ref(head, with_color=parsed.shape != "color")
            if parsed.refs[0] != expected_head:
                problems.append(f"{where}: refers to {parsed.refs[0]!r}, profile gives {expected_head!r}")
            if list(parsed.refs[1:]) != context_refs(tail):
                problems.append(f"{where}: context {list(parsed.refs[1:])} does not match the tail node")
            if parsed.shape == "count" and not (
                isinstance(head, EntityGroupProfile) and parsed.plural_label == plural(head.majority_label)
            ):
                problems.append(f"{where}: counting question does not fit the head node")
            if parsed.shape == "color" and not (isinstance(head, SingleEntityProfile) and head.color):
                problems.append(f"{where}: head node has no color")
        else:
            label = head.label if isinstance(head, SingleEntityProfile) else getattr(head, "majority_label", "")
            if not names_label(step.sub_question, label):
                problems.append(f"{where}: sub-question never mentions {label!r}")

        if tool == ToolKind.ANSWER and _expected_answer(head, step.sub_question) is None:
            problems.append(f"{where}: head node lacks the asked attribute")
    return problems


def _check_arguments(path: ReasoningPath, scene: Scene, alpha: float) -> List[str]:
    problems = []
    chain = path.chain
    edges = path.edge_steps()
    if chain is not None and len(edges) == len(chain.edge_tools):
        for e, step in enumerate(edges):
            head = chain.nodes[e].profile
            inv = step.invocation
            if inv.kind.is_graphical and not _profile_described(head, inv.target_entity):
                problems.append(f"edge {e + 1}: target {inv.target_entity!r} does not describe the head node")

    binding = ToolBackendBinding.oracle(SceneSet([scene]), alpha=alpha)
    trace = run(path.task(), ScriptedPolicy.from_path(path), binding, max_steps=len(path.steps))
    if trace.termination != Termination.ANSWERED:
        reason = trace.failed.error if trace.failed else trace.termination.value
        problems.append(f"oracle replay did not answer: {reason}")
        return problems
    if len(trace.steps) != len(path.steps):
        problems.append(f"oracle replay ran {len(trace.steps)} steps, path has {len(path.steps)}")
        return problems
    if trace.final_answer != path.gold_answer:
        problems.append(f"oracle answer {trace.final_answer!r} differs from gold {path.gold_answer!r}")

    if chain is None or len(edges) != len(chain.edge_tools):
        return problems

    n = path.edge_count
    for e in range(n):
        head = chain.nodes[e].profile
        executed = trace.steps[n - 1 - e]
        output = executed.output
        where = f"edge {e + 1}"
        kind = executed.invocation.kind
        if kind == ToolKind.GROUNDING:
            mark = output.view.last_mark if isinstance(output, ImageOut) else None
            if mark is None or mark.ref_entity_ids != (getattr(head, "entity_id", None),):
                problems.append(f"{where}: grounding did not mark the head entity")
        elif kind == ToolKind.HIGHLIGHT:
            highlighted = set()
            if isinstance(output, ImageOut):
                highlighted = {i for a in output.view.highlights for i in a.ref_entity_ids}
            if isinstance(head, SingleEntityProfile):
                wanted = {head.entity_id}
            else:
                majority = head.majority_label
                wanted = {i for i, label in zip(head.member_ids, head.member_labels) if label == majority}
            if not wanted <= highlighted:
                problems.append(f"{where}: highlight missed {sorted(wanted - highlighted)}")
        elif kind == ToolKind.OCR:
            items = output.items if isinstance(output, TextOut) else ()
            if not set(head.text) <= set(items):
                problems.append(f"{where}: ocr did not read {list(head.text)}")
        elif kind == ToolKind.ANSWER:
            expected = _expected_answer(head, executed.sub_question)
            if not isinstance(output, AnswerOut) or output.answer != expected:
                problems.append(f"{where}: answer {getattr(output, 'answer', None)!r}, expected {expected!r}")

    if path.appended_answer:
        head = chain.nodes[0].profile
        expected = " ".join(head.text)
        if trace.final_answer != expected:
            problems.append(f"reading answer {trace.final_answer!r}, expected {expected!r}")
    return problems


def content_words(question: str) -> List[str]:
    return [w for w in words(question) if w not in STOPWORDS]


def redecompose(main_question: str, tools: Sequence[ToolKind]) -> Optional[List[str]]:
    """Recover the edge sub-questions of a template main question"""
    parsed = parse_question(main_question)
    if parsed is None or parsed.shape in ("where", "which") or len(parsed.refs) != len(tools):
        return None
    refs = list(parsed.refs)
    recovered = [compose(parsed.shape, refs[:2], parsed.plural_label)]
    for e in range(1, len(tools)):
        shape = "where" if tools[e] == ToolKind.GROUNDING else "which"
        recovered.append(compose(shape, refs[e:e + 2]))
    return recovered


def _check_main_question(path: ReasoningPath, grammar: bool) -> List[str]:
    problems = []
    main_words = set(words(path.main_question))
    edges = path.edge_steps()
    for e, step in enumerate(edges, start=1):
        missing = [w for w in content_words(step.sub_question) if w not in main_words]
        if missing:
            problems.append(f"edge {e}: main question lacks {missing}")
    if grammar:
        tools = [s.invocation.kind for s in edges]
        recovered = redecompose(path.main_question, tools)
        if recovered != [s.sub_question for s in edges]:
            problems.append("re-decomposing the main question does not recover the sub-questions")
    return problems


def validate_example(path: ReasoningPath, scene: Scene, alpha: float = DEFAULT_ALPHA,
                     grammar: bool = True) -> ValidationReport:
    """
    Three quality checks. Failures are report entries, never exceptions.

    sub_question: each sub-question is faithful to its node profiles and the
        tool can express its answer.
    argument: arguments describe the head node and oracle execution yields
        what the next step presupposes, ending in the gold answer.
    main_question: the main question covers every sub-question.

    ``grammar`` enables the template-grammar parts of the first and last check.
    """
    diagnostics: List[str] = []
    checks = []
    for check in (
        lambda: _check_sub_questions(path, grammar),
        lambda: _check_arguments(path, scene, alpha),
        lambda: _check_main_question(path, grammar),
    ):
        try:
            problems = check()
        except Exception as e:
            problems = [f"check crashed: {e}"]
        diagnostics.extend(problems)
        checks.append(not problems)
    return ValidationReport(path_id=path.path_id, sub_question_ok=checks[0], argument_ok=checks[1],
                            main_question_ok=checks[2], diagnostics=tuple(diagnostics))


# Dataset synthesis

MASK64 = (1 << 64) - 1


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, scene_id: str) -> int:
    """Per-scene seed, independent of processing order"""
    return splitmix64((seed & MASK64) ^ fnv1a64(scene_id))


def synthesize_scene(scene: Scene, binding: GeneratorBinding, per_scene: int,
                     max_chain_len: int = DEFAULT_MAX_CHAIN_LEN) -> List[ReasoningPath]:
    rng = random.Random(derive_seed(binding.rng_seed, scene.id))
    nodes = build_nodes(scene, recognize_entities(scene, binding.min_confidence), binding.proximity_delta)
    grammar = binding.uses_templates

    paths: List[ReasoningPath] = []
    seen = set()
    for _ in range(per_scene * binding.max_attempts):
        if len(paths) >= per_scene:
            break
        chain = sample_chain(nodes, rng, max_chain_len)
        if chain is None:
            break
        signature = chain.signature()
        if signature in seen:
            continue
        seen.add(signature)
        path_id = f"{scene.id}-{len(paths)}"
        try:
            path = synthesize_path(chain, binding.questioner, binding.combiner, scene,
                                   alpha=binding.alpha, path_id=path_id)
        except SynthesisError as e:
            logger.debug(f"Scene {scene.id}: dropped chain {signature[0]}: {e}")
            continue
        report = validate_example(path, scene, alpha=binding.alpha, grammar=grammar)
        if not report.passed:
            logger.debug(f"Scene {scene.id}: {path_id} failed validation: {'; '.join(report.diagnostics)}")
            continue
        paths.append(path)
    return paths


def synthesize_dataset(
    scenes: Iterable[Scene],
    binding: GeneratorBinding,
    per_scene: int,
    max_chain_len: int = DEFAULT_MAX_CHAIN_LEN,
    parallelism: int = 1,
    count: Optional[int] = None,
) -> List[ReasoningPath]:
    """
    Validated paths in scene order, then chain order.

    Output does not depend on ``parallelism``. ``count`` caps the total.
    """
    if per_scene < 1:
        raise DomainError(f"per_scene must be >= 1, got {per_scene}")
    scenes = list(scenes)

    def work(scene: Scene) -> List[ReasoningPath]:
        try:
            return synthesize_scene(scene, binding, per_scene, max_chain_len)
        except Exception as e:
            logger.warning(f"Scene {scene.id}: synthesis failed: {e}")
            return []

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(work, scenes))
    else:
        results = [work(scene) for scene in scenes]

    paths = [path for batch in results for path in batch]
    if count is not None:
        paths = paths[:count]
    logger.info(f"Synthesized {len(paths)} paths from {len(scenes)} scenes")
    return paths
