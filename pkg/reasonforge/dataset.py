"""
Training-record emission, JSONL persistence and corpus statistics.

Every line written is one compact JSON object whose keys follow the model's
field order and carry ``"format": "v1"``.
"""

import json
import logging
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Type, TypeVar, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .canvas import ViewState, render
from .errors import AnnotationParseError, EmissionError
from .reasoner import ScriptedPolicy, Termination, Trace, run
from .scene import Scene, SceneSet
from .synthesis import NodeKind, PathStep, ReasoningPath
from .tools import (
    DEFAULT_ALPHA,
    AnswerOut,
    ImageOut,
    TextOut,
    ToolBackendBinding,
    ToolInvocation,
    ToolKind,
)

logger = logging.getLogger(__name__)

RECORD_FORMAT = "v1"
PATHS_FILE = "dataset.paths.jsonl"
STEPS_FILE = "dataset.steps.jsonl"
E2E_FILE = "dataset.e2e.jsonl"
TRACES_FILE = "traces.jsonl"
STATS_FILE = "stats.json"

Model = TypeVar("Model", bound=BaseModel)


class StepRecord(BaseModel):
    """Policy training example: image, main question, prior sub-questions -> label"""

    model_config = ConfigDict(frozen=True)

    format: Literal["v1"] = RECORD_FORMAT
    path_id: str
    scene_id: str
    step: int = Field(ge=1)
    view: ViewState
    image_path: Optional[str] = None
    main_question: str
    prior_sub_questions: Tuple[str, ...] = ()
    label_sub_question: str
    label_invocation: ToolInvocation
    gold_answer: str

    @model_validator(mode="after")
    def check_prefix(self) -> "StepRecord":
        if len(self.prior_sub_questions) != self.step - 1:
            raise ValueError(f"step {self.step} needs {self.step - 1} prior sub-questions")
        return self


class TranscriptEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    sub_question: str
    invocation: ToolInvocation
    output: str


class EndToEndRecord(BaseModel):
    """Whole reasoning process as one sequence of inputs and outputs"""

    model_config = ConfigDict(frozen=True)

    format: Literal["v1"] = RECORD_FORMAT
    path_id: str
    scene_id: str
    main_question: str
    transcript: Tuple[TranscriptEntry, ...]
    final_answer: str


class StatsReport(BaseModel):
    total: int = 0
    steps: int = 0
    by_steps: Dict[str, int] = Field(default_factory=dict)
    tools: Dict[str, int] = Field(default_factory=lambda: {k.value: 0 for k in ToolKind})
    node_kinds: Dict[str, int] = Field(default_factory=lambda: {k.value: 0 for k in NodeKind})
    per_scene: Dict[str, int] = Field(default_factory=dict)


def summarize_output(output: Union[ImageOut, TextOut, AnswerOut]) -> str:
    if isinstance(output, ImageOut):
        view = output.view
        return f"<image: {len(view.marks)} marks, {len(view.highlights)} highlights>"
    if isinstance(output, TextOut):
        return json.dumps(list(output.items), ensure_ascii=False)
    return output.answer


def _replay(path: ReasoningPath, scene: Scene, alpha: float) -> Trace:
    """Oracle replay of a path; any divergence names the offending step"""
    binding = ToolBackendBinding.oracle(SceneSet([scene]), alpha=alpha)
    trace = run(path.task(), ScriptedPolicy.from_path(path), binding, max_steps=len(path.steps))
    if trace.termination != Termination.ANSWERED:
        step = trace.error_step or len(trace.steps) + 1
        reason = trace.failed.error if trace.failed else trace.termination.value
        raise EmissionError(f"replay of {path.path_id} failed: {reason}", step=step)
    if len(trace.steps) != len(path.steps):
        raise EmissionError(f"replay of {path.path_id} stopped early", step=len(trace.steps))
    for executed, recorded in zip(trace.steps, path.steps):
        if executed.view_before != recorded.view:
            raise EmissionError(f"replayed image of {path.path_id} diverges from the path", step=executed.index)
    if trace.final_answer != path.gold_answer:
        raise EmissionError(f"replayed answer of {path.path_id} differs from gold", step=len(trace.steps))
    return trace


def emit_step_records(
    path: ReasoningPath,
    scene: Scene,
    alpha: float = DEFAULT_ALPHA,
    image_dir: Optional[Union[str, Path]] = None,
    render_size: Tuple[int, int] = (448, 448),
) -> List[StepRecord]:
    """One record per step; PNGs are written only when ``image_dir`` is given"""
    trace = _replay(path, scene, alpha)
    records = []
    prior: List[str] = []
    for executed in trace.steps:
        image_path = None
        if image_dir is not None:
            directory = Path(image_dir)
            directory.mkdir(parents=True, exist_ok=True)
            name = f"{path.path_id}-step{executed.index}.png"
            (directory / name).write_bytes(render(executed.view_before, scene, *render_size))
            image_path = name
        records.append(StepRecord(
            path_id=path.path_id,
            scene_id=path.scene_id,
            step=executed.index,
            view=executed.view_before,
            image_path=image_path,
            main_question=path.main_question,
            prior_sub_questions=tuple(prior),
            label_sub_question=executed.sub_question,
            label_invocation=executed.invocation,
            gold_answer=path.gold_answer,
        ))
        prior.append(executed.sub_question)
    return records


def emit_end_to_end(path: ReasoningPath, scene: Scene, alpha: float = DEFAULT_ALPHA) -> EndToEndRecord:
    trace = _replay(path, scene, alpha)
    transcript = tuple(
        TranscriptEntry(sub_question=s.sub_question, invocation=s.invocation, output=summarize_output(s.output))
        for s in trace.steps
    )
    return EndToEndRecord(path_id=path.path_id, scene_id=path.scene_id, main_question=path.main_question,
                          transcript=transcript, final_answer=trace.final_answer)


def records_to_path(records: Sequence[StepRecord]) -> ReasoningPath:
    """Rebuild a path (without its chain) from its step records"""
    if not records:
        raise EmissionError("no step records", step=1)
    ordered = sorted(records, key=lambda r: r.step)
    first = ordered[0]
    for position, record in enumerate(ordered, start=1):
        if record.step != position or record.path_id != first.path_id:
            raise EmissionError(f"records of {first.path_id} are not a contiguous step sequence", step=position)
    steps = tuple(PathStep(view=r.view, sub_question=r.label_sub_question, invocation=r.label_invocation)
                  for r in ordered)
    return ReasoningPath(path_id=first.path_id, scene_id=first.scene_id, main_question=first.main_question,
                         gold_answer=first.gold_answer, steps=steps)


def corpus_stats(paths: Iterable[ReasoningPath]) -> StatsReport:
    """Step-count, tool and node-kind histograms plus per-scene yield"""
    report = StatsReport()
    by_steps: Counter = Counter()
    per_scene: Counter = Counter()
    for path in paths:
        report.total += 1
        report.steps += len(path.steps)
        by_steps[len(path.steps)] += 1
        per_scene[path.scene_id] += 1
        for step in path.steps:
            report.tools[step.invocation.kind.value] += 1
        if path.chain is not None:
            for node in path.chain.nodes:
                report.node_kinds[node.kind.value] += 1
    report.by_steps = {str(k): by_steps[k] for k in sorted(by_steps)}
    report.per_scene = dict(sorted(per_scene.items()))
    return report


# JSONL persistence

def to_line(model: BaseModel) -> str:
    return json.dumps(model.model_dump(mode="json"), ensure_ascii=False, separators=(",", ":"))


def dump_jsonl(models: Iterable[BaseModel]) -> str:
    return "".join(to_line(m) + "\n" for m in models)


def write_jsonl(path: Union[str, Path], models: Iterable[BaseModel]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for model in models:
            f.write(to_line(model) + "\n")
    return path


def parse_jsonl(text: str, model: Type[Model], source: str = "<jsonl>") -> List[Model]:
    items = []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            items.append(model.model_validate(json.loads(line)))
        except (json.JSONDecodeError, ValidationError) as e:
            raise AnnotationParseError(str(e), record=f"{source}:{number}") from e
    return items


def read_jsonl(path: Union[str, Path], model: Type[Model]) -> List[Model]:
    path = Path(path)
    return parse_jsonl(path.read_text(encoding="utf-8"), model, source=str(path))


def read_paths(path: Union[str, Path]) -> List[ReasoningPath]:
    return read_jsonl(path, ReasoningPath)


def read_gold(path: Union[str, Path]) -> List[ReasoningPath]:
    """Gold paths from a paths file or, failing that shape, from step records"""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    first = next((line for line in text.splitlines() if line.strip()), None)
    if first is None:
        return []
    try:
        is_steps = "label_invocation" in json.loads(first)
    except (json.JSONDecodeError, TypeError) as e:
        raise AnnotationParseError(str(e), record=f"{path}:1") from e
    if not is_steps:
        return parse_jsonl(text, ReasoningPath, source=str(path))
    grouped: Dict[str, List[StepRecord]] = {}
    for record in parse_jsonl(text, StepRecord, source=str(path)):
        grouped.setdefault(record.path_id, []).append(record)
    return [records_to_path(records) for records in grouped.values()]


def read_traces(path: Union[str, Path]) -> List[Trace]:
    return read_jsonl(path, Trace)


def write_stats(path: Union[str, Path], report: StatsReport) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.model_dump(mode="json"), indent=2) + "\n", encoding="utf-8")
    return path


def write_corpus(
    out_dir: Union[str, Path],
    paths: Sequence[ReasoningPath],
    scenes: SceneSet,
    alpha: float = DEFAULT_ALPHA,
    render_images: bool = False,
    render_size: Tuple[int, int] = (448, 448),
) -> Dict[str, Path]:
    """Write paths, step records, end-to-end records and stats into ``out_dir``"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    image_dir = out / "images" if render_images else None

    step_records: List[StepRecord] = []
    e2e_records: List[EndToEndRecord] = []
    for path in paths:
        scene = scenes.get(path.scene_id)
        step_records.extend(emit_step_records(path, scene, alpha, image_dir=image_dir, render_size=render_size))
        e2e_records.append(emit_end_to_end(path, scene, alpha))

    written = {
        "paths": write_jsonl(out / PATHS_FILE, paths),
        "steps": write_jsonl(out / STEPS_FILE, step_records),
        "e2e": write_jsonl(out / E2E_FILE, e2e_records),
        "stats": write_stats(out / STATS_FILE, corpus_stats(paths)),
    }
    logger.info(f"Wrote {len(paths)} paths and {len(step_records)} step records to {out}")
    return written
