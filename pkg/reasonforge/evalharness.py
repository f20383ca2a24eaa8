"""
Answer metrics and error attribution for reasoning traces.
"""

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union

from pydantic import BaseModel, Field
from rich.table import Table

from .errors import IdMismatchError
from .reasoner import Termination, Trace
from .synthesis import ReasoningPath
from .tools import AnswerOut, ImageOut, TextOut, ToolBackendBinding, ToolInvocation, ToolKind, dispatch

logger = logging.getLogger(__name__)

COORD_TOLERANCE = 0.5


class MetricKind(str, Enum):
    EM = "em"
    RECALL = "recall"


class ErrorLabel(str, Enum):
    REASONING_TOOL = "Reasoning_Tool"
    REASONING_ARGUMENTS = "Reasoning_Arguments"
    EXECUTION_GROUNDING = "Execution_Grounding"
    EXECUTION_OCR = "Execution_OCR"
    EXECUTION_HIGHLIGHT = "Execution_Highlight"
    INFERENCE_WRONG = "Inference_Wrong"
    INFERENCE_MISSING = "Inference_Missing"
    CORRECT = "Correct"


_EXECUTION_LABELS = {
    ToolKind.GROUNDING: ErrorLabel.EXECUTION_GROUNDING,
    ToolKind.OCR: ErrorLabel.EXECUTION_OCR,
    ToolKind.HIGHLIGHT: ErrorLabel.EXECUTION_HIGHLIGHT,
}


def normalize(answer: str) -> str:
    """Lowercase, trim, collapse whitespace, strip terminal . , ! ?"""
    text = " ".join(answer.lower().split())
    return text.rstrip(".,!?").strip()


def score(pred: str, gold: str, metric: MetricKind = MetricKind.EM) -> int:
    p, g = normalize(pred), normalize(gold)
    if MetricKind(metric) == MetricKind.EM:
        return int(p == g)
    return int(g in p)


def _tokens(text: str) -> Set[str]:
    return set(re.findall(r"[a-z0-9]+", normalize(text)))


def _close(a, b) -> bool:
    return all(abs(x - y) <= COORD_TOLERANCE for x, y in zip(a.as_list(), b.as_list()))


def same_output(a, b) -> bool:
    """Output equality with a half-pixel tolerance on image geometry"""
    if a is None or b is None:
        return a is b
    if type(a) is not type(b):
        return False
    if isinstance(a, ImageOut):
        va, vb = a.view, b.view
        if not _close(va.viewport, vb.viewport) or len(va.annotations) != len(vb.annotations):
            return False
        return all(x.kind == y.kind and _close(x.rect, y.rect) for x, y in zip(va.annotations, vb.annotations))
    if isinstance(a, TextOut):
        return a.items == b.items
    return isinstance(a, AnswerOut) and a.answer == b.answer


def _oracle(view, invocation: ToolInvocation, oracle: ToolBackendBinding):
    try:
        return dispatch(view, invocation, oracle)
    except Exception:
        return None


def _attempts(trace: Trace) -> List[Tuple[ToolInvocation, Optional[object], Optional[object]]]:
    """(invocation, recorded output, tool input view) per step, failed attempt last"""
    attempts = [(s.invocation, s.output, s.view_before) for s in trace.steps]
    failed = trace.failed
    if trace.termination == Termination.EXECUTION_ERROR and failed is not None and failed.invocation is not None:
        attempts.append((failed.invocation, None, None))
    return attempts


def classify_error(pred_trace: Trace, gold_path: ReasoningPath, binding: ToolBackendBinding) -> ErrorLabel:
    """
    Attribute a trace to one error category by walking it against the gold path.

    ``binding`` must be an oracle binding over the gold scenes. Arguments are
    compared by their oracle effect on the gold image, not by string.
    Tie cases: a trace that stops without an answer after matching every step
    it took is Inference_Missing; a failed Answer call is Inference_Missing.
    """
    attempts = _attempts(pred_trace)
    if not attempts:
        return ErrorLabel.INFERENCE_MISSING

    for k, (invocation, recorded, view_before) in enumerate(attempts):
        if k >= len(gold_path.steps):
            return ErrorLabel.REASONING_TOOL
        gold = gold_path.steps[k]
        if invocation.kind != gold.invocation.kind:
            return ErrorLabel.REASONING_TOOL

        expected = _oracle(gold.view, gold.invocation, binding)
        predicted = _oracle(gold.view, invocation, binding)
        if not same_output(predicted, expected):
            return ErrorLabel.REASONING_ARGUMENTS

        if invocation.kind == ToolKind.ANSWER:
            if recorded is None:
                return ErrorLabel.INFERENCE_MISSING
            continue
        replayed = _oracle(view_before, invocation, binding) if view_before is not None else None
        if recorded is None or not same_output(recorded, replayed):
            return _EXECUTION_LABELS[invocation.kind]

    final = pred_trace.final_answer
    if final is None:
        return ErrorLabel.INFERENCE_MISSING
    if score(final, gold_path.gold_answer, MetricKind.EM):
        return ErrorLabel.CORRECT
    if not _tokens(final) & _tokens(gold_path.gold_answer):
        return ErrorLabel.INFERENCE_MISSING
    return ErrorLabel.INFERENCE_WRONG


class EvalReport(BaseModel):
    accuracy: float
    metric: MetricKind
    n: int
    errors: Dict[str, float] = Field(default_factory=dict)
    by_steps: Dict[str, float] = Field(default_factory=dict)
    labels: Dict[str, str] = Field(default_factory=dict, exclude=True)


def evaluate_corpus(
    traces: Sequence[Trace],
    gold: Sequence[ReasoningPath],
    metric: MetricKind,
    binding: ToolBackendBinding,
    parallelism: int = 1,
) -> EvalReport:
    """Accuracy, error-label distribution over failures, accuracy by gold step count"""
    gold_by_id = {p.path_id: p for p in gold}
    trace_by_id = {t.task.task_id: t for t in traces}
    if set(gold_by_id) != set(trace_by_id):
        raise IdMismatchError(missing_gold=set(trace_by_id) - set(gold_by_id),
                              missing_traces=set(gold_by_id) - set(trace_by_id))

    ids = [p.path_id for p in gold]

    def judge(path_id: str) -> Tuple[int, ErrorLabel]:
        trace, path = trace_by_id[path_id], gold_by_id[path_id]
        return score(trace.final_answer or "", path.gold_answer, metric), classify_error(trace, path, binding)

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(judge, ids))
    else:
        results = [judge(i) for i in ids]

    correct = 0
    error_counts: Dict[ErrorLabel, int] = {}
    step_totals: Dict[int, List[int]] = {}
    labels = {}
    for path_id, (hit, label) in zip(ids, results):
        correct += hit
        labels[path_id] = label.value
        if label != ErrorLabel.CORRECT:
            error_counts[label] = error_counts.get(label, 0) + 1
        bucket = step_totals.setdefault(len(gold_by_id[path_id].steps), [0, 0])
        bucket[0] += hit
        bucket[1] += 1

    n = len(ids)
    total_errors = sum(error_counts.values())
    errors = {label.value: error_counts[label] / total_errors for label in ErrorLabel if label in error_counts}
    by_steps = {str(k): step_totals[k][0] / step_totals[k][1] for k in sorted(step_totals)}
    return EvalReport(accuracy=correct / n if n else 0.0, metric=MetricKind(metric), n=n,
                      errors=errors, by_steps=by_steps, labels=labels)


def report_json(report: EvalReport) -> str:
    return json.dumps(report.model_dump(mode="json"), indent=2) + "\n"


def write_report(path: Union[str, Path], report: EvalReport) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report_json(report), encoding="utf-8")
    return path


def render_report_table(report: EvalReport) -> Table:
    table = Table(title=f"Evaluation ({report.metric.value}, n={report.n})")
    table.add_column("Measure", style="cyan")
    table.add_column("Value", justify="right", style="green")
    table.add_row("accuracy", f"{report.accuracy:.4f}")
    for k, accuracy in report.by_steps.items():
        table.add_row(f"accuracy @ {k} steps", f"{accuracy:.4f}")
    for label, fraction in report.errors.items():
        table.add_row(label, f"{fraction:.2%}")
    return table
