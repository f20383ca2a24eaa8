"""
Least-to-most execution engine.

At every step the policy sees the current image, the main question and the
sub-questions asked so far, and proposes the next sub-question with a tool
call. Image outputs replace the current image; text outputs leave it as the
tool saw it. The run ends when the Answer tool is used.
"""

import logging
from enum import Enum
from typing import Any, List, Literal, Optional, Protocol, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .canvas import ViewState, full_view
from .errors import DomainError, PolicyError
from .tools import (
    AnswerOut,
    ImageOut,
    TextOut,
    ToolBackendBinding,
    ToolInvocation,
    ToolKind,
    ToolOutput,
    dispatch,
    output_class_of,
    preprocess_for_tool,
)

logger = logging.getLogger(__name__)

DEFAULT_MAX_STEPS = 8
TRACE_FORMAT = "v1"


class Termination(str, Enum):
    ANSWERED = "answered"
    MAX_STEPS = "max_steps"
    POLICY_ERROR = "policy_error"
    EXECUTION_ERROR = "execution_error"


class ReasoningTask(BaseModel):
    model_config = ConfigDict(frozen=True)

    task_id: str
    scene_id: str
    question: str
    gold_answer: Optional[str] = None

    @field_validator("question")
    @classmethod
    def question_not_blank(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("question must be non-empty")
        return v


class Step(BaseModel):
    """
    One executed step.

    ``view_in`` is the image shown to the policy, ``view_before`` the image
    the tool actually received (after crop-and-enlarge).
    """

    model_config = ConfigDict(frozen=True)

    index: int = Field(ge=1)
    view_in: ViewState
    view_before: ViewState
    sub_question: str
    invocation: ToolInvocation
    output: ToolOutput

    @model_validator(mode="after")
    def output_matches_tool(self) -> "Step":
        kind = self.invocation.kind
        if output_class_of(self.output) != kind.output_class:
            raise ValueError(f"{kind.value} step carries {self.output.kind} output")
        if kind == ToolKind.ANSWER and not isinstance(self.output, AnswerOut):
            raise ValueError("answer step must carry an answer output")
        if kind == ToolKind.OCR and not isinstance(self.output, TextOut):
            raise ValueError("ocr step must carry text items")
        return self


class FailedAttempt(BaseModel):
    """The step that ended a run early"""

    model_config = ConfigDict(frozen=True)

    index: int = Field(ge=1)
    sub_question: Optional[str] = None
    invocation: Optional[ToolInvocation] = None
    error: str


class Trace(BaseModel):
    model_config = ConfigDict(frozen=True)

    format: Literal["v1"] = TRACE_FORMAT
    task: ReasoningTask
    steps: Tuple[Step, ...] = ()
    final_answer: Optional[str] = None
    termination: Termination
    error_step: Optional[int] = None
    failed: Optional[FailedAttempt] = None

    @model_validator(mode="after")
    def check_termination(self) -> "Trace":
        answered = self.termination == Termination.ANSWERED
        ends_with_answer = bool(self.steps) and self.steps[-1].invocation.kind == ToolKind.ANSWER
        if answered != (self.final_answer is not None) or answered != ends_with_answer:
            raise ValueError("answered termination, final answer and last Answer step must agree")
        return self

    @property
    def path_id(self) -> str:
        return self.task.task_id


class Policy(Protocol):
    """Proposes (sub-question, tool invocation) from the current image"""

    name: str

    def step(
        self,
        view: ViewState,
        question: str,
        prior_sub_questions: Sequence[str],
        context: Optional[Sequence[str]] = None,
    ) -> Tuple[str, ToolInvocation]:
        ...


class ScriptedPolicy:
    """Replays a fixed list of (sub-question, invocation) pairs"""

    name = "scripted"

    def __init__(self, script: Sequence[Tuple[str, ToolInvocation]]):
        self.script = list(script)

    @classmethod
    def from_path(cls, path: Any) -> "ScriptedPolicy":
        """Script from any object whose ``steps`` carry sub_question and invocation"""
        return cls([(s.sub_question, s.invocation) for s in path.steps])

    @classmethod
    def from_trace(cls, trace: Trace) -> "ScriptedPolicy":
        script = [(s.sub_question, s.invocation) for s in trace.steps]
        if trace.failed is not None and trace.failed.invocation is not None:
            script.append((trace.failed.sub_question or "", trace.failed.invocation))
        return cls(script)

    def step(self, view, question, prior_sub_questions, context=None):
        k = len(prior_sub_questions)
        if k >= len(self.script):
            raise PolicyError(f"script exhausted after {len(self.script)} steps")
        return self.script[k]


def _stopped(task: ReasoningTask, steps: List[Step], termination: Termination,
             failed: FailedAttempt) -> Trace:
    return Trace(task=task, steps=tuple(steps), termination=termination,
                 error_step=failed.index, failed=failed)


def run(
    task: ReasoningTask,
    policy: Policy,
    binding: ToolBackendBinding,
    max_steps: int = DEFAULT_MAX_STEPS,
    context_passthrough: bool = False,
    initial_view: Optional[ViewState] = None,
) -> Trace:
    """
    Execute one reasoning task.

    Never raises past the trace: policy and tool failures end the run with a
    PolicyError / ExecutionError termination and the steps so far.
    """
    if max_steps < 1:
        raise DomainError(f"max_steps must be >= 1, got {max_steps}")

    try:
        scene = binding.scenes.get(task.scene_id)
    except DomainError as e:
        return _stopped(task, [], Termination.EXECUTION_ERROR, FailedAttempt(index=1, error=str(e)))

    view = initial_view if initial_view is not None else full_view(scene)
    steps: List[Step] = []
    prior: List[str] = []
    context: List[str] = []

    for k in range(1, max_steps + 1):
        try:
            sub_question, invocation = policy.step(
                view, task.question, tuple(prior), tuple(context) if context_passthrough else None
            )
            if not isinstance(invocation, ToolInvocation):
                raise PolicyError(f"policy returned {type(invocation).__name__}, not a tool invocation")
            if not isinstance(sub_question, str):
                raise PolicyError("policy returned a non-string sub-question")
        except Exception as e:
            logger.debug(f"Task {task.task_id}: policy failed at step {k}: {e}")
            return _stopped(task, steps, Termination.POLICY_ERROR, FailedAttempt(index=k, error=str(e)))

        try:
            prepared = preprocess_for_tool(view, invocation.kind, binding.alpha, scene)
            output = dispatch(prepared, invocation, binding)
            step = Step(index=k, view_in=view, view_before=prepared, sub_question=sub_question,
                        invocation=invocation, output=output)
        except Exception as e:
            logger.debug(f"Task {task.task_id}: {invocation.kind.value} failed at step {k}: {e}")
            return _stopped(task, steps, Termination.EXECUTION_ERROR, FailedAttempt(
                index=k, sub_question=sub_question, invocation=invocation, error=str(e)))

        steps.append(step)
        prior.append(sub_question)

        if isinstance(output, AnswerOut):
            return Trace(task=task, steps=tuple(steps), final_answer=output.answer,
                         termination=Termination.ANSWERED)
        if isinstance(output, ImageOut):
            view = output.view
        else:
            view = prepared
            if context_passthrough:
                context.extend(output.items)

    return Trace(task=task, steps=tuple(steps), termination=Termination.MAX_STEPS)


def replay(trace: Trace, binding: ToolBackendBinding) -> Trace:
    """Re-execute a trace's recorded invocations from its recorded starting view"""
    policy = ScriptedPolicy.from_trace(trace)
    if not policy.script:
        raise DomainError(f"trace {trace.task.task_id!r} has no steps to replay")
    initial_view = trace.steps[0].view_in if trace.steps else None
    return run(trace.task, policy, binding, max_steps=len(policy.script), initial_view=initial_view)


def first_divergence(a: Trace, b: Trace) -> Optional[int]:
    """1-based index of the first step whose invocation or output differs"""
    for left, right in zip(a.steps, b.steps):
        if left.invocation != right.invocation or left.output != right.output:
            return left.index
    if len(a.steps) != len(b.steps):
        return min(len(a.steps), len(b.steps)) + 1
    return None


def trace_violations(trace: Trace) -> List[str]:
    """Check step numbering and the image-state transition between steps"""
    problems = []
    for position, step in enumerate(trace.steps, start=1):
        if step.index != position:
            problems.append(f"step {position} carries index {step.index}")
    for current, following in zip(trace.steps, trace.steps[1:]):
        if isinstance(current.output, ImageOut):
            expected = current.output.view
        else:
            expected = current.view_before
        if following.view_in != expected:
            problems.append(f"step {following.index}: image does not follow from step {current.index}")
    if trace.termination == Termination.MAX_STEPS and trace.final_answer is not None:
        problems.append("max_steps termination carries a final answer")
    return problems
