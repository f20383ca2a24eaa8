"""
Tests for answer metrics, error attribution and corpus evaluation.
"""

import json
import random

import pytest

from conftest import PROPERTY_RUNS
from reasonforge.canvas import add_mark, full_view
from reasonforge.errors import IdMismatchError
from reasonforge.evalharness import (
    ErrorLabel,
    MetricKind,
    classify_error,
    evaluate_corpus,
    normalize,
    render_report_table,
    report_json,
    same_output,
    score,
)
from reasonforge.reasoner import ScriptedPolicy, run
from reasonforge.scene import BBox
from reasonforge.tools import ImageOut, TextOut, ToolInvocation, ToolKind


class _ReplacingBackend:
    name = "replacing"

    def __init__(self, output):
        self.output = output

    def execute(self, view, invocation):
        return self.output


def _scripted(path, binding, script=None):
    policy = ScriptedPolicy(script) if script is not None else ScriptedPolicy.from_path(path)
    return run(path.task(), policy, binding)


def _script(path):
    return [(s.sub_question, s.invocation) for s in path.steps]


class TestMetrics:

    def test_normalize(self):
        assert normalize("  The   Answer is RED. ") == "the answer is red"
        assert normalize("STOP!?") == "stop"

    def test_em_and_recall(self):
        assert score("The answer is 2", "2", MetricKind.EM) == 0
        assert score("The answer is 2", "2", MetricKind.RECALL) == 1
        assert score("red.", "Red", MetricKind.EM) == 1
        assert score("blue", "red", MetricKind.RECALL) == 0

    @pytest.mark.parametrize("runs", PROPERTY_RUNS)
    def test_em_implies_recall(self, runs):
        rng = random.Random(1)
        vocabulary = ["red", "Red.", "2", "two", "STOP", "stop!", " the ", "bus"]
        for _ in range(runs):
            pred = " ".join(rng.choice(vocabulary) for _ in range(rng.randint(1, 3)))
            gold = " ".join(rng.choice(vocabulary) for _ in range(rng.randint(1, 2)))
            if score(pred, gold, MetricKind.EM):
                assert score(pred, gold, MetricKind.RECALL)


class TestClassification:

    def test_correct(self, oracle, gold_paths):
        for path in gold_paths:
            assert classify_error(_scripted(path, oracle), path, oracle) == ErrorLabel.CORRECT

    def test_wrong_tool(self, oracle, sign_path):
        script = _script(sign_path)
        script[0] = ("Which regions show the yellow bus?", ToolInvocation.highlight("the yellow bus"))
        trace = _scripted(sign_path, oracle, script)
        assert classify_error(trace, sign_path, oracle) == ErrorLabel.REASONING_TOOL

    def test_extra_steps_are_a_tool_error(self, oracle, count_path):
        script = [("Which regions show the persons?", ToolInvocation.highlight("persons"))] + _script(count_path)
        trace = _scripted(count_path, oracle, script)
        assert classify_error(trace, count_path, oracle) == ErrorLabel.REASONING_TOOL

    def test_wrong_arguments(self, oracle, sign_path):
        script = _script(sign_path)
        script[0] = ("Where is the person?", ToolInvocation.grounding("the person"))
        trace = _scripted(sign_path, oracle, script)
        assert classify_error(trace, sign_path, oracle) == ErrorLabel.REASONING_ARGUMENTS

    def test_equivalent_arguments_are_not_an_error(self, oracle, sign_path):
        script = _script(sign_path)
        script[0] = ("Where is the bus?", ToolInvocation.grounding("the bus"))
        trace = _scripted(sign_path, oracle, script)
        assert classify_error(trace, sign_path, oracle) == ErrorLabel.CORRECT

    def test_execution_error_is_attributed_to_the_tool(self, oracle, sign_path):
        misreading = oracle.with_backend(ToolKind.OCR, _ReplacingBackend(TextOut(items=("EXIT",))))
        trace = _scripted(sign_path, misreading)
        assert classify_error(trace, sign_path, oracle) == ErrorLabel.EXECUTION_OCR

    def test_failed_tool_call_is_an_execution_error(self, oracle, color_path):
        broken = oracle.with_backend(ToolKind.HIGHLIGHT, _ReplacingBackend(TextOut(items=())))
        trace = _scripted(color_path, broken)
        assert classify_error(trace, color_path, oracle) == ErrorLabel.EXECUTION_HIGHLIGHT

    def test_no_answer_is_missing(self, oracle, sign_path):
        trace = _scripted(sign_path, oracle, [])
        assert classify_error(trace, sign_path, oracle) == ErrorLabel.INFERENCE_MISSING

    def test_wrong_and_missing_inference(self, oracle, sign_path):
        trace = _scripted(sign_path, oracle)
        near_miss = sign_path.model_copy(update={"gold_answer": "STOP AHEAD"})
        assert classify_error(trace, near_miss, oracle) == ErrorLabel.INFERENCE_WRONG
        unrelated = sign_path.model_copy(update={"gold_answer": "EXIT"})
        assert classify_error(trace, unrelated, oracle) == ErrorLabel.INFERENCE_MISSING

    def test_same_output_tolerates_half_a_pixel(self, scene):
        a = ImageOut(view=add_mark(full_view(scene), BBox.of(10, 10, 40, 40)))
        b = ImageOut(view=add_mark(full_view(scene), BBox.of(10.4, 10, 40, 39.6)))
        c = ImageOut(view=add_mark(full_view(scene), BBox.of(12, 10, 40, 40)))
        assert same_output(a, b)
        assert not same_output(a, c)
        assert not same_output(a, TextOut(items=()))
        assert same_output(None, None)


class TestCorpus:

    def test_perfect_corpus(self, oracle, gold_paths):
        traces = [_scripted(p, oracle) for p in gold_paths]
        report = evaluate_corpus(traces, gold_paths, MetricKind.EM, oracle)
        assert report.accuracy == 1.0
        assert report.n == 3
        assert report.errors == {}
        assert report.by_steps == {"1": 1.0, "2": 1.0, "3": 1.0}

    def test_error_distribution(self, oracle, gold_paths):
        traces = [_scripted(p, oracle) for p in gold_paths]
        traces[0] = _scripted(gold_paths[0], oracle, [])
        report = evaluate_corpus(traces, gold_paths, MetricKind.RECALL, oracle, parallelism=2)
        assert report.accuracy == pytest.approx(2 / 3)
        assert report.errors == {"Inference_Missing": 1.0}
        assert report.by_steps["3"] == 0.0
        assert report.labels["s1-0"] == "Inference_Missing"

    def test_id_mismatch(self, oracle, gold_paths):
        traces = [_scripted(p, oracle) for p in gold_paths[:2]]
        with pytest.raises(IdMismatchError) as info:
            evaluate_corpus(traces, gold_paths, MetricKind.EM, oracle)
        assert info.value.missing_traces == ["s1-2"]
        assert info.value.missing_gold == []

    def test_report_json_and_table(self, oracle, gold_paths):
        traces = [_scripted(p, oracle) for p in gold_paths]
        report = evaluate_corpus(traces, gold_paths, MetricKind.EM, oracle)
        data = json.loads(report_json(report))
        assert data["accuracy"] == 1.0
        assert data["metric"] == "em"
        assert "labels" not in data
        assert render_report_table(report).row_count == 4
