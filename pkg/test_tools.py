"""
Tests for tool invocations, the oracle backend, the crop rule and output checks.
"""

import random

import pytest
from pydantic import ValidationError

from conftest import PROPERTY_RUNS
from reasonforge.canvas import add_mark, full_view
from reasonforge.errors import DomainError, ExecutionError
from reasonforge.scene import BBox, area_fraction
from reasonforge.tools import (
    AnswerOut,
    ImageOut,
    TextOut,
    ToolBackendBinding,
    ToolInvocation,
    ToolKind,
    check_output,
    dispatch,
    invoke,
    names_label,
    oracle_answer,
    oracle_match,
    preprocess_for_tool,
    tool_output_adapter,
)


class TestInvocation:

    def test_arguments_follow_the_kind(self):
        assert ToolInvocation.grounding("the bus").args() == {"target_entity": "the bus"}
        assert ToolInvocation.ocr().args() == {}
        assert ToolInvocation.answer("Why?", ["A", "B"]).args() == {"question": "Why?", "characters": ["A", "B"]}

    @pytest.mark.parametrize("fields", [
        {"kind": "grounding"},
        {"kind": "highlight", "target_entity": "   "},
        {"kind": "grounding", "target_entity": "bus", "question": "extra"},
        {"kind": "ocr", "question": "what?"},
        {"kind": "answer"},
        {"kind": "answer", "question": "what?", "target_entity": "bus"},
        {"kind": "zoom", "target_entity": "bus"},
    ])
    def test_invalid_invocations_are_rejected(self, fields):
        with pytest.raises(ValidationError):
            ToolInvocation.model_validate(fields)

    def test_wire_form(self):
        invocation = ToolInvocation.from_wire("Grounding", {"target_entity": "the bus"})
        assert invocation == ToolInvocation.grounding("the bus")
        assert invocation.model_dump() == {"kind": "grounding", "target_entity": "the bus"}

    def test_kind_classes(self):
        assert ToolKind.GROUNDING.is_graphical and not ToolKind.GROUNDING.is_inferring
        assert ToolKind.OCR.is_inferring and ToolKind.ANSWER.is_inferring
        assert not ToolKind.HIGHLIGHT.is_inferring

    def test_output_adapter_discriminates(self):
        assert tool_output_adapter.validate_python({"kind": "text", "items": ["A"]}) == TextOut(items=("A",))
        assert tool_output_adapter.validate_python({"kind": "answer", "answer": "2"}) == AnswerOut(answer="2")


class TestPhraseMatching:

    def test_names_label_is_word_bounded(self):
        assert names_label("the persons", "person")
        assert names_label("two buses", "bus")
        assert not names_label("a busy street", "bus")

    def test_oracle_match_orders_largest_first(self, scene):
        assert [e.id for e in oracle_match(scene, scene.bounds, "the person")] == ["e3", "e4"]
        assert [e.id for e in oracle_match(scene, scene.bounds, "the blue person")] == ["e4"]
        assert oracle_match(scene, BBox.of(0, 0, 50, 50), "the person") == []


class TestOracle:

    def test_grounding_marks_the_largest_match(self, scene, oracle):
        out = invoke(full_view(scene), ToolInvocation.grounding("the yellow bus"), oracle)
        assert isinstance(out, ImageOut)
        assert out.view.last_mark.rect == BBox.of(10, 10, 40, 40)
        assert out.view.last_mark.ref_entity_ids == ("e1",)

        out = invoke(full_view(scene), ToolInvocation.grounding("the person"), oracle)
        assert out.view.last_mark.ref_entity_ids == ("e3",)

    def test_grounding_without_match_fails(self, scene, oracle):
        with pytest.raises(ExecutionError):
            invoke(full_view(scene), ToolInvocation.grounding("the giraffe"), oracle)

    def test_highlight_marks_every_match(self, scene, oracle):
        out = invoke(full_view(scene), ToolInvocation.highlight("persons"), oracle)
        assert [h.ref_entity_ids for h in out.view.highlights] == [("e3",), ("e4",)]

        unchanged = invoke(full_view(scene), ToolInvocation.highlight("giraffes"), oracle)
        assert unchanged.view == full_view(scene)

    def test_ocr_reads_visible_text(self, scene, oracle):
        assert invoke(full_view(scene), ToolInvocation.ocr(), oracle) == TextOut(items=("STOP",))
        corner = add_mark(full_view(scene), BBox.of(60, 60, 80, 80))
        assert invoke(corner, ToolInvocation.ocr(), oracle) == TextOut(items=())

    @pytest.mark.parametrize("question,expected", [
        ("What color is the person?", "red"),
        ("What color is the blue person?", "blue"),
        ("How many persons are in the image?", "2"),
        ("What is the text on the white sign near the yellow bus?", "STOP"),
    ])
    def test_answer_questions(self, scene, question, expected):
        assert oracle_answer(scene, full_view(scene), question) == expected

    def test_answer_resolves_pronouns_through_the_mark(self, scene, oracle):
        marked = invoke(full_view(scene), ToolInvocation.grounding("the yellow bus"), oracle).view
        assert invoke(marked, ToolInvocation.answer("What color is it?"), oracle).answer == "yellow"
        assert invoke(marked, ToolInvocation.answer("What kind of object is it?"), oracle).answer == "bus"

    def test_answer_counts_highlights(self, scene, oracle):
        highlighted = invoke(full_view(scene), ToolInvocation.highlight("persons"), oracle).view
        assert oracle_answer(scene, highlighted, "How many persons are there?") == "2"

    def test_answer_drops_characters_that_echo_the_question(self, scene):
        view = full_view(scene)
        answer = oracle_answer(scene, view, "What is written here?", ["What is written", "EXIT"])
        assert answer == "EXIT"

    def test_unanswerable_question(self, scene):
        with pytest.raises(ExecutionError):
            oracle_answer(scene, full_view(scene), "Why is the sky blue?")


class TestCropRule:

    def test_small_mark_is_cropped_for_inferring_tools(self, scene):
        view = add_mark(full_view(scene), BBox.of(10, 10, 40, 40))
        assert preprocess_for_tool(view, ToolKind.OCR, 0.2, scene).viewport == BBox.of(10, 10, 40, 40)
        assert preprocess_for_tool(view, ToolKind.ANSWER, 0.2, scene).viewport == BBox.of(10, 10, 40, 40)
        assert preprocess_for_tool(view, ToolKind.GROUNDING, 0.2, scene) is view
        assert preprocess_for_tool(view, ToolKind.OCR, 0.05, scene) is view

    def test_no_mark_no_crop(self, scene):
        view = full_view(scene)
        assert preprocess_for_tool(view, ToolKind.OCR, 1.0, scene) is view

    @pytest.mark.parametrize("runs", PROPERTY_RUNS)
    def test_crop_rule_property(self, scene, runs):
        rng = random.Random(11)
        for _ in range(runs):
            x0, y0 = rng.uniform(0, 90), rng.uniform(0, 90)
            rect = BBox.of(x0, y0, rng.uniform(x0 + 0.5, 100), rng.uniform(y0 + 0.5, 100))
            view = add_mark(full_view(scene), rect)
            alpha = rng.choice((0.05, 0.2, 0.5))
            kind = rng.choice(list(ToolKind))
            prepared = preprocess_for_tool(view, kind, alpha, scene)
            if kind.is_inferring and area_fraction(rect, scene) < alpha:
                assert prepared.viewport == rect
                assert prepared.last_mark.rect == rect
            else:
                assert prepared == view


class _FixedBackend:
    name = "fixed"
    endpoint = "http://fixed"

    def __init__(self, output=None, error=None):
        self.output = output
        self.error = error

    def execute(self, view, invocation):
        if self.error is not None:
            raise self.error
        return self.output


class TestDispatch:

    @pytest.mark.parametrize("kind,output", [
        (ToolKind.GROUNDING, TextOut(items=("x",))),
        (ToolKind.ANSWER, TextOut(items=("x",))),
        (ToolKind.OCR, AnswerOut(answer="x")),
        (ToolKind.ANSWER, "x"),
    ])
    def test_mismatched_outputs_are_rejected(self, kind, output):
        with pytest.raises(ExecutionError):
            check_output(kind, output)

    def test_backend_errors_become_execution_errors(self, scene, oracle):
        binding = oracle.with_backend(ToolKind.OCR, _FixedBackend(error=DomainError("bad crop")))
        with pytest.raises(ExecutionError) as info:
            dispatch(full_view(scene), ToolInvocation.ocr(), binding)
        assert info.value.kind == "ocr"
        assert info.value.endpoint == "http://fixed"

    def test_wrong_output_class_is_never_coerced(self, scene, oracle):
        binding = oracle.with_backend(ToolKind.GROUNDING, _FixedBackend(output=TextOut(items=("bus",))))
        with pytest.raises(ExecutionError):
            invoke(full_view(scene), ToolInvocation.grounding("the bus"), binding)


class TestBinding:

    def test_oracle_binding(self, oracle):
        assert oracle.describe() == {kind.value: "oracle" for kind in ToolKind}
        swapped = oracle.with_backend(ToolKind.OCR, _FixedBackend())
        assert swapped.describe()["ocr"] == "fixed"
        assert oracle.describe()["ocr"] == "oracle"

    def test_binding_validation(self, scenes, oracle):
        with pytest.raises(ValueError):
            ToolBackendBinding.oracle(scenes, alpha=0.0)
        with pytest.raises(ValueError):
            ToolBackendBinding(scenes, {ToolKind.OCR: oracle.backend_for(ToolKind.OCR)})
