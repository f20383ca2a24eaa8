"""
Tests for the wire protocol: the oracle server over FastAPI's TestClient and
stdio, and the remote backends that talk to it.
"""

import io
import json
import sys

import pytest
from fastapi.testclient import TestClient

from conftest import template_path
from reasonforge.canvas import add_mark, full_view
from reasonforge.client import (
    COMBINE_ROUTE,
    TOOL_ROUTE,
    RemoteCombiner,
    RemotePolicy,
    RemoteQuestioner,
    RemoteToolBackend,
    StdioTransport,
    TransportError,
    WireClient,
)
from reasonforge.errors import ExecutionError, PolicyError, SynthesisError
from reasonforge.evalharness import same_output
from reasonforge.reasoner import ScriptedPolicy, Termination, run
from reasonforge.scene import BBox
from reasonforge.server import WireHandler, build_app, serve_stdio
from reasonforge.synthesis import TemplateQuestioner, synthesize_path
from reasonforge.tools import ToolInvocation, ToolKind, invoke


@pytest.fixture
def handler(scenes, gold_paths):
    return WireHandler(scenes, gold_paths, alpha=0.2)


@pytest.fixture
def wire(handler):
    test_client = TestClient(build_app(handler))
    yield WireClient("http://testserver", timeout=5.0, max_in_flight=2, client=test_client)
    test_client.close()


@pytest.fixture
def remote_tools(oracle, scenes, wire):
    backend = RemoteToolBackend(wire, scenes, render_size=(448, 448))
    binding = oracle
    for kind in ToolKind:
        binding = binding.with_backend(kind, backend)
    return binding


def test_health(handler):
    with TestClient(build_app(handler)) as client:
        response = client.get("/health")
    assert response.status_code == 200
    data = response.json()
    assert data["status"] == "healthy"
    assert (data["scenes"], data["paths"]) == (1, 3)
    assert TOOL_ROUTE in data["routes"]


class TestRemoteTools:

    @pytest.mark.parametrize("invocation", [
        ToolInvocation.grounding("the yellow bus"),
        ToolInvocation.highlight("persons"),
        ToolInvocation.ocr(),
        ToolInvocation.answer("How many persons are in the image?"),
    ])
    def test_outputs_match_the_local_oracle(self, scene, oracle, remote_tools, invocation):
        view = full_view(scene)
        assert same_output(invoke(view, invocation, remote_tools), invoke(view, invocation, oracle))

    def test_marks_keep_their_entity_refs(self, scene, remote_tools):
        out = invoke(full_view(scene), ToolInvocation.grounding("the yellow bus"), remote_tools)
        mark = out.view.last_mark
        assert mark.ref_entity_ids == ("e1",)
        assert mark.rect.x0 == pytest.approx(10, abs=1e-6)
        assert mark.rect.y1 == pytest.approx(40, abs=1e-6)

    def test_cropped_view_reads_the_sign(self, scene, remote_tools):
        view = add_mark(full_view(scene), BBox.of(10, 10, 40, 40), ("e1",))
        assert invoke(view, ToolInvocation.ocr(), remote_tools).items == ("STOP",)

    def test_scripted_runs_match_the_oracle(self, remote_tools, gold_paths):
        for path in gold_paths:
            trace = run(path.task(), ScriptedPolicy.from_path(path), remote_tools)
            assert trace.termination == Termination.ANSWERED
            assert trace.final_answer == path.gold_answer

    def test_backend_failure_is_an_execution_error(self, scene, scenes, wire):
        backend = RemoteToolBackend(wire, scenes)
        with pytest.raises(ExecutionError) as info:
            backend.execute(full_view(scene), ToolInvocation.grounding("a unicorn"))
        assert info.value.endpoint == "http://testserver"

    def test_unreachable_endpoint_ends_the_run(self, oracle, scenes, sign_path):
        dead = RemoteToolBackend(WireClient("http://127.0.0.1:9", timeout=0.5), scenes)
        binding = oracle.with_backend(ToolKind.GROUNDING, dead)
        trace = run(sign_path.task(), ScriptedPolicy.from_path(sign_path), binding)
        assert trace.termination == Termination.EXECUTION_ERROR
        assert trace.error_step == 1
        assert trace.final_answer is None


class TestRemotePolicy:

    def test_scripted_policy_route(self, oracle, scenes, wire, gold_paths):
        policy = RemotePolicy(wire, scenes, render_size=(64, 64))
        for path in gold_paths:
            trace = run(path.task(), policy, oracle)
            assert trace.termination == Termination.ANSWERED
            assert [s.sub_question for s in trace.steps] == [s.sub_question for s in path.steps]
            assert trace.final_answer == path.gold_answer

    def test_unknown_question_is_a_policy_error(self, scene, scenes, wire):
        policy = RemotePolicy(wire, scenes, render_size=(64, 64))
        with pytest.raises(PolicyError):
            policy.step(full_view(scene), "Is this a question nobody scripted?", [])


class TestRemoteGenerators:

    def test_remote_generators_match_the_templates(self, scene, wire, sign_path, color_path):
        for path in (sign_path, color_path):
            remote = synthesize_path(path.chain, RemoteQuestioner(wire), RemoteCombiner(wire), scene,
                                     alpha=0.2, path_id=path.path_id)
            assert remote == template_path(scene, path.chain, path.path_id)

    def test_unparseable_inner_question_is_a_synthesis_error(self, wire):
        with pytest.raises(SynthesisError):
            RemoteCombiner(wire).combine("What is the text on the white sign?", "the bus")

    def test_question_route_matches_the_template(self, nodes, wire):
        head, tail = nodes["entity:e1"].profile, nodes["whole"].profile
        question, invocation = RemoteQuestioner(wire).generate(head, tail, ToolKind.GROUNDING)
        assert (question, invocation) == TemplateQuestioner().generate(head, tail, ToolKind.GROUNDING)


class TestStdio:

    def test_serve_stdio_echoes_ids(self, handler):
        requests = [
            json.dumps({"id": 7, "endpoint": COMBINE_ROUTE, "outer": "What is the text on the white sign?",
                        "inner": "Where is the yellow bus?"}),
            "",
            "not json",
            json.dumps({"endpoint": "/v1/nope"}),
        ]
        stdout = io.StringIO()
        served = serve_stdio(handler, io.StringIO("\n".join(requests) + "\n"), stdout)
        assert served == 3
        replies = [json.loads(line) for line in stdout.getvalue().splitlines()]
        assert replies[0] == {"ok": True, "question": "What is the text on the white sign?", "id": 7}
        assert replies[1]["ok"] is False and "invalid JSON" in replies[1]["error"]
        assert replies[2] == {"ok": False, "error": "unknown endpoint '/v1/nope'"}

    def test_subprocess_transport(self, scene, scenes, scene_file, oracle):
        command = [sys.executable, "-m", "reasonforge.cli", "serve", "--stdio", "--scenes", str(scene_file)]
        transport = StdioTransport(command, timeout=30.0, max_in_flight=2)
        try:
            backend = RemoteToolBackend(transport, scenes, render_size=(100, 100))
            view = add_mark(full_view(scene), BBox.of(10, 10, 40, 40), ("e1",))
            out = invoke(view, ToolInvocation.ocr(), oracle.with_backend(ToolKind.OCR, backend))
            assert out.items == ("STOP",)
            assert transport.endpoint.startswith("stdio:")
        finally:
            transport.close()

    def test_missing_command(self):
        with pytest.raises(TransportError):
            StdioTransport(["/nonexistent/reasonforge-backend"])
