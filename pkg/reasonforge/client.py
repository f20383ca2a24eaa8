"""
Wire protocol client - remote tool, policy and generator backends.

Two transports carry identical JSON payloads: HTTP POST to
``{endpoint}{route}`` and newline-delimited JSON over a child process's
stdio, where each request line names its route under ``"endpoint"``.
Coordinates in tool responses are pixels of the rendered request image
and are mapped back to scene coordinates here.
"""

import json
import logging
import subprocess
import threading
import time
from collections import deque
from queue import Empty, Queue
from typing import Any, Deque, Dict, List, Optional, Sequence, Tuple, Union

import httpx
from pydantic import ValidationError

from . import __version__
from .canvas import ViewState, add_highlights, add_mark, encode_png_b64, from_pixels, render
from .config import BackendKind, BackendSpec, Transport
from .errors import ExecutionError, PolicyError, ReasonForgeError, SynthesisError
from .scene import SceneSet
from .tools import AnswerOut, ImageOut, TextOut, ToolInvocation, ToolKind, check_output

logger = logging.getLogger(__name__)

TOOL_ROUTE = "/v1/tool/invoke"
POLICY_ROUTE = "/v1/policy/step"
QUESTION_ROUTE = "/v1/generate/question"
COMBINE_ROUTE = "/v1/generate/combine"

DEFAULT_RENDER_SIZE = (448, 448)


class TransportError(ReasonForgeError):
    """Endpoint unreachable, timed out or replied with something that is not JSON"""


class WireClient:
    """
    HTTP transport for the wire protocol.

    Example:
        client = WireClient("http://localhost:8765")
        reply = client.post("/v1/tool/invoke", request)

    Args:
        endpoint: Base URL of the backend
        timeout: Request timeout in seconds
        max_in_flight: Concurrent requests allowed against this endpoint
        client: Pre-built ``httpx.Client`` (tests inject FastAPI's TestClient)
    """

    def __init__(
        self,
        endpoint: str,
        timeout: float = 30.0,
        max_in_flight: int = 1,
        client: Optional[httpx.Client] = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.headers = {
            "Content-Type": "application/json",
            "User-Agent": f"reasonforge/{__version__}",
        }
        self._client = client
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def _make_request(self, method: str, endpoint: str, data: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        url = f"{self.endpoint}{endpoint}"
        if self._client is not None:
            response = self._client.request(method=method, url=url, headers=self.headers, json=data,
                                            timeout=self.timeout)
        else:
            with httpx.Client(timeout=self.timeout) as client:
                response = client.request(method=method, url=url, headers=self.headers, json=data)
        response.raise_for_status()
        return response.json()

    def post(self, route: str, payload: Dict[str, Any]) -> Dict[str, Any]:
        with self._slots:
            try:
                return self._make_request("POST", route, payload)
            except (httpx.HTTPError, ValueError) as e:
                raise TransportError(f"{type(e).__name__}: {e}") from e

    def close(self) -> None:
        if self._client is not None:
            self._client.close()


class StdioTransport:
    """
    Newline-delimited JSON over a child process's stdin/stdout.

    Requests carry an ``id`` that the child echoes back; a reader thread
    routes replies to waiting callers so several requests may be in flight.
    """

    def __init__(self, command: Sequence[str], timeout: float = 30.0, max_in_flight: int = 1):
        self.command = list(command)
        self.endpoint = "stdio:" + " ".join(self.command)
        self.timeout = timeout
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._lock = threading.Lock()
        self._next_id = 1
        self._responses: Dict[int, Queue] = {}
        self._stderr_lines: Deque[str] = deque(maxlen=50)
        self._stdout_closed = threading.Event()
        try:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                text=True,
                encoding="utf-8",
                bufsize=1,
            )
        except OSError as e:
            raise TransportError(f"cannot start {self.command}: {e}") from e
        threading.Thread(target=self._read_loop, daemon=True).start()
        threading.Thread(target=self._read_stderr_loop, daemon=True).start()

    def _read_loop(self) -> None:
        try:
            for line in self._proc.stdout:
                line = line.strip()
                if not line:
                    continue
                try:
                    message = json.loads(line)
                except json.JSONDecodeError:
                    logger.warning(f"Ignoring non-JSON line from {self.endpoint}: {line[:80]}")
                    continue
                with self._lock:
                    waiting = self._responses.get(message.get("id"))
                if waiting is not None:
                    waiting.put(message)
        finally:
            self._stdout_closed.set()

    def _read_stderr_loop(self) -> None:
        for line in self._proc.stderr:
            line = line.strip()
            if line:
                with self._lock:
                    self._stderr_lines.append(line)

    def _stderr_summary(self) -> str:
        with self._lock:
            return " | ".join(self._stderr_lines) or "<no stderr>"

    def _assert_running(self, context: str) -> None:
        code = self._proc.poll()
        if code is not None:
            raise TransportError(f"process exited ({code}) during {context}. stderr: {self._stderr_summary()}")

    def post(self, route: str, payload: Dict[str, Any]) -> Dict[str, Any]:
        with self._slots:
            self._assert_running(f"{route} (pre-send)")
            with self._lock:
                request_id = self._next_id
                self._next_id += 1
                waiting: Queue = Queue(maxsize=1)
                self._responses[request_id] = waiting
            try:
                try:
                    self._proc.stdin.write(json.dumps({"id": request_id, "endpoint": route, **payload}) + "\n")
                    self._proc.stdin.flush()
                except (BrokenPipeError, OSError) as e:
                    self._assert_running(f"{route} (send)")
                    raise TransportError(f"failed to send {route}: {e}") from e

                deadline = time.monotonic() + self.timeout
                while True:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        raise TransportError(f"timeout waiting for {route}. stderr: {self._stderr_summary()}")
                    try:
                        reply = waiting.get(timeout=min(remaining, 0.5))
                    except Empty:
                        if self._stdout_closed.is_set():
                            self._assert_running(f"{route} (stdout closed)")
                            raise TransportError(f"stdout closed while waiting for {route}")
                        self._assert_running(f"{route} (wait)")
                        continue
                    reply.pop("id", None)
                    return reply
            finally:
                with self._lock:
                    self._responses.pop(request_id, None)

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.terminate()
            try:
                self._proc.wait(timeout=3)
            except subprocess.TimeoutExpired:
                self._proc.kill()


WireTransport = Union[WireClient, StdioTransport]


class TransportPool:
    """
    One transport per distinct endpoint, so the in-flight limit holds across
    every tool, policy and generator that shares it.
    """

    def __init__(self, http_client: Optional[httpx.Client] = None):
        self._http_client = http_client
        self._transports: Dict[str, WireTransport] = {}
        self._lock = threading.Lock()

    def get(self, spec: BackendSpec) -> WireTransport:
        if spec.kind != BackendKind.REMOTE:
            raise ValueError(f"{spec.kind.value} backend has no transport")
        key = spec.label()
        with self._lock:
            if key not in self._transports:
                if spec.transport == Transport.SUBPROCESS:
                    transport = StdioTransport(spec.command, timeout=spec.timeout,
                                               max_in_flight=spec.max_in_flight)
                else:
                    transport = WireClient(spec.endpoint, timeout=spec.timeout,
                                           max_in_flight=spec.max_in_flight, client=self._http_client)
                self._transports[key] = transport
            return self._transports[key]

    def close(self) -> None:
        with self._lock:
            for transport in self._transports.values():
                transport.close()
            self._transports.clear()


def _view_payload(view: ViewState, scenes: SceneSet, size: Tuple[int, int]) -> Dict[str, Any]:
    png = render(view, scenes.get(view.scene_id), *size)
    return {
        "view": view.model_dump(mode="json"),
        "image_png_b64": encode_png_b64(png),
        "image_size": list(size),
    }


def _checked_reply(reply: Any, what: str) -> Dict[str, Any]:
    if not isinstance(reply, dict):
        raise ValueError(f"{what} reply is not a JSON object")
    if reply.get("ok") is False:
        raise ValueError(reply.get("error") or "backend reported failure")
    return reply


def _boxes(raw: Any, field: str) -> List[List[float]]:
    if raw is None:
        return []
    if not isinstance(raw, list) or any(not isinstance(b, (list, tuple)) or len(b) != 4 for b in raw):
        raise ValueError(f"{field} must be a list of [x0, y0, x1, y1] boxes")
    return [list(b) for b in raw]


def _refs(raw: Any, count: int) -> List[List[str]]:
    if raw is None:
        return []
    if not isinstance(raw, list) or len(raw) != count:
        raise ValueError("refs must parallel the boxes")
    return [list(r) for r in raw]


class RemoteToolBackend:
    """
    Tool backend behind the wire protocol.

    The request image is the current view rendered at ``render_size``;
    returned marks/highlights are pixel boxes of that image and are appended
    to the view (clipped) in scene coordinates.
    """

    name = "remote"

    def __init__(self, transport: WireTransport, scenes: SceneSet,
                 render_size: Tuple[int, int] = DEFAULT_RENDER_SIZE):
        self.transport = transport
        self.scenes = scenes
        self.render_size = render_size
        self.endpoint = transport.endpoint

    def _fail(self, kind: ToolKind, message: str) -> ExecutionError:
        return ExecutionError(message, kind=kind.value, endpoint=self.endpoint)

    def execute(self, view: ViewState, invocation: ToolInvocation) -> Union[ImageOut, TextOut, AnswerOut]:
        kind = invocation.kind
        try:
            payload = {"tool": kind.value, "args": invocation.args(), **_view_payload(view, self.scenes,
                                                                                      self.render_size)}
        except ReasonForgeError as e:
            raise self._fail(kind, f"cannot render request image: {e}") from e
        try:
            reply = _checked_reply(self.transport.post(TOOL_ROUTE, payload), "tool")
            output = self._decode(view, kind, reply.get("output"))
        except ExecutionError:
            raise
        except (ReasonForgeError, ValueError, TypeError, ValidationError) as e:
            raise self._fail(kind, str(e)) from e
        check_output(kind, output, endpoint=self.endpoint)
        return output

    def _decode(self, view: ViewState, kind: ToolKind, output: Any) -> Union[ImageOut, TextOut, AnswerOut]:
        if not isinstance(output, dict):
            raise ValueError("reply carries no output object")
        out_kind = output.get("kind")
        if out_kind == "image":
            return ImageOut(view=self._apply_boxes(view, kind, output))
        if out_kind == "text":
            items = output.get("items")
            if not isinstance(items, list) or not all(isinstance(i, str) for i in items):
                raise ValueError("text output items must be strings")
            if kind == ToolKind.ANSWER:
                if len(items) != 1:
                    raise self._fail(kind, f"answer tool returned {len(items)} text items")
                return AnswerOut(answer=items[0])
            return TextOut(items=tuple(items))
        if out_kind == "answer":
            answer = output.get("answer")
            if not isinstance(answer, str):
                raise ValueError("answer output must carry a string")
            return AnswerOut(answer=answer)
        raise ValueError(f"unknown output kind {out_kind!r}")

    def _apply_boxes(self, view: ViewState, kind: ToolKind, output: Dict[str, Any]) -> ViewState:
        w, h = self.render_size
        marks = _boxes(output.get("marks"), "marks")
        highlights = _boxes(output.get("highlights"), "highlights")
        mark_refs = _refs(output.get("mark_refs"), len(marks))
        highlight_refs = _refs(output.get("highlight_refs"), len(highlights))
        if kind == ToolKind.GROUNDING and not marks:
            raise self._fail(kind, "grounding reply carries no mark")
        for i, box in enumerate(marks):
            view = add_mark(view, from_pixels(view.viewport, box, w, h), mark_refs[i] if mark_refs else ())
        rects = [from_pixels(view.viewport, box, w, h) for box in highlights]
        return add_highlights(view, rects, highlight_refs)


class RemotePolicy:
    """Policy model behind ``/v1/policy/step``"""

    name = "remote"

    def __init__(self, transport: WireTransport, scenes: SceneSet,
                 render_size: Tuple[int, int] = DEFAULT_RENDER_SIZE):
        self.transport = transport
        self.scenes = scenes
        self.render_size = render_size
        self.endpoint = transport.endpoint

    def step(self, view, question, prior_sub_questions, context=None) -> Tuple[str, ToolInvocation]:
        payload = {
            "question": question,
            "prior_sub_questions": list(prior_sub_questions),
            **_view_payload(view, self.scenes, self.render_size),
        }
        if context is not None:
            payload["context"] = list(context)
        try:
            reply = _checked_reply(self.transport.post(POLICY_ROUTE, payload), "policy")
            sub_question = reply["sub_question"]
            if not isinstance(sub_question, str):
                raise ValueError("sub_question must be a string")
            return sub_question, ToolInvocation.from_wire(reply["tool"], reply.get("args"))
        except (ReasonForgeError, KeyError, ValueError, TypeError, ValidationError) as e:
            raise PolicyError(f"{self.endpoint}: {e}") from e


class RemoteQuestioner:
    """Questioner model behind ``/v1/generate/question``"""

    name = "remote"

    def __init__(self, transport: WireTransport):
        self.transport = transport
        self.endpoint = transport.endpoint

    def generate(self, head, tail, tool: ToolKind) -> Tuple[str, ToolInvocation]:
        payload = {
            "head_profile": head.model_dump(mode="json"),
            "tail_profile": tail.model_dump(mode="json"),
            "tool": ToolKind(tool).value,
        }
        try:
            reply = _checked_reply(self.transport.post(QUESTION_ROUTE, payload), "questioner")
            sub_question = reply["sub_question"]
            if not isinstance(sub_question, str) or not sub_question.strip():
                raise ValueError("sub_question must be a non-empty string")
            return sub_question, ToolInvocation.from_wire(ToolKind(tool).value, reply.get("args"))
        except (ReasonForgeError, KeyError, ValueError, TypeError, ValidationError) as e:
            raise SynthesisError(f"{self.endpoint}: {e}") from e


class RemoteCombiner:
    """Combiner model behind ``/v1/generate/combine``"""

    name = "remote"

    def __init__(self, transport: WireTransport):
        self.transport = transport
        self.endpoint = transport.endpoint

    def combine(self, outer: str, inner: str) -> str:
        try:
            reply = _checked_reply(self.transport.post(COMBINE_ROUTE, {"outer": outer, "inner": inner}),
                                   "combiner")
            question = reply["question"]
            if not isinstance(question, str) or not question.strip():
                raise ValueError("question must be a non-empty string")
            return question
        except (ReasonForgeError, KeyError, ValueError, TypeError) as e:
            raise SynthesisError(f"{self.endpoint}: {e}") from e
