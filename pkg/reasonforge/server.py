"""
Oracle wire server - serves oracle tools, a scripted policy and the template
generators over the wire protocol, via HTTP (FastAPI + uvicorn) or stdio.
"""

import json
import logging
import sys
from contextlib import asynccontextmanager
from typing import Any, Callable, Dict, Optional, Sequence, TextIO, Tuple

import uvicorn
from fastapi import FastAPI, Request
from pydantic import TypeAdapter

from . import __version__
from .canvas import AnnotationKind, ViewState, to_pixels
from .client import COMBINE_ROUTE, POLICY_ROUTE, QUESTION_ROUTE, TOOL_ROUTE
from .errors import PolicyError
from .scene import SceneSet
from .synthesis import NodeProfile, ReasoningPath, TemplateCombiner, TemplateQuestioner
from .tools import DEFAULT_ALPHA, AnswerOut, ImageOut, OracleToolBackend, ToolInvocation, ToolKind

logger = logging.getLogger(__name__)

profile_adapter: TypeAdapter = TypeAdapter(NodeProfile)


@asynccontextmanager
async def lifespan(app):
    """Lifespan manager for the FastAPI app"""
    logger.info("Starting reasonforge oracle server")
    yield
    logger.info("Shutting down reasonforge oracle server")


class WireHandler:
    """
    Route dispatcher shared by the HTTP app and the stdio loop.

    Args:
        scenes: Scenes the oracle tools answer from
        paths: Gold paths the scripted policy replays, looked up by main question
        alpha: Reported in /health only; requests arrive already preprocessed
    """

    def __init__(self, scenes: SceneSet, paths: Sequence[ReasoningPath] = (), alpha: float = DEFAULT_ALPHA):
        self.scenes = scenes
        self.alpha = alpha
        self.oracle = OracleToolBackend(scenes)
        self.questioner = TemplateQuestioner()
        self.combiner = TemplateCombiner()
        self.scripts: Dict[Tuple[str, str], ReasoningPath] = {(p.scene_id, p.main_question): p for p in paths}
        self.routes: Dict[str, Callable[[Dict[str, Any]], Dict[str, Any]]] = {
            TOOL_ROUTE: self.tool_invoke,
            POLICY_ROUTE: self.policy_step,
            QUESTION_ROUTE: self.generate_question,
            COMBINE_ROUTE: self.generate_combine,
        }

    def health(self) -> Dict[str, Any]:
        return {
            "status": "healthy",
            "version": __version__,
            "scenes": len(self.scenes),
            "paths": len(self.scripts),
            "routes": sorted(self.routes),
        }

    def handle(self, route: Optional[str], payload: Any) -> Dict[str, Any]:
        if route not in self.routes:
            return {"ok": False, "error": f"unknown endpoint {route!r}"}
        if not isinstance(payload, dict):
            return {"ok": False, "error": "request body must be a JSON object"}
        try:
            return {"ok": True, **self.routes[route](payload)}
        except Exception as e:
            logger.debug(f"{route} failed: {e}")
            return {"ok": False, "error": str(e)}

    def tool_invoke(self, payload: Dict[str, Any]) -> Dict[str, Any]:
        view = ViewState.model_validate(payload["view"])
        invocation = ToolInvocation.from_wire(payload["tool"], payload.get("args"))
        output = self.oracle.execute(view, invocation)
        if isinstance(output, AnswerOut):
            return {"output": {"kind": "text", "items": [output.answer]}}
        if not isinstance(output, ImageOut):
            return {"output": {"kind": "text", "items": list(output.items)}}

        size = payload.get("image_size") or [view.viewport.width, view.viewport.height]
        w, h = float(size[0]), float(size[1])
        added = output.view.annotations[len(view.annotations):]
        marks = [a for a in added if a.kind == AnnotationKind.MARK]
        highlights = [a for a in added if a.kind == AnnotationKind.HIGHLIGHT]
        return {"output": {
            "kind": "image",
            "marks": [list(to_pixels(view.viewport, a.rect, w, h)) for a in marks],
            "highlights": [list(to_pixels(view.viewport, a.rect, w, h)) for a in highlights],
            "mark_refs": [list(a.ref_entity_ids) for a in marks],
            "highlight_refs": [list(a.ref_entity_ids) for a in highlights],
        }}

    def policy_step(self, payload: Dict[str, Any]) -> Dict[str, Any]:
        view = ViewState.model_validate(payload["view"])
        path = self.scripts.get((view.scene_id, payload["question"]))
        if path is None:
            raise PolicyError(f"no scripted path for question {payload['question']!r}")
        k = len(payload.get("prior_sub_questions") or [])
        if k >= len(path.steps):
            raise PolicyError(f"script exhausted after {len(path.steps)} steps")
        step = path.steps[k]
        return {"sub_question": step.sub_question, "tool": step.invocation.kind.value,
                "args": step.invocation.args()}

    def generate_question(self, payload: Dict[str, Any]) -> Dict[str, Any]:
        head = profile_adapter.validate_python(payload["head_profile"])
        tail = profile_adapter.validate_python(payload["tail_profile"])
        question, invocation = self.questioner.generate(head, tail, ToolKind(payload["tool"]))
        return {"sub_question": question, "args": invocation.args()}

    def generate_combine(self, payload: Dict[str, Any]) -> Dict[str, Any]:
        return {"question": self.combiner.combine(payload["outer"], payload["inner"])}


def build_app(handler: WireHandler) -> FastAPI:
    app = FastAPI(title="reasonforge oracle server", version=__version__, lifespan=lifespan)

    @app.get("/health")
    async def health_check():
        """Health check endpoint"""
        return handler.health()

    def add_route(route: str) -> None:
        async def endpoint(request: Request):
            try:
                payload = await request.json()
            except ValueError as e:
                return {"ok": False, "error": f"invalid JSON: {e}"}
            return handler.handle(route, payload)

        app.post(route)(endpoint)

    for route in handler.routes:
        add_route(route)
    return app


def serve(
    handler: WireHandler,
    host: str = "127.0.0.1",
    port: int = 8765,
    log_level: str = "info",
) -> None:
    """
    Serve the oracle over HTTP using Uvicorn.

    Example:
        serve(WireHandler(load_scenes("scenes.json")), port=8765)
    """
    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    logger.info(f"Starting oracle server on {host}:{port} with {len(handler.scenes)} scenes")
    try:
        uvicorn.run(build_app(handler), host=host, port=port, log_level=log_level)
    except Exception as e:
        logger.error(f"Failed to start server: {e}")
        raise


def serve_stdio(handler: WireHandler, stdin: Optional[TextIO] = None, stdout: Optional[TextIO] = None) -> int:
    """
    Newline-delimited JSON loop until stdin closes; returns requests served.

    Each request line names its route under ``"endpoint"``; an ``"id"`` key is
    echoed back unchanged.
    """
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    served = 0
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            message = json.loads(line)
        except json.JSONDecodeError as e:
            reply: Dict[str, Any] = {"ok": False, "error": f"invalid JSON: {e}"}
        else:
            if isinstance(message, dict):
                request_id = message.pop("id", None)
                reply = handler.handle(message.pop("endpoint", None), message)
                if request_id is not None:
                    reply["id"] = request_id
            else:
                reply = handler.handle(None, message)
        stdout.write(json.dumps(reply, ensure_ascii=False) + "\n")
        stdout.flush()
        served += 1
    return served
