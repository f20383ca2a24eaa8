"""
reasonforge

Least-to-most visual reasoning: an execution engine that decomposes a
question into tool-backed sub-questions, and a bottom-up pipeline that
synthesizes verified reasoning data from scene graphs.
"""

__version__ = "0.1.0"

# Core imports that should always work
from .errors import (
    AnnotationParseError,
    ConfigError,
    DomainError,
    EmissionError,
    ExecutionError,
    IdMismatchError,
    PolicyError,
    ReasonForgeError,
    RenderError,
    SynthesisError,
)
from .scene import BBox, Entity, Scene, SceneSet, generate_scenes, load_scenes
from .canvas import ViewState, add_highlights, add_mark, crop_zoom, full_view, render
from .tools import OracleToolBackend, ToolBackendBinding, ToolInvocation, ToolKind, invoke
from .reasoner import ReasoningTask, ScriptedPolicy, Termination, Trace, replay, run
from .synthesis import GeneratorBinding, ReasoningPath, synthesize_dataset, validate_example
from .dataset import emit_end_to_end, emit_step_records, write_corpus
from .evalharness import ErrorLabel, MetricKind, classify_error, evaluate_corpus, score
from .config import Config, load_config

# Optional imports that require external dependencies
_optional_imports = {}

try:
    from .client import RemotePolicy, RemoteToolBackend
    _optional_imports['RemotePolicy'] = RemotePolicy
    _optional_imports['RemoteToolBackend'] = RemoteToolBackend
except ImportError as e:
    _client_error = e

    def RemotePolicy(*args, **kwargs):
        raise ImportError(f"RemotePolicy requires httpx. Install with: pip install httpx\nOriginal error: {_client_error}")

    def RemoteToolBackend(*args, **kwargs):
        raise ImportError(f"RemoteToolBackend requires httpx. Install with: pip install httpx\nOriginal error: {_client_error}")
    _optional_imports['RemotePolicy'] = RemotePolicy
    _optional_imports['RemoteToolBackend'] = RemoteToolBackend

try:
    from .server import WireHandler, build_app
    _optional_imports['WireHandler'] = WireHandler
    _optional_imports['build_app'] = build_app
except ImportError as e:
    _server_error = e

    def WireHandler(*args, **kwargs):
        raise ImportError(f"WireHandler requires FastAPI. Install with: pip install fastapi uvicorn\nOriginal error: {_server_error}")

    def build_app(*args, **kwargs):
        raise ImportError(f"build_app requires FastAPI. Install with: pip install fastapi uvicorn\nOriginal error: {_server_error}")
    _optional_imports['WireHandler'] = WireHandler
    _optional_imports['build_app'] = build_app

RemotePolicy = _optional_imports['RemotePolicy']
RemoteToolBackend = _optional_imports['RemoteToolBackend']
WireHandler = _optional_imports['WireHandler']
build_app = _optional_imports['build_app']

__all__ = [
    "ReasonForgeError",
    "DomainError",
    "AnnotationParseError",
    "RenderError",
    "ExecutionError",
    "PolicyError",
    "SynthesisError",
    "EmissionError",
    "ConfigError",
    "IdMismatchError",
    "BBox",
    "Entity",
    "Scene",
    "SceneSet",
    "generate_scenes",
    "load_scenes",
    "ViewState",
    "full_view",
    "add_mark",
    "add_highlights",
    "crop_zoom",
    "render",
    "ToolKind",
    "ToolInvocation",
    "OracleToolBackend",
    "ToolBackendBinding",
    "invoke",
    "ReasoningTask",
    "ScriptedPolicy",
    "Termination",
    "Trace",
    "run",
    "replay",
    "GeneratorBinding",
    "ReasoningPath",
    "synthesize_dataset",
    "validate_example",
    "emit_step_records",
    "emit_end_to_end",
    "write_corpus",
    "MetricKind",
    "ErrorLabel",
    "score",
    "classify_error",
    "evaluate_corpus",
    "Config",
    "load_config",
    "RemotePolicy",
    "RemoteToolBackend",
    "WireHandler",
    "build_app",
    "check_dependencies",
]


def check_dependencies():
    """Check which optional dependencies are available"""
    status = {"core": True}
    for module, name in (("fastapi", "fastapi"), ("httpx", "httpx"), ("uvicorn", "uvicorn"),
                         ("yaml", "pyyaml"), ("dotenv", "python-dotenv"), ("rich", "rich"),
                         ("click", "click"), ("PIL", "pillow")):
        try:
            __import__(module)
            status[name] = True
        except ImportError:
            status[name] = False
    return status
