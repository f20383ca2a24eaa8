"""
Run configuration: defaults, YAML/JSON config files and flag overrides.

Precedence is built-in defaults < config file < command-line flags. The
config file defaults to ``$REASONFORGE_CONFIG`` (a ``.env`` file in the
working directory is honoured).
"""

import json
import logging
import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError
from .reasoner import DEFAULT_MAX_STEPS
from .synthesis import DEFAULT_DELTA, DEFAULT_MAX_ATTEMPTS, DEFAULT_MAX_CHAIN_LEN, DEFAULT_MIN_CONFIDENCE
from .tools import DEFAULT_ALPHA, ToolKind

logger = logging.getLogger(__name__)

CONFIG_ENV_VAR = "REASONFORGE_CONFIG"


class BackendKind(str, Enum):
    ORACLE = "oracle"
    TEMPLATE = "template"
    SCRIPTED = "scripted"
    REMOTE = "remote"


class Transport(str, Enum):
    HTTP = "http"
    SUBPROCESS = "subprocess"


class BackendSpec(BaseModel):
    """Where one tool, the policy or a generator runs"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: BackendKind = BackendKind.ORACLE
    endpoint: Optional[str] = None
    transport: Transport = Transport.HTTP
    command: List[str] = Field(default_factory=list)
    timeout: float = Field(default=30.0, gt=0)
    max_in_flight: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def check_remote(self) -> "BackendSpec":
        if self.kind == BackendKind.REMOTE:
            if self.transport == Transport.HTTP and not self.endpoint:
                raise ValueError("remote http backend needs an endpoint")
            if self.transport == Transport.SUBPROCESS and not self.command:
                raise ValueError("remote subprocess backend needs a command")
        return self

    def label(self) -> str:
        if self.kind != BackendKind.REMOTE:
            return self.kind.value
        if self.transport == Transport.SUBPROCESS:
            return "stdio:" + " ".join(self.command)
        return self.endpoint or ""


class BackendsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    grounding: BackendSpec = BackendSpec()
    highlight: BackendSpec = BackendSpec()
    ocr: BackendSpec = BackendSpec()
    answer: BackendSpec = BackendSpec()
    policy: BackendSpec = BackendSpec(kind=BackendKind.SCRIPTED)
    questioner: BackendSpec = BackendSpec(kind=BackendKind.TEMPLATE)
    combiner: BackendSpec = BackendSpec(kind=BackendKind.TEMPLATE)

    @model_validator(mode="after")
    def check_kinds(self) -> "BackendsConfig":
        for kind in ToolKind:
            if getattr(self, kind.value).kind not in (BackendKind.ORACLE, BackendKind.REMOTE):
                raise ValueError(f"tool {kind.value} must be oracle or remote")
        if self.policy.kind not in (BackendKind.SCRIPTED, BackendKind.REMOTE):
            raise ValueError("policy must be scripted or remote")
        for name in ("questioner", "combiner"):
            if getattr(self, name).kind not in (BackendKind.TEMPLATE, BackendKind.REMOTE):
                raise ValueError(f"{name} must be template or remote")
        return self

    def tool(self, kind: ToolKind) -> BackendSpec:
        return getattr(self, ToolKind(kind).value)


class Config(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    max_chain_len: int = Field(default=DEFAULT_MAX_CHAIN_LEN, ge=2)
    max_steps: int = Field(default=DEFAULT_MAX_STEPS, ge=1)
    alpha: float = Field(default=DEFAULT_ALPHA, gt=0, le=1)
    delta: float = Field(default=DEFAULT_DELTA, gt=0)
    min_confidence: float = Field(default=DEFAULT_MIN_CONFIDENCE, ge=0, le=1)
    per_scene: int = Field(default=5, ge=1)
    max_attempts: int = Field(default=DEFAULT_MAX_ATTEMPTS, ge=1)
    parallelism: int = Field(default=1, ge=1)
    context_passthrough: bool = False
    render_width: int = Field(default=448, gt=0)
    render_height: int = Field(default=448, gt=0)
    backends: BackendsConfig = BackendsConfig()

    def override(self, **flags: Any) -> "Config":
        """Apply flag values; ``None`` means the flag was not given"""
        updates = {k: v for k, v in flags.items() if v is not None}
        if not updates:
            return self
        return _validate({**self.model_dump(mode="json"), **_jsonable(updates)}, "flags")


def _jsonable(values: Mapping[str, Any]) -> Dict[str, Any]:
    return {k: (v.model_dump(mode="json") if isinstance(v, BaseModel) else v) for k, v in values.items()}


def _validate(data: Any, source: str) -> Config:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: config must be a mapping, got {type(data).__name__}")
    try:
        return Config.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"{source}: {e}") from e


def _load_config(config_file: Union[str, Path]) -> Dict[str, Any]:
    """Load a raw mapping from a YAML or JSON file"""
    path = Path(config_file)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            if path.suffix in (".yaml", ".yml"):
                return yaml.safe_load(f)
            if path.suffix == ".json":
                return json.load(f)
    except (yaml.YAMLError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: {e}") from e
    raise ConfigError("Config file must be YAML or JSON")


def default_config_path() -> Optional[str]:
    load_dotenv()
    return os.getenv(CONFIG_ENV_VAR) or None


def load_config(path: Optional[Union[str, Path]] = None, **flags: Any) -> Config:
    """
    Resolve the effective configuration.

    Args:
        path: Config file; falls back to ``$REASONFORGE_CONFIG``
        **flags: Command-line overrides, ``None`` for flags not given

    Raises:
        ConfigError: unreadable file, unknown keys or out-of-range values
    """
    if path is None:
        path = default_config_path()
    if path is None:
        config = Config()
    else:
        config = _validate(_load_config(path), str(path))
        logger.info(f"Loaded config from {path}")
    return config.override(**flags)


def template_path() -> Path:
    return Path(__file__).parent / "templates" / "reasonforge.yaml"


def write_template(output_file: Union[str, Path] = "reasonforge.yaml", format: str = "yaml") -> Path:
    """Write a config template with every default spelled out"""
    output = Path(output_file)
    if format.lower() == "yaml":
        output.write_text(template_path().read_text(encoding="utf-8"), encoding="utf-8")
    elif format.lower() == "json":
        output.write_text(json.dumps(Config().model_dump(mode="json"), indent=2) + "\n", encoding="utf-8")
    else:
        raise ConfigError("Format must be 'yaml' or 'json'")
    return output
