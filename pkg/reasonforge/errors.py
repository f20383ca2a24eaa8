"""
Exception hierarchy for reasonforge.

Engine code never lets these escape past a trace boundary; batch commands
record them in-band and the CLI maps the operator-facing ones to exit codes.
"""

from typing import Iterable, Optional


class ReasonForgeError(Exception):
    """Base exception for reasonforge errors"""
    pass


class DomainError(ReasonForgeError, ValueError):
    """Geometry or canvas precondition violated"""
    pass


class AnnotationParseError(ReasonForgeError):
    """Malformed scene or annotation file"""

    def __init__(self, message: str, record: Optional[str] = None):
        self.record = record
        super().__init__(f"{record}: {message}" if record else message)


class RenderError(ReasonForgeError):
    """Raster export failed"""
    pass


class ExecutionError(ReasonForgeError):
    """A tool backend failed to produce a valid output"""

    def __init__(self, message: str, kind: Optional[str] = None, endpoint: Optional[str] = None):
        self.kind = kind
        self.endpoint = endpoint
        prefix = kind or "tool"
        if endpoint:
            prefix = f"{prefix}@{endpoint}"
        super().__init__(f"{prefix}: {message}")
        self.reason = message


class PolicyError(ReasonForgeError):
    """The policy failed or proposed a malformed step"""
    pass


class SynthesisError(ReasonForgeError):
    """A chain could not be turned into a reasoning path"""
    pass


class EmissionError(ReasonForgeError):
    """Replaying a path for record emission failed"""

    def __init__(self, message: str, step: int):
        self.step = step
        super().__init__(f"step {step}: {message}")


class ConfigError(ReasonForgeError):
    """Invalid configuration file or flag combination"""
    pass


class IdMismatchError(ReasonForgeError):
    """Trace and gold corpora do not cover the same path ids"""

    def __init__(self, missing_gold: Iterable[str], missing_traces: Iterable[str]):
        self.missing_gold = sorted(missing_gold)
        self.missing_traces = sorted(missing_traces)
        parts = []
        if self.missing_gold:
            parts.append(f"traces without gold: {', '.join(self.missing_gold)}")
        if self.missing_traces:
            parts.append(f"gold without traces: {', '.join(self.missing_traces)}")
        super().__init__("; ".join(parts) or "id mismatch")
