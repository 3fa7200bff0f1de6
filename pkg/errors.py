"""Exception hierarchy shared by every module."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple


class MinicraftError(Exception):
    """Base class for all errors raised by this project."""


class ConfigError(MinicraftError):
    """Bad configuration: unknown task or biome, invalid run config, budget too small."""


class ContractViolation(MinicraftError):
    """A caller broke a documented precondition."""


@dataclass(frozen=True)
class Diagnostic:
    code: str
    line: int
    col: int
    message: str
    expected: Tuple[str, ...] = field(default_factory=tuple)

    def render(self) -> str:
        return f"ERR {self.code} {self.line}:{self.col} {self.message}"

    def to_dict(self) -> dict:
        return {
            "code": self.code,
            "line": self.line,
            "col": self.col,
            "message": self.message,
            "expected": list(self.expected),
        }


class ScriptError(MinicraftError):
    """Action-script lexing, parsing or checking failed."""

    def __init__(self, diagnostic: Diagnostic):
        super().__init__(diagnostic.render())
        self.diagnostic = diagnostic


class MacroError(MinicraftError):
    """A macro cannot be compiled or injected."""


class RolloutError(MinicraftError):
    """The environment faulted while collecting a rollout."""


class BackendError(MinicraftError):
    """A chat backend could not produce a completion."""


class AgentResponseError(MinicraftError):
    """An agent reply kept violating its response schema after all retries."""


class PlannerError(MinicraftError):
    """The task planner could not order the subtasks."""


class RunInterrupted(MinicraftError):
    """The two-loop run stopped early and left a checkpoint behind."""

    def __init__(self, message: str, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
