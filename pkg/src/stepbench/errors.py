"""Error types shared across the harness.

Every failure carries a machine-readable ``code`` so callers (and the runner's
skip/fail bookkeeping) can branch without parsing messages.
"""
from __future__ import annotations


class StepError(Exception):
    """Base error. ``code`` is a stable upper-case identifier."""

    def __init__(self, code: str, message: str = "", **details):
        self.code = code
        self.details = details
        super().__init__(f"{code}: {message}" if message else code)


class ParseError(StepError):
    def __init__(self, line: int, reason: str):
        self.line = line
        self.reason = reason
        super().__init__("PARSE_ERROR", f"line {line}: {reason}", line=line, reason=reason)


class ConfigError(StepError):
    def __init__(self, path: str, reason: str, line: int | None = None):
        self.path = path
        self.reason = reason
        self.line = line
        where = path if line is None else f"{path} (line {line})"
        super().__init__("CONFIG_ERROR", f"{where}: {reason}", path=path, line=line)


class PluginError(StepError):
    """PROTOCOL_ERROR, TIMEOUT or CRASH raised by a plugin session."""

    def __init__(self, code: str, message: str = "", stderr: str = ""):
        self.stderr = stderr
        super().__init__(code, message + (f"\n--- plugin stderr ---\n{stderr}" if stderr else ""))
