"""Exception hierarchy with machine-parseable categories.

The ``category`` attribute is surfaced verbatim by the CLI (stderr prefix)
and the HTTP service (error payload), so tools can branch on it without
parsing prose.
"""

from __future__ import annotations


class CtxAsrError(Exception):
    """Base class for all package errors."""

    category = "internal"
    http_status = 500


class InvalidInputError(CtxAsrError):
    """Bad data handed to an operation (shape mismatch, empty waveform, OOV token...)."""

    category = "invalid-input"
    http_status = 400


class InvalidConfigError(CtxAsrError):
    """Configuration that fails validation before any work is done."""

    category = "invalid-config"
    http_status = 422


class MissingPrerequisiteError(CtxAsrError):
    """A pipeline step was invoked before the artifacts it depends on exist."""

    category = "missing-prerequisite"
    http_status = 409

    def __init__(self, message: str, *, upstream_command: str | None = None) -> None:
        if upstream_command:
            message = f"{message} (run `{upstream_command}` first)"
        super().__init__(message)
        self.upstream_command = upstream_command


class TrainingDivergedError(CtxAsrError):
    """Loss became non-finite; the run is aborted rather than silently continued."""

    category = "training-diverged"
    http_status = 500


class LlmClientError(CtxAsrError):
    """The external text-LLM endpoint failed after exhausting retries."""

    category = "llm-client"
    http_status = 502


class CheckpointError(CtxAsrError):
    """A checkpoint file is unreadable, tampered, or inconsistent with its config."""

    category = "checkpoint"
    http_status = 400
