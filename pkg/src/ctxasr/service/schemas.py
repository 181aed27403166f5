"""Request/response models for the HTTP service."""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, ConfigDict

from ..config import RunConfig


class StrictRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PipelineRequest(StrictRequest):
    workspace: str
    config: RunConfig = RunConfig()
    force: bool = False


class TrainSftRequest(PipelineRequest):
    stage: Literal[1, 2]


class EvaluateRequest(PipelineRequest):
    context: Literal["on", "off", "both"] = "both"
    model_stage: str | None = None


class TranscribeRequest(StrictRequest):
    workspace: str
    config: RunConfig = RunConfig()
    utterance_id: str | None = None
    manifest_split: str = "test"
    features_path: str | None = None
    hotwords: list[str] = []
    summary: str | None = None
    model_stage: str | None = None


class CommandResponse(BaseModel):
    command: str
    status: str
    outputs: dict[str, str]
    metrics: dict


class TranscribeResponse(BaseModel):
    utterance_id: str
    model_stage: str
    prompt: str
    transcript: str
    termination: str


class HealthResponse(BaseModel):
    status: str
    version: str


class ErrorBody(BaseModel):
    category: str
    message: str
