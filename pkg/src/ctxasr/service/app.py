"""FastAPI service wrapping the pipeline commands.

Commands run synchronously inside the request (desk-scale training takes
seconds to minutes); errors surface as JSON bodies carrying the same
machine-parseable category the CLI prints.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from .. import __version__
from ..errors import CtxAsrError
from .. import pipeline
from .schemas import (CommandResponse, EvaluateRequest, HealthResponse, PipelineRequest,
                      TrainSftRequest, TranscribeRequest, TranscribeResponse)


def create_app() -> FastAPI:
    app = FastAPI(title="ctxasr service", version=__version__)

    @app.exception_handler(CtxAsrError)
    async def _domain_error(_: Request, exc: CtxAsrError) -> JSONResponse:
        return JSONResponse(status_code=exc.http_status,
                            content={"category": exc.category, "message": str(exc)})

    @app.exception_handler(RequestValidationError)
    async def _validation_error(_: Request, exc: RequestValidationError) -> JSONResponse:
        return JSONResponse(status_code=422,
                            content={"category": "invalid-config", "message": str(exc)})

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/pipeline/prepare-data", response_model=CommandResponse)
    def prepare_data(req: PipelineRequest) -> CommandResponse:
        result = pipeline.prepare_data(req.workspace, req.config, force=req.force)
        return CommandResponse(**result.to_dict())

    @app.post("/pipeline/train-aed", response_model=CommandResponse)
    def train_aed(req: PipelineRequest) -> CommandResponse:
        result = pipeline.train_aed_command(req.workspace, req.config, force=req.force)
        return CommandResponse(**result.to_dict())

    @app.post("/pipeline/train-sft", response_model=CommandResponse)
    def train_sft(req: TrainSftRequest) -> CommandResponse:
        result = pipeline.train_sft_command(req.workspace, req.config, req.stage,
                                            force=req.force)
        return CommandResponse(**result.to_dict())

    @app.post("/pipeline/forge-context", response_model=CommandResponse)
    def forge_context(req: PipelineRequest) -> CommandResponse:
        result = pipeline.forge_context_command(req.workspace, req.config, force=req.force)
        return CommandResponse(**result.to_dict())

    @app.post("/pipeline/train-context", response_model=CommandResponse)
    def train_context(req: PipelineRequest) -> CommandResponse:
        result = pipeline.train_context_command(req.workspace, req.config, force=req.force)
        return CommandResponse(**result.to_dict())

    @app.post("/transcribe", response_model=TranscribeResponse)
    def transcribe(req: TranscribeRequest) -> TranscribeResponse:
        result = pipeline.transcribe_command(
            req.workspace, req.config,
            utterance_id=req.utterance_id, manifest_split=req.manifest_split,
            features_path=req.features_path, hotwords=req.hotwords,
            summary=req.summary, model_stage=req.model_stage)
        return TranscribeResponse(**result)

    @app.post("/evaluate", response_model=CommandResponse)
    def evaluate(req: EvaluateRequest) -> CommandResponse:
        result = pipeline.evaluate_command(req.workspace, req.config, req.context,
                                           force=req.force, model_stage=req.model_stage)
        return CommandResponse(**result.to_dict())

    return app
