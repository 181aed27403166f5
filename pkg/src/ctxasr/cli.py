"""Command-line client for the pipeline service.

Every subcommand issues an HTTP request: against ``--server`` (or
``CTXASR_SERVER``) when given, otherwise against an in-process instance of
the service, so the CLI works standalone without running a daemon. Exit code
0 on success; failures print ``error[<category>]: message`` and exit 1.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import httpx

from .config import RunConfig, load_run_config
from .errors import CtxAsrError


def _client(server: str | None) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=None)
    import warnings

    with warnings.catch_warnings():
        # starlette warns about its httpx-based test transport; local mode is
        # exactly that transport, used deliberately.
        warnings.simplefilter("ignore")
        from starlette.testclient import TestClient

    from .service import create_app

    return TestClient(create_app(), raise_server_exceptions=False)


def _load_config(config_path: str | None, seed: int | None) -> RunConfig:
    try:
        cfg = load_run_config(Path(config_path)) if config_path else RunConfig()
    except CtxAsrError as exc:
        click.echo(f"error[{exc.category}]: {exc}", err=True)
        sys.exit(1)
    if seed is not None:
        cfg = cfg.model_copy(update={"seed": seed})
    return cfg


def _post(server: str | None, path: str, payload: dict) -> dict:
    try:
        with _client(server) as client:
            response = client.post(path, json=payload)
    except httpx.HTTPError as exc:
        click.echo(f"error[connection]: {exc}", err=True)
        sys.exit(1)
    try:
        body = response.json()
    except json.JSONDecodeError:
        body = {}
    if response.status_code >= 400:
        category = body.get("category", "http-error")
        message = body.get("message", response.text)
        click.echo(f"error[{category}]: {message}", err=True)
        sys.exit(1)
    return body


def _echo_command(body: dict, as_json: bool) -> None:
    if as_json:
        click.echo(json.dumps(body, indent=2, sort_keys=True))
        return
    click.echo(f"{body['command']}: {body['status']}")
    for key, value in body.get("outputs", {}).items():
        click.echo(f"  {key}: {value}")
    metrics = body.get("metrics", {})
    if "records" in metrics:
        for record in metrics["records"]:
            if record.get("kind") == "set":
                click.echo(f"  [{record['condition']}] {record['set']}: "
                           f"WER {record['wer_percent']}%  recall {record['recall_percent']}%")
            elif record.get("kind") == "average":
                click.echo(f"  [{record['condition']}] average: "
                           f"WER {record['wer_percent']}%  recall {record['recall_percent']}%")
            elif record.get("kind") == "delta":
                click.echo(f"  delta: WER reduction {record['wer_reduction_percent']}%  "
                           f"recall gain {record['recall_gain_percent']}%")
    else:
        for key, value in metrics.items():
            click.echo(f"  {key}: {value}")


_shared = [
    click.option("--workspace", "-w", required=True, help="Run workspace directory."),
    click.option("--config", "config_path", default=None,
                 help="JSON run config; defaults apply when omitted."),
    click.option("--seed", type=int, default=None, help="Override the config seed."),
    click.option("--force", is_flag=True, help="Re-run even if up-to-date outputs exist."),
    click.option("--json", "as_json", is_flag=True, help="Print the raw response."),
]


def shared_options(fn):
    for option in reversed(_shared):
        fn = option(fn)
    return fn


@click.group()
@click.option("--server", envvar="CTXASR_SERVER", default=None,
              help="Base URL of a running service; in-process when omitted.")
@click.pass_context
def main(ctx: click.Context, server: str | None) -> None:
    """Toy contextual ASR pipeline: data prep, staged training, evaluation."""
    ctx.obj = server


def _pipeline_command(ctx, path, workspace, config_path, seed, force, as_json, extra=None):
    cfg = _load_config(config_path, seed)
    payload = {"workspace": workspace, "config": cfg.model_dump(mode="json"), "force": force}
    payload.update(extra or {})
    _echo_command(_post(ctx.obj, path, payload), as_json)


@main.command("prepare-data")
@shared_options
@click.pass_context
def prepare_data(ctx, workspace, config_path, seed, force, as_json):
    """Synthesize the toy corpus manifests (train/dev/test)."""
    _pipeline_command(ctx, "/pipeline/prepare-data", workspace, config_path, seed, force, as_json)


@main.command("train-aed")
@shared_options
@click.pass_context
def train_aed(ctx, workspace, config_path, seed, force, as_json):
    """Pre-train the acoustic encoder inside an encoder-decoder model."""
    _pipeline_command(ctx, "/pipeline/train-aed", workspace, config_path, seed, force, as_json)


@main.command("train-sft")
@click.option("--stage", type=click.Choice(["1", "2"]), required=True)
@shared_options
@click.pass_context
def train_sft(ctx, stage, workspace, config_path, seed, force, as_json):
    """Run supervised fine-tuning stage 1 (adapter) or 2 (full + LoRA)."""
    _pipeline_command(ctx, "/pipeline/train-sft", workspace, config_path, seed, force, as_json,
                      extra={"stage": int(stage)})


@main.command("forge-context")
@shared_options
@click.pass_context
def forge_context(ctx, workspace, config_path, seed, force, as_json):
    """Build hotword/summary context bundles for the train and test splits."""
    _pipeline_command(ctx, "/pipeline/forge-context", workspace, config_path, seed, force, as_json)


@main.command("train-context")
@shared_options
@click.pass_context
def train_context(ctx, workspace, config_path, seed, force, as_json):
    """Contextual fine-tuning on forged bundles mixed with plain data."""
    _pipeline_command(ctx, "/pipeline/train-context", workspace, config_path, seed, force, as_json)


@main.command("transcribe")
@click.option("--workspace", "-w", required=True)
@click.option("--config", "config_path", default=None)
@click.option("--utterance-id", default=None, help="Utterance id from a prepared split.")
@click.option("--split", default="test", show_default=True)
@click.option("--features", "features_path", default=None,
              help="Path to a .npy feature matrix instead of a manifest entry.")
@click.option("--hotwords", default=None, help="Comma-separated hotword list.")
@click.option("--summary", default=None, help="Context summary text.")
@click.option("--model", "model_stage", default=None,
              type=click.Choice(["sft1", "sft2", "context"]))
@click.option("--json", "as_json", is_flag=True)
@click.pass_context
def transcribe(ctx, workspace, config_path, utterance_id, split, features_path,
               hotwords, summary, model_stage, as_json):
    """Transcribe one utterance, optionally under a context prompt."""
    cfg = _load_config(config_path, None)
    payload = {
        "workspace": workspace,
        "config": cfg.model_dump(mode="json"),
        "utterance_id": utterance_id,
        "manifest_split": split,
        "features_path": features_path,
        "hotwords": [h.strip() for h in hotwords.split(",") if h.strip()] if hotwords else [],
        "summary": summary,
        "model_stage": model_stage,
    }
    body = _post(ctx.obj, "/transcribe", payload)
    if as_json:
        click.echo(json.dumps(body, indent=2, sort_keys=True))
    else:
        click.echo(body["transcript"])
        click.echo(f"  model: {body['model_stage']}  termination: {body['termination']}")


@main.command("evaluate")
@click.option("--context", "context_mode", type=click.Choice(["on", "off", "both"]),
              default="both", show_default=True)
@click.option("--model", "model_stage", default=None,
              type=click.Choice(["sft1", "sft2", "context"]))
@shared_options
@click.pass_context
def evaluate(ctx, context_mode, model_stage, workspace, config_path, seed, force, as_json):
    """Score the test split; --context both emits the comparison table."""
    _pipeline_command(ctx, "/evaluate", workspace, config_path, seed, force, as_json,
                      extra={"context": context_mode, "model_stage": model_stage})


@main.command("serve")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8317, show_default=True)
def serve(host: str, port: int) -> None:
    """Run the HTTP service."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()
