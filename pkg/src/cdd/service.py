"""HTTP service over the run layer; one POST endpoint per subcommand.

Exit codes map onto status codes: 0 -> 200, config error 1 -> 400,
numeric failure 2 -> 422, I/O 3 -> 409.  Responses always carry the full
run result so clients can relay it unchanged.
"""

from __future__ import annotations

from fastapi import FastAPI
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from . import __version__
from .config import ConfigError, apply_overrides, parse_config_text
from .runner import EXIT_CONFIG, RunResult, run

_HTTP_STATUS = {0: 200, 1: 400, 2: 422, 3: 409}


class RunRequest(BaseModel):
    config_text: str = ""
    out_dir: str | None = None
    seed: int | None = None


class RunResponse(BaseModel):
    command: str
    exit_code: int
    message: str
    artifacts: list[str] = []
    payload: dict = {}


app = FastAPI(title="conditional distillation runs", version=__version__)


def _respond(res: RunResult) -> JSONResponse:
    body = RunResponse(
        command=res.command,
        exit_code=res.exit_code,
        message=res.message,
        artifacts=[str(a) for a in res.artifacts],
        payload=_jsonable(res.payload),
    )
    return JSONResponse(status_code=_HTTP_STATUS[res.exit_code], content=body.model_dump())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "item"):  # numpy scalars
        return obj.item()
    return obj


def _execute(command: str, req: RunRequest) -> JSONResponse:
    try:
        cfg = parse_config_text(req.config_text, source="<request>")
    except ConfigError as e:
        return _respond(RunResult(command, EXIT_CONFIG, str(e)))
    cfg = apply_overrides(cfg, out_dir=req.out_dir, seed=req.seed)
    return _respond(run(command, cfg))


@app.get("/health")
def health() -> dict:
    return {"status": "ok", "version": __version__}


@app.post("/pretrain")
def pretrain(req: RunRequest) -> JSONResponse:
    return _execute("pretrain", req)


@app.post("/distill")
def distill(req: RunRequest) -> JSONResponse:
    return _execute("distill", req)


@app.post("/sample")
def sample(req: RunRequest) -> JSONResponse:
    return _execute("sample", req)


@app.post("/eval")
def evaluate(req: RunRequest) -> JSONResponse:
    return _execute("eval", req)


@app.post("/verify")
def verify(req: RunRequest) -> JSONResponse:
    return _execute("verify", req)
