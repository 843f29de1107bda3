"""FastAPI application over compression, generation, and the cost model.

Models are loaded once per checkpoint path and shared read-only across
requests; parameters are never mutated here. Each session owns one
growing cache behind its own lock, so concurrent turns on the same
session serialize while distinct sessions proceed in parallel.
"""

from __future__ import annotations

import threading
import uuid
from dataclasses import replace
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__, analyzer, container
from ..compressor import Session, compress_context, generate
from ..errors import (
    BeaconError,
    ConfigError,
    DataError,
    StateError,
    UsageError,
)
from ..model import BeaconModel
from ..tasks import AdaptiveTable, resolve_policy
from ..trainer import ByteTokenizer
from . import schemas as sc

DEFAULT_LENGTHS = [8192, 16384, 32768, 65536, 131072, 262144]
DEFAULT_RATIOS = [2, 4, 8, 16, 32]

_PRESETS = {"desk": analyzer.DESK, "llama2-7b": analyzer.LLAMA2_7B}


class ServiceState:
    def __init__(self):
        self._lock = threading.Lock()
        self._models: dict[str, BeaconModel] = {}
        self.sessions: dict[str, dict] = {}

    def model(self, checkpoint: str) -> BeaconModel:
        key = str(Path(checkpoint).resolve())
        with self._lock:
            if key not in self._models:
                self._models[key] = container.load_model(checkpoint)
            return self._models[key]

    def session(self, sid: str) -> dict:
        with self._lock:
            entry = self.sessions.get(sid)
        if entry is None:
            raise KeyError(sid)
        return entry

    def add_session(self, entry: dict) -> str:
        sid = uuid.uuid4().hex[:12]
        with self._lock:
            self.sessions[sid] = entry
        return sid

    def drop_session(self, sid: str) -> None:
        with self._lock:
            if sid not in self.sessions:
                raise KeyError(sid)
            del self.sessions[sid]


def _token_ids(text: str | None, tokens: list | None, what: str) -> np.ndarray:
    if (text is None) == (tokens is None):
        raise UsageError(f"provide exactly one of {what} text or tokens")
    if text is not None:
        return np.asarray(ByteTokenizer().encode(text), dtype=np.int64)
    return np.asarray(tokens, dtype=np.int64)


def _policy(model: BeaconModel, spec: sc.PolicySpec, context_len: int | None):
    table = AdaptiveTable(tuple(spec.table)) if spec.table is not None else None
    return resolve_policy(
        model.config.ratio_set,
        mode=spec.mode,
        ratio=spec.ratio,
        seed=spec.seed,
        budget=spec.budget,
        table=table,
        context_len=context_len,
    )


def _flops_spec(req: sc.FlopsRequest) -> analyzer.FlopsSpec:
    spec = _PRESETS[req.preset] if req.preset else analyzer.DESK
    overrides = {
        name: getattr(req, name)
        for name in (
            "num_layers",
            "hidden_size",
            "query_heads",
            "kv_heads",
            "head_dim",
            "intermediate_size",
            "vocab_size",
            "chunk_size",
        )
        if getattr(req, name) is not None
    }
    if req.softmax_linear:
        overrides["softmax_linear"] = True
    return replace(spec, **overrides) if overrides else spec


def create_app() -> FastAPI:
    app = FastAPI(title="beaconlm", version=__version__)
    state = ServiceState()
    app.state.service = state

    @app.exception_handler(BeaconError)
    async def _on_beacon_error(request: Request, exc: BeaconError):
        if isinstance(exc, StateError):
            code = 409
        elif isinstance(exc, (DataError, ConfigError, UsageError)):
            code = 400
        else:
            code = 500
        return JSONResponse(
            status_code=code,
            content={"error": type(exc).__name__, "detail": str(exc)},
        )

    @app.exception_handler(KeyError)
    async def _on_missing(request: Request, exc: KeyError):
        return JSONResponse(
            status_code=404,
            content={"error": "NotFound", "detail": f"no such session {exc}"},
        )

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__}

    @app.post("/flops/report", response_model=sc.FlopsResponse)
    def flops_report(req: sc.FlopsRequest):
        spec = _flops_spec(req)
        lengths = req.lengths if req.lengths is not None else list(DEFAULT_LENGTHS)
        ratios = req.ratios if req.ratios is not None else list(DEFAULT_RATIOS)
        rows = analyzer.emit_curve(spec, lengths, ratios)
        if req.csv_out:
            analyzer.write_curve_csv(rows, req.csv_out)
        return sc.FlopsResponse(rows=rows, csv_out=req.csv_out)

    @app.post("/compress", response_model=sc.CompressResponse)
    def compress(req: sc.CompressRequest):
        model = state.model(req.checkpoint)
        ids = _token_ids(req.text, req.tokens, "context")
        policy = _policy(model, req.policy, context_len=int(ids.size))
        cache = compress_context(
            model, ids, policy, finalize=req.finalize, layout=req.layout
        )
        snapshot = None
        if req.snapshot_out:
            container.save_cache(req.snapshot_out, cache)
            snapshot = req.snapshot_out
        stats = cache.stats()
        return sc.CompressResponse(
            n=int(ids.size),
            chunks=stats["chunks"],
            entries=stats["entries"],
            pending_tokens=stats["pending_tokens"],
            reduction=stats["reduction"],
            ratios=stats["ratios"],
            config_hash=model.config.config_hash(),
            snapshot=snapshot,
        )

    @app.post("/generate", response_model=sc.GenerateResponse)
    def generate_once(req: sc.GenerateRequest):
        model = state.model(req.checkpoint)
        sources = sum(
            x is not None
            for x in (req.snapshot, req.context_text, req.context_tokens)
        )
        if sources > 1:
            raise UsageError("give at most one of snapshot, context text, tokens")
        if req.snapshot is not None:
            cache = container.load_cache(req.snapshot, model)
            policy = _policy(model, req.policy, context_len=cache.consumed)
        elif req.context_text is not None or req.context_tokens is not None:
            ids = _token_ids(req.context_text, req.context_tokens, "context")
            policy = _policy(model, req.policy, context_len=int(ids.size))
            cache = compress_context(model, ids, policy, finalize=False)
        else:
            from ..compressor import CompressedCache

            cache = CompressedCache.empty(model)
            policy = _policy(model, req.policy, context_len=0)
        prompt = _token_ids(req.prompt_text, req.prompt_tokens, "prompt")
        out = generate(
            model,
            cache,
            prompt,
            max_new=req.max_new,
            policy=policy,
            sampling=req.sampling,
            temperature=req.temperature,
            seed=req.seed,
            stop_token=req.stop_token,
        )
        return sc.GenerateResponse(tokens=out, text=ByteTokenizer().decode(out))

    @app.post("/sessions", response_model=sc.SessionCreateResponse)
    def create_session(req: sc.SessionCreateRequest):
        model = state.model(req.checkpoint)
        if req.policy.mode == "adaptive":
            raise UsageError(
                "sessions grow over time; adaptive-by-length is one-shot only"
            )
        policy = _policy(model, req.policy, context_len=None)
        session = Session(model, policy)
        sid = state.add_session(
            {
                "session": session,
                "lock": threading.Lock(),
                "checkpoint": req.checkpoint,
            }
        )
        return sc.SessionCreateResponse(
            session_id=sid, config_hash=model.config.config_hash()
        )

    @app.post("/sessions/{sid}/append")
    def session_append(sid: str, req: sc.AppendRequest):
        entry = state.session(sid)
        ids = _token_ids(req.text, req.tokens, "context")
        with entry["lock"]:
            return entry["session"].append(ids)

    @app.post("/sessions/{sid}/generate", response_model=sc.SessionGenerateResponse)
    def session_generate(sid: str, req: sc.SessionGenerateRequest):
        entry = state.session(sid)
        prompt = _token_ids(req.prompt_text, req.prompt_tokens, "prompt")
        with entry["lock"]:
            out = entry["session"].generate(
                prompt,
                max_new=req.max_new,
                sampling=req.sampling,
                temperature=req.temperature,
                seed=req.seed,
                stop_token=req.stop_token,
            )
            stats = entry["session"].stats()
        return sc.SessionGenerateResponse(
            tokens=out, text=ByteTokenizer().decode(out), stats=stats
        )

    @app.get("/sessions/{sid}")
    def session_stats(sid: str):
        entry = state.session(sid)
        with entry["lock"]:
            stats = entry["session"].stats()
        return {"session_id": sid, "checkpoint": entry["checkpoint"], **stats}

    @app.post("/sessions/{sid}/snapshot")
    def session_snapshot(sid: str, req: sc.SnapshotRequest):
        entry = state.session(sid)
        with entry["lock"]:
            container.save_cache(req.path, entry["session"].cache)
            entries = entry["session"].cache.entries
        return {"snapshot": req.path, "entries": entries}

    @app.delete("/sessions/{sid}")
    def session_delete(sid: str):
        state.drop_session(sid)
        return {"deleted": sid}

    return app
