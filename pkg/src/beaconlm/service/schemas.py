"""Request and response bodies for the HTTP surface."""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PolicySpec(StrictModel):
    """How to pick the condensing ratio when chunks seal.

    adaptive resolves the ratio from a threshold table on total context
    length; it is only valid where that length is known up front, so
    sessions refuse it.
    """

    mode: Literal["constant", "random", "adaptive", "budget"] = "constant"
    ratio: int | None = Field(default=None, ge=1)
    seed: int = 0
    budget: int = Field(default=0, ge=0)
    table: list[tuple[int, int]] | None = None


class CompressRequest(StrictModel):
    checkpoint: str
    text: str | None = None
    tokens: list[int] | None = None
    policy: PolicySpec = PolicySpec()
    finalize: bool = True
    layout: Literal["interleaved", "trailing"] = "interleaved"
    snapshot_out: str | None = None


class CompressResponse(StrictModel):
    n: int
    chunks: int
    entries: int
    pending_tokens: int
    reduction: float | None
    ratios: list[int]
    config_hash: str
    snapshot: str | None


class GenerateRequest(StrictModel):
    checkpoint: str
    snapshot: str | None = None
    context_text: str | None = None
    context_tokens: list[int] | None = None
    prompt_text: str | None = None
    prompt_tokens: list[int] | None = None
    max_new: int = Field(default=32, ge=1)
    sampling: Literal["greedy", "temperature"] = "greedy"
    temperature: float = Field(default=1.0, gt=0.0)
    seed: int = 0
    stop_token: int | None = None
    policy: PolicySpec = PolicySpec()


class GenerateResponse(StrictModel):
    tokens: list[int]
    text: str


class SessionCreateRequest(StrictModel):
    checkpoint: str
    policy: PolicySpec = PolicySpec()


class SessionCreateResponse(StrictModel):
    session_id: str
    config_hash: str


class AppendRequest(StrictModel):
    text: str | None = None
    tokens: list[int] | None = None


class SessionGenerateRequest(StrictModel):
    prompt_text: str | None = None
    prompt_tokens: list[int] | None = None
    max_new: int = Field(default=32, ge=1)
    sampling: Literal["greedy", "temperature"] = "greedy"
    temperature: float = Field(default=1.0, gt=0.0)
    seed: int = 0
    stop_token: int | None = None


class SessionGenerateResponse(StrictModel):
    tokens: list[int]
    text: str
    stats: dict


class SnapshotRequest(StrictModel):
    path: str


class FlopsRequest(StrictModel):
    """Cost-model query: a preset or explicit architecture numbers."""

    preset: Literal["desk", "llama2-7b"] | None = None
    num_layers: int | None = Field(default=None, ge=1)
    hidden_size: int | None = Field(default=None, ge=1)
    query_heads: int | None = Field(default=None, ge=1)
    kv_heads: int | None = Field(default=None, ge=1)
    head_dim: int | None = Field(default=None, ge=1)
    intermediate_size: int | None = Field(default=None, ge=1)
    vocab_size: int | None = Field(default=None, ge=1)
    chunk_size: int | None = Field(default=None, ge=1)
    softmax_linear: bool = False
    lengths: list[int] | None = None
    ratios: list[int] | None = None
    csv_out: str | None = None


class FlopsResponse(StrictModel):
    rows: list[dict]
    csv_out: str | None
