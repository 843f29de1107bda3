"""Progressive context compression into beacon activations.

A long stream is split into chunks of at most chunk_size raw tokens. Each
chunk is interleaved with beacon tokens (one after every `ratio` raw tokens,
so a chunk of length l contributes ceil(l / ratio) beacons), encoded in one
forward conditioned on everything condensed so far, and then only the beacon
rows' per-layer K/V survive. Raw activations are dropped, which is the whole
point: the cache grows by ceil(l / ratio) entries per chunk instead of l.

Because compression never looks at a query, a finished cache can be reused
across turns and shared between sessions. Feeding is split-invariant: tokens
buffer in `pending` until a full chunk is available, so feeding a stream in
any number of pieces seals exactly the same chunks in the same order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import ConfigError, DataError, StateError, UsageError
from .model import BeaconModel, ModelConfig
from .numerics import Tensor

LAYOUTS = ("interleaved", "trailing")


def partition(n: int, w: int) -> list[tuple[int, int]]:
    """[0, n) as [start, end) spans of width w; the last may be short."""
    if w < 1:
        raise ConfigError("chunk width must be >= 1")
    if n < 0:
        raise ConfigError("stream length must be >= 0")
    return [(s, min(s + w, n)) for s in range(0, n, w)]


def interleave(chunk_len: int, ratio: int, layout: str = "interleaved") -> np.ndarray:
    """Kind mask over a chunk's interleaved layout; True marks a beacon.

    interleaved: one beacon after every `ratio` raw tokens, with a closing
    beacon after a short final group. trailing: all beacons at the end
    (ablation layout). Either way a chunk of length l carries
    ceil(l / ratio) beacons.
    """
    if chunk_len < 1:
        raise ConfigError("chunk_len must be >= 1")
    if ratio < 1:
        raise ConfigError("ratio must be >= 1")
    if layout not in LAYOUTS:
        raise ConfigError(f"layout must be one of {LAYOUTS}")
    k = math.ceil(chunk_len / ratio)
    kinds = np.zeros(chunk_len + k, dtype=bool)
    if layout == "trailing":
        kinds[chunk_len:] = True
        return kinds
    out = []
    done = 0
    while done < chunk_len:
        step = min(ratio, chunk_len - done)
        out.extend([False] * step)
        out.append(True)
        done += step
    return np.array(out, dtype=bool)


@dataclass(frozen=True)
class ChunkPlan:
    """How one chunk is laid out before encoding."""

    length: int
    ratio: int
    kinds: np.ndarray
    layout: str = "interleaved"

    @property
    def beacons(self) -> int:
        return int(self.kinds.sum())

    def interleaved_ids(self, tokens: np.ndarray, sentinel: int) -> np.ndarray:
        ids = np.empty(self.kinds.size, dtype=np.int64)
        ids[~self.kinds] = tokens
        ids[self.kinds] = sentinel
        return ids


def plan_chunk(
    cfg: ModelConfig, length: int, ratio: int, layout: str = "interleaved"
) -> ChunkPlan:
    if ratio not in cfg.ratio_set:
        raise ConfigError(f"ratio {ratio} not in ratio_set {cfg.ratio_set}")
    if length < 1 or length > cfg.chunk_size:
        raise ConfigError(f"chunk length {length} outside [1, {cfg.chunk_size}]")
    return ChunkPlan(length, ratio, interleave(length, ratio, layout), layout)


def plans_for_tokens(
    cfg: ModelConfig, n: int, ratios: list[int], layout: str = "interleaved"
) -> list[ChunkPlan]:
    """One plan per chunk of an n-token stream, ratios given per chunk."""
    spans = partition(n, cfg.chunk_size)
    if len(ratios) != len(spans):
        raise ConfigError("need exactly one ratio per chunk")
    return [
        plan_chunk(cfg, e - s, r, layout) for (s, e), r in zip(spans, ratios)
    ]


@dataclass(frozen=True)
class RatioPolicy:
    """Chooses the condensing ratio for each sealed chunk.

    constant: always `ratio`. random: per-chunk draw from the model's
    ratio_set, derived from (seed, chunk_index) so the draw for chunk i does
    not depend on how the stream was split into feeds. adaptive: smallest
    ratio whose projected total entries for the full stream fit `budget`
    (falls back to the largest ratio); the projection uses the stream length
    known when the chunk is sealed.
    """

    mode: str = "constant"
    ratio: int = 8
    seed: int = 0
    budget: int = 0

    def __post_init__(self):
        if self.mode not in ("constant", "random", "adaptive"):
            raise ConfigError("policy mode must be constant, random or adaptive")
        if self.mode == "adaptive" and self.budget < 1:
            raise ConfigError("adaptive policy needs a positive budget")

    def ratio_for(self, cfg: ModelConfig, chunk_index: int, total_len: int) -> int:
        if self.mode == "constant":
            if self.ratio not in cfg.ratio_set:
                raise ConfigError(
                    f"ratio {self.ratio} not in ratio_set {cfg.ratio_set}"
                )
            return self.ratio
        if self.mode == "random":
            rng = np.random.default_rng([self.seed, chunk_index])
            return int(rng.choice(cfg.ratio_set))
        # adaptive
        for r in sorted(cfg.ratio_set):
            if projected_entries(cfg, total_len, r) <= self.budget:
                return r
        return max(cfg.ratio_set)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "ratio": self.ratio,
            "seed": self.seed,
            "budget": self.budget,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RatioPolicy":
        return cls(**d)


def projected_entries(cfg: ModelConfig, n: int, ratio: int) -> int:
    """Cache entries after compressing an n-token stream at one ratio."""
    return sum(math.ceil((e - s) / ratio) for s, e in partition(n, cfg.chunk_size))


# ---------------------------------------------------------------------------
# the cache


@dataclass
class CompressedCache:
    """Per-layer beacon K/V accumulated across sealed chunks.

    layer_parts[i] holds (k, v) pairs of shape [k_j, kv_heads, head_dim],
    one pair per sealed chunk, stored pre-rotation. `pending` holds raw
    token ids not yet sealed into a chunk. Growth is append-only.
    """

    config_hash: str
    num_layers: int
    layer_parts: list[list[tuple[Tensor, Tensor]]]
    entries: int = 0
    consumed: int = 0
    chunk_index: int = 0
    pending: list[int] = field(default_factory=list)
    ratios: list[int] = field(default_factory=list)

    @classmethod
    def empty(cls, model: BeaconModel) -> "CompressedCache":
        return cls(
            config_hash=model.config.config_hash(),
            num_layers=model.config.num_layers,
            layer_parts=[[] for _ in range(model.config.num_layers)],
        )

    def layer_tensors(self) -> list[tuple[Tensor, Tensor]] | None:
        if self.entries == 0:
            return None
        return [
            (
                nm.concat([k for k, _ in parts], axis=0),
                nm.concat([v for _, v in parts], axis=0),
            )
            for parts in self.layer_parts
        ]

    def clone(self) -> "CompressedCache":
        """Shallow copy: tensors shared, bookkeeping lists copied."""
        return CompressedCache(
            config_hash=self.config_hash,
            num_layers=self.num_layers,
            layer_parts=[list(parts) for parts in self.layer_parts],
            entries=self.entries,
            consumed=self.consumed,
            chunk_index=self.chunk_index,
            pending=list(self.pending),
            ratios=list(self.ratios),
        )

    def stats(self) -> dict:
        return {
            "entries": self.entries,
            "consumed_tokens": self.consumed,
            "pending_tokens": len(self.pending),
            "chunks": self.chunk_index,
            "ratios": list(self.ratios),
            "reduction": (self.consumed / self.entries) if self.entries else None,
        }


def _check_cache(model: BeaconModel, cache: CompressedCache) -> None:
    if cache.config_hash != model.config.config_hash():
        raise StateError("cache was built under a different model config")


def _check_tokens(model: BeaconModel, tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1:
        raise DataError("token stream must be one-dimensional")
    if ids.size and (ids.min() < 0 or ids.max() >= model.config.vocab_size):
        raise DataError("raw token id outside vocabulary")
    return ids


def encode_and_accumulate(
    model: BeaconModel,
    tokens_chunk: np.ndarray,
    plan: ChunkPlan,
    cache: CompressedCache,
) -> Tensor:
    """Encode one chunk and keep only its beacon K/V.

    Returns the chunk's final-norm hidden states [len + beacons, D]; the
    caller reads logits off raw rows. The cache gains plan.beacons entries
    per layer and the chunk's raw activations are discarded.
    """
    _check_cache(model, cache)
    tokens_chunk = np.asarray(tokens_chunk, dtype=np.int64)
    if tokens_chunk.size != plan.length:
        raise ConfigError("plan length disagrees with the chunk")
    ids = plan.interleaved_ids(tokens_chunk, model.config.beacon_token_id)
    h, kv = model.forward_chunk(ids, cache.layer_tensors(), cache.entries)
    ib = np.flatnonzero(plan.kinds)
    for layer, (k, v) in enumerate(kv):
        cache.layer_parts[layer].append(
            (nm.gather_rows(k, ib), nm.gather_rows(v, ib))
        )
    cache.entries += plan.beacons
    cache.consumed += plan.length
    cache.chunk_index += 1
    cache.ratios.append(plan.ratio)
    return h


def _feed(
    model: BeaconModel,
    cache: CompressedCache,
    tokens,
    policy: RatioPolicy,
    finalize: bool,
    layout: str = "interleaved",
) -> Tensor | None:
    """Buffer tokens, seal every full chunk, optionally seal the remainder.

    Returns the hidden states of the last sealed chunk, if any sealed.
    """
    ids = _check_tokens(model, tokens)
    buf = cache.pending + list(int(i) for i in ids)
    cache.pending = []
    w = model.config.chunk_size
    total = cache.consumed + len(buf)
    h = None
    pos = 0
    while len(buf) - pos >= w:
        ratio = policy.ratio_for(model.config, cache.chunk_index, total)
        plan = plan_chunk(model.config, w, ratio, layout)
        h = encode_and_accumulate(model, np.array(buf[pos : pos + w]), plan, cache)
        pos += w
    rest = buf[pos:]
    if finalize and rest:
        ratio = policy.ratio_for(model.config, cache.chunk_index, total)
        plan = plan_chunk(model.config, len(rest), ratio, layout)
        h = encode_and_accumulate(model, np.array(rest), plan, cache)
    else:
        cache.pending = rest
    return h


def compress_context(
    model: BeaconModel,
    tokens,
    policy: RatioPolicy,
    finalize: bool = True,
    layout: str = "interleaved",
) -> CompressedCache:
    """One-shot compression of a whole stream into a fresh cache.

    With finalize=False a short tail stays in `pending` so later appends can
    continue mid-stream; with finalize=True the tail is sealed as a short
    chunk.
    """
    cache = CompressedCache.empty(model)
    _feed(model, cache, tokens, policy, finalize, layout)
    return cache


def append_context(
    model: BeaconModel,
    cache: CompressedCache,
    tokens,
    policy: RatioPolicy,
    finalize: bool = False,
    layout: str = "interleaved",
) -> CompressedCache:
    """Extend an existing cache with more raw tokens (mutates and returns it).

    Feeding is split-invariant: any way of slicing a stream across
    compress/append calls seals identical chunks, so the final cache is
    bitwise the same.
    """
    _check_cache(model, cache)
    _feed(model, cache, tokens, policy, finalize, layout)
    return cache


# ---------------------------------------------------------------------------
# generation


def _sample(logits: np.ndarray, sampling: str, temperature: float, rng) -> int:
    if sampling == "greedy":
        return int(np.argmax(logits))
    if sampling == "temperature":
        if temperature <= 0:
            raise ConfigError("temperature must be positive")
        z = logits.astype(np.float64) / temperature
        z -= z.max()
        p = np.exp(z)
        p /= p.sum()
        return int(rng.choice(p.size, p=p))
    raise ConfigError("sampling must be 'greedy' or 'temperature'")


def _generate(
    model: BeaconModel,
    cache: CompressedCache,
    prompt,
    max_new: int,
    policy: RatioPolicy,
    sampling: str = "greedy",
    temperature: float = 1.0,
    seed: int = 0,
    stop_token: int | None = None,
    layout: str = "interleaved",
) -> tuple[list[int], CompressedCache]:
    """Decode continuation tokens; returns (tokens, advanced cache copy).

    The input cache is never mutated. The working copy seals a chunk
    whenever the raw tail (pending + prompt + generated) reaches chunk_size;
    between seals the tail is held as ordinary raw K/V at positions after
    the condensed entries. The advanced copy carries any unsealed tail in
    `pending`.
    """
    if max_new < 1:
        raise UsageError("max_new must be >= 1")
    _check_cache(model, cache)
    prompt = list(int(i) for i in _check_tokens(model, prompt))
    work = cache.clone()
    tail = work.pending + prompt
    work.pending = []
    w = model.config.chunk_size
    rng = np.random.default_rng(seed)

    raw_parts: list[list[tuple[Tensor, Tensor]]] = [
        [] for _ in range(model.config.num_layers)
    ]
    raw_rows = 0

    def combined_cache() -> tuple[list[tuple[Tensor, Tensor]] | None, int]:
        rows = work.entries + raw_rows
        if rows == 0:
            return None, 0
        layers = []
        for i in range(model.config.num_layers):
            parts = list(work.layer_parts[i]) + list(raw_parts[i])
            layers.append(
                (
                    nm.concat([k for k, _ in parts], axis=0),
                    nm.concat([v for _, v in parts], axis=0),
                )
            )
        return layers, rows

    def encode_raw(segment: list[int]) -> Tensor:
        nonlocal raw_rows
        caches, rows = combined_cache()
        h, kv = model.forward_chunk(np.array(segment, dtype=np.int64), caches, rows)
        for i, (k, v) in enumerate(kv):
            raw_parts[i].append((k, v))
        raw_rows += len(segment)
        return h

    # Prefill: seal full chunks, then hold the remainder as raw tail.
    logits_row: np.ndarray | None = None
    while len(tail) >= w:
        for i in range(model.config.num_layers):
            raw_parts[i].clear()
        raw_rows = 0
        total = work.consumed + len(tail)
        ratio = policy.ratio_for(model.config, work.chunk_index, total)
        plan = plan_chunk(model.config, w, ratio, layout)
        h = encode_and_accumulate(model, np.array(tail[:w]), plan, cache=work)
        tail = tail[w:]
        if not tail:
            last_raw = int(np.flatnonzero(~plan.kinds)[-1])
            logits_row = model.lm_logits(
                nm.gather_rows(h, np.array([last_raw]))
            ).data[0]
    if tail:
        h = encode_raw(list(tail))
        logits_row = model.lm_logits(
            nm.gather_rows(h, np.array([h.data.shape[0] - 1]))
        ).data[0]
    if logits_row is None:
        raise UsageError("generation needs at least one conditioning token")

    out: list[int] = []
    for _ in range(max_new):
        tok = _sample(logits_row, sampling, temperature, rng)
        out.append(tok)
        tail.append(tok)
        if stop_token is not None and tok == stop_token:
            break
        if len(tail) == w:
            for i in range(model.config.num_layers):
                raw_parts[i].clear()
            raw_rows = 0
            total = work.consumed + len(tail)
            ratio = policy.ratio_for(model.config, work.chunk_index, total)
            plan = plan_chunk(model.config, w, ratio, layout)
            h = encode_and_accumulate(model, np.array(tail), plan, cache=work)
            tail = []
            last_raw = int(np.flatnonzero(~plan.kinds)[-1])
            logits_row = model.lm_logits(
                nm.gather_rows(h, np.array([last_raw]))
            ).data[0]
        else:
            h = encode_raw([tok])
            logits_row = model.lm_logits(h).data[0]

    work.pending = tail
    return out, work


def generate(
    model: BeaconModel,
    cache: CompressedCache,
    prompt,
    max_new: int,
    policy: RatioPolicy | None = None,
    sampling: str = "greedy",
    temperature: float = 1.0,
    seed: int = 0,
    stop_token: int | None = None,
) -> list[int]:
    """Query-side decoding against a compressed context (cache untouched)."""
    if policy is None:
        policy = RatioPolicy(mode="constant", ratio=model.config.ratio_set[0])
    out, _ = _generate(
        model, cache, prompt, max_new, policy, sampling, temperature, seed, stop_token
    )
    return out


class Session:
    """Owns a growing cache for multi-turn use.

    append() feeds context; generate() decodes and keeps the prompt plus
    the generated tokens as future context. Sealed entries are shared with
    any caches cloned from here, never mutated.
    """

    def __init__(
        self,
        model: BeaconModel,
        policy: RatioPolicy,
        cache: CompressedCache | None = None,
    ):
        self.model = model
        self.policy = policy
        self.cache = cache if cache is not None else CompressedCache.empty(model)
        _check_cache(model, self.cache)

    def append(self, tokens) -> dict:
        append_context(self.model, self.cache, tokens, self.policy)
        return self.cache.stats()

    def generate(
        self,
        prompt,
        max_new: int,
        sampling: str = "greedy",
        temperature: float = 1.0,
        seed: int = 0,
        stop_token: int | None = None,
    ) -> list[int]:
        out, advanced = _generate(
            self.model,
            self.cache,
            prompt,
            max_new,
            self.policy,
            sampling,
            temperature,
            seed,
            stop_token,
        )
        self.cache = advanced
        return out

    def stats(self) -> dict:
        return self.cache.stats()
