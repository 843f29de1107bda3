"""Decoder-only transformer with a parallel beacon projection path.

The base network is a standard pre-norm decoder: RMSNorm, rotary positions
on interleaved pairs, grouped-query attention, gated SiLU MLP, untied output
head. On top of it sits a second set of Q/K/V projections plus one shared
embedding used only by beacon rows. A chunk arrives as a mix of raw tokens
and beacon tokens (sentinel id == vocab_size); each row is projected by the
weights matching its kind and the results are scattered back into stream
order, so raw rows never touch beacon weights and vice versa.

Attention conditions on previously condensed K/V: cached entries sit at
positions 0..m-1, the chunk occupies m..m+t-1, and causality is decided on
those positions. Cached K is stored before rotation and rotated at its
condensed position whenever it is read.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import numerics as nm
from .errors import ConfigError, DataError, ShapeError, StateError
from .numerics import Tensor

DEFAULT_RATIO_SET = (2, 4, 8, 16, 32)


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    hidden_size: int = 128
    query_heads: int = 4
    kv_heads: int = 2
    head_dim: int = 32
    intermediate_size: int = 512
    vocab_size: int = 256
    chunk_size: int = 64
    ratio_set: tuple[int, ...] = DEFAULT_RATIO_SET
    rope_base: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "ratio_set", tuple(int(a) for a in self.ratio_set))
        ints = (
            self.num_layers,
            self.hidden_size,
            self.query_heads,
            self.kv_heads,
            self.head_dim,
            self.intermediate_size,
            self.vocab_size,
            self.chunk_size,
        )
        if any(int(v) <= 0 for v in ints):
            raise ConfigError("all size fields must be positive")
        if self.hidden_size != self.query_heads * self.head_dim:
            raise ConfigError("hidden_size must equal query_heads * head_dim")
        if self.query_heads % self.kv_heads != 0:
            raise ConfigError("query_heads must be a multiple of kv_heads")
        if self.head_dim % 2 != 0:
            raise ConfigError("head_dim must be even for rotary pairs")
        if not self.ratio_set:
            raise ConfigError("ratio_set must not be empty")
        if len(set(self.ratio_set)) != len(self.ratio_set):
            raise ConfigError("ratio_set entries must be distinct")
        for a in self.ratio_set:
            if a < 1:
                raise ConfigError("compression ratios must be >= 1")
            if self.chunk_size % a != 0:
                raise ConfigError(
                    f"chunk_size {self.chunk_size} not divisible by ratio {a}"
                )

    @property
    def beacon_token_id(self) -> int:
        return self.vocab_size

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["ratio_set"] = list(self.ratio_set)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


# ---------------------------------------------------------------------------
# parameters


@dataclass
class LayerBase:
    attn_norm: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    mlp_norm: Tensor
    up: Tensor
    gate: Tensor
    down: Tensor


@dataclass
class BaseParams:
    embed: Tensor
    layers: list[LayerBase]
    final_norm: Tensor
    lm_head: Tensor

    def named(self) -> dict[str, Tensor]:
        out = {"embed": self.embed}
        for i, l in enumerate(self.layers):
            p = f"layers.{i}"
            out[f"{p}.attn_norm"] = l.attn_norm
            out[f"{p}.attn.wq"] = l.wq
            out[f"{p}.attn.wk"] = l.wk
            out[f"{p}.attn.wv"] = l.wv
            out[f"{p}.attn.wo"] = l.wo
            out[f"{p}.mlp_norm"] = l.mlp_norm
            out[f"{p}.mlp.up"] = l.up
            out[f"{p}.mlp.gate"] = l.gate
            out[f"{p}.mlp.down"] = l.down
        out["final_norm"] = self.final_norm
        out["lm_head"] = self.lm_head
        return out


@dataclass
class LayerBeacon:
    wq: Tensor
    wk: Tensor
    wv: Tensor


@dataclass
class BeaconParams:
    embed: Tensor
    layers: list[LayerBeacon]

    def named(self) -> dict[str, Tensor]:
        out = {"embed": self.embed}
        for i, l in enumerate(self.layers):
            p = f"layers.{i}.attn"
            out[f"{p}.wq"] = l.wq
            out[f"{p}.wk"] = l.wk
            out[f"{p}.wv"] = l.wv
        return out


def init_base_params(
    cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32
) -> BaseParams:
    """Gaussian init, std 0.02; norm weights start at one."""
    std = 0.02

    def w(*shape):
        return Tensor(rng.normal(0.0, std, size=shape).astype(dtype))

    def ones(n):
        return Tensor(np.ones(n, dtype=dtype))

    D, I, V = cfg.hidden_size, cfg.intermediate_size, cfg.vocab_size
    dq = cfg.query_heads * cfg.head_dim
    dk = cfg.kv_heads * cfg.head_dim
    layers = [
        LayerBase(
            attn_norm=ones(D),
            wq=w(D, dq),
            wk=w(D, dk),
            wv=w(D, dk),
            wo=w(dq, D),
            mlp_norm=ones(D),
            up=w(D, I),
            gate=w(D, I),
            down=w(I, D),
        )
        for _ in range(cfg.num_layers)
    ]
    return BaseParams(
        embed=w(V, D), layers=layers, final_norm=ones(D), lm_head=w(D, V)
    )


def init_beacon_params(cfg: ModelConfig, base: BaseParams) -> BeaconParams:
    """Beacon projections start as copies of the raw ones; the shared beacon
    embedding starts at the mean of the base embedding table."""
    layers = [
        LayerBeacon(
            wq=Tensor(l.wq.data.copy()),
            wk=Tensor(l.wk.data.copy()),
            wv=Tensor(l.wv.data.copy()),
        )
        for l in base.layers
    ]
    embed = Tensor(base.embed.data.mean(axis=0))
    return BeaconParams(embed=embed, layers=layers)


# ---------------------------------------------------------------------------
# model


@dataclass
class AttnTraceEntry:
    layer: int
    cache_rows: int
    chunk_rows: int
    cache_k: np.ndarray | None


class BeaconModel:
    """Parameters plus the chunk-level forward machinery."""

    def __init__(self, config: ModelConfig, base: BaseParams, beacon: BeaconParams):
        self.config = config
        self.base = base
        self.beacon = beacon
        self.encode_count = 0  # chunk forwards since last reset
        self.attn_trace: list[AttnTraceEntry] | None = None
        self.trace_cache_values = False

    @classmethod
    def new(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "BeaconModel":
        rng = np.random.default_rng(seed)
        base = init_base_params(config, rng, dtype)
        beacon = init_beacon_params(config, base)
        return cls(config, base, beacon)

    # -- parameter plumbing

    def set_trainable(self, which: str) -> list[tuple[str, Tensor]]:
        """Mark one parameter family trainable, the other frozen."""
        if which not in ("base", "beacon"):
            raise ConfigError("trainable family must be 'base' or 'beacon'")
        for t in self.base.named().values():
            t.requires_grad = which == "base"
        for t in self.beacon.named().values():
            t.requires_grad = which == "beacon"
        fam = self.base if which == "base" else self.beacon
        return list(fam.named().items())

    # -- forward pieces

    def embed(self, tokens) -> Tensor:
        """Token ids (sentinel == vocab_size allowed) -> [t, D].

        Raw rows read the base table; beacon rows all read the one shared
        beacon embedding.
        """
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise DataError("embed expects a non-empty 1-d id array")
        V = self.config.vocab_size
        if ids.min() < 0 or ids.max() > V:
            raise DataError("token id outside vocabulary (sentinel included)")
        beacon_rows = ids == self.config.beacon_token_id
        t = ids.size
        if not beacon_rows.any():
            return nm.gather_rows(self.base.embed, ids)
        ib = np.flatnonzero(beacon_rows)
        ir = np.flatnonzero(~beacon_rows)
        b2 = nm.reshape(self.beacon.embed, (1, self.config.hidden_size))
        b_rows = nm.gather_rows(b2, np.zeros(ib.size, dtype=np.int64))
        if ir.size == 0:
            return b_rows if ib.size == t else nm.scatter_rows(b_rows, ib, t)
        r_rows = nm.gather_rows(self.base.embed, ids[ir])
        return nm.add(
            nm.scatter_rows(r_rows, ir, t), nm.scatter_rows(b_rows, ib, t)
        )

    def project_qkv_dual(
        self, h: Tensor, kinds: np.ndarray, layer: int
    ) -> tuple[Tensor, Tensor, Tensor]:
        """Rows project through the weight set matching their kind.

        h: [t, D]; kinds: bool, True marks a beacon row. Returns q [t,hq,d],
        k and v [t,hk,d], all pre-rotation.
        """
        cfg = self.config
        t = h.data.shape[0]
        kinds = np.asarray(kinds, dtype=bool)
        if kinds.shape != (t,):
            raise ShapeError("kinds mask must have one entry per row")
        lb = self.base.layers[layer]
        lc = self.beacon.layers[layer]
        ib = np.flatnonzero(kinds)
        ir = np.flatnonzero(~kinds)

        def dual(wr: Tensor, wb: Tensor) -> Tensor:
            if ib.size == 0:
                return nm.matmul(h, wr)
            if ir.size == 0:
                return nm.matmul(h, wb)
            pr = nm.matmul(nm.gather_rows(h, ir), wr)
            pb = nm.matmul(nm.gather_rows(h, ib), wb)
            return nm.add(
                nm.scatter_rows(pr, ir, t), nm.scatter_rows(pb, ib, t)
            )

        q = nm.reshape(dual(lb.wq, lc.wq), (t, cfg.query_heads, cfg.head_dim))
        k = nm.reshape(dual(lb.wk, lc.wk), (t, cfg.kv_heads, cfg.head_dim))
        v = nm.reshape(dual(lb.wv, lc.wv), (t, cfg.kv_heads, cfg.head_dim))
        return q, k, v

    def attend_with_cache(
        self,
        q: Tensor,
        k: Tensor,
        v: Tensor,
        cache_k: Tensor | None,
        cache_v: Tensor | None,
        query_positions: np.ndarray,
        key_positions: np.ndarray,
    ) -> Tensor:
        """Causal attention over cached plus fresh keys -> [t, hq*d].

        Cached K/V are stored pre-rotation; rotation happens here at
        key_positions, which covers cached rows first, then chunk rows.
        Scores scale by 1/sqrt(head_dim).
        """
        cfg = self.config
        t = q.data.shape[0]
        query_positions = np.asarray(query_positions)
        key_positions = np.asarray(key_positions)
        m = 0 if cache_k is None else cache_k.data.shape[0]
        if query_positions.shape != (t,):
            raise ShapeError("query_positions must match chunk length")
        if key_positions.shape != (m + t,):
            raise StateError(
                f"cache rows ({m}) plus chunk rows ({t}) must match "
                f"key_positions ({key_positions.size})"
            )
        if cache_k is not None:
            if cache_k.data.shape[1:] != (cfg.kv_heads, cfg.head_dim):
                raise ShapeError("cache entries must be [m, kv_heads, head_dim]")
            k_all = nm.concat([cache_k, k], axis=0)
            v_all = nm.concat([cache_v, v], axis=0)
        else:
            k_all, v_all = k, v

        qr = nm.rope_rotate(q, query_positions, cfg.rope_base)
        kr = nm.rope_rotate(k_all, key_positions, cfg.rope_base)

        group = cfg.query_heads // cfg.kv_heads
        rep = np.repeat(np.arange(cfg.kv_heads), group)
        qh = nm.transpose(qr, (1, 0, 2))  # [hq, t, d]
        kh = nm.gather_rows(nm.transpose(kr, (1, 0, 2)), rep)  # [hq, tk, d]
        vh = nm.gather_rows(nm.transpose(v_all, (1, 0, 2)), rep)

        scores = nm.mul(
            nm.matmul(qh, nm.transpose(kh, (0, 2, 1))),
            1.0 / math.sqrt(cfg.head_dim),
        )
        allowed = key_positions[None, :] <= query_positions[:, None]
        mask = np.where(allowed, 0.0, -np.inf)[None, :, :]
        probs = nm.softmax_rows(scores, mask)
        ctx = nm.matmul(probs, vh)  # [hq, t, d]
        return nm.reshape(
            nm.transpose(ctx, (1, 0, 2)), (t, cfg.query_heads * cfg.head_dim)
        )

    def layer_forward(
        self,
        h: Tensor,
        kinds: np.ndarray,
        layer: int,
        cache_kv: tuple[Tensor, Tensor] | None,
        query_positions: np.ndarray,
        key_positions: np.ndarray,
    ) -> tuple[Tensor, Tensor, Tensor]:
        """One pre-norm block. Returns (h, k, v) with k/v pre-rotation."""
        cfg = self.config
        lb = self.base.layers[layer]
        a_in = nm.rms_norm(h, lb.attn_norm, cfg.norm_eps)
        q, k, v = self.project_qkv_dual(a_in, kinds, layer)
        ck, cv = cache_kv if cache_kv is not None else (None, None)
        if self.attn_trace is not None:
            self.attn_trace.append(
                AttnTraceEntry(
                    layer=layer,
                    cache_rows=0 if ck is None else ck.data.shape[0],
                    chunk_rows=h.data.shape[0],
                    cache_k=(
                        ck.data if (self.trace_cache_values and ck is not None) else None
                    ),
                )
            )
        att = self.attend_with_cache(
            q, k, v, ck, cv, query_positions, key_positions
        )
        h = nm.add(h, nm.matmul(att, lb.wo))
        m_in = nm.rms_norm(h, lb.mlp_norm, cfg.norm_eps)
        gated = nm.mul(nm.silu(nm.matmul(m_in, lb.gate)), nm.matmul(m_in, lb.up))
        h = nm.add(h, nm.matmul(gated, lb.down))
        return h, k, v

    def forward_chunk(
        self,
        tokens,
        layer_caches: list[tuple[Tensor, Tensor]] | None,
        cache_rows: int,
    ) -> tuple[Tensor, list[tuple[Tensor, Tensor]]]:
        """Run one interleaved chunk against the accumulated cache.

        tokens: ids with the beacon sentinel where beacons sit. layer_caches:
        per layer (K, V) of shape [cache_rows, hk, d], or None when empty.
        Returns final-norm hidden states [t, D] and per-layer pre-rotation
        (k, v) for the whole chunk.
        """
        cfg = self.config
        ids = np.asarray(tokens, dtype=np.int64)
        t = ids.size
        kinds = ids == cfg.beacon_token_id
        if layer_caches is not None and len(layer_caches) != cfg.num_layers:
            raise StateError("cache must hold one (K, V) pair per layer")
        qpos = np.arange(cache_rows, cache_rows + t)
        kpos = np.arange(0, cache_rows + t)
        h = self.embed(ids)
        out_kv: list[tuple[Tensor, Tensor]] = []
        for i in range(cfg.num_layers):
            cache_kv = None
            if layer_caches is not None:
                cache_kv = layer_caches[i]
                if cache_kv[0].data.shape[0] != cache_rows:
                    raise StateError("per-layer cache rows disagree with cache_rows")
            h, k, v = self.layer_forward(h, kinds, i, cache_kv, qpos, kpos)
            out_kv.append((k, v))
        h = nm.rms_norm(h, self.base.final_norm, cfg.norm_eps)
        self.encode_count += 1
        return h, out_kv

    def lm_logits(self, h: Tensor) -> Tensor:
        """Hidden rows [t, D] -> logits [t, V] over raw tokens only."""
        return nm.matmul(h, self.base.lm_head)
