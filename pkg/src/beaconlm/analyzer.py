"""Analytical cost model: attention/MLP FLOPs and KV cache occupancy.

Everything is exact integer arithmetic on Python ints, so counts for very
long contexts cannot overflow. Formulas count multiply-accumulates as 2
FLOPs. The softmax term is kept in its documented quadratic form
h_q * (s + s_pst)^2 by default; softmax_linear=True switches to the
row-count form h_q * s * (s + s_pst).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

from .errors import ConfigError
from .model import DEFAULT_RATIO_SET

__all__ = [
    "FlopsSpec",
    "LLAMA2_7B",
    "DESK",
    "f_att",
    "f_oth",
    "flops_full",
    "flops_beacon",
    "kv_cache_entries",
    "CacheEntries",
    "emit_curve",
    "write_curve_csv",
]


@dataclass(frozen=True)
class FlopsSpec:
    """Architecture plus the evaluation point (s fresh rows, s_pst cached)."""

    num_layers: int
    hidden_size: int
    query_heads: int
    kv_heads: int
    head_dim: int
    intermediate_size: int
    vocab_size: int
    chunk_size: int
    ratio: int = 8
    s: int = 0
    s_pst: int = 0
    softmax_linear: bool = False

    def at(self, s: int, s_pst: int) -> "FlopsSpec":
        return replace(self, s=s, s_pst=s_pst)


LLAMA2_7B = FlopsSpec(
    num_layers=32,
    hidden_size=4096,
    query_heads=32,
    kv_heads=32,
    head_dim=128,
    intermediate_size=11008,
    vocab_size=32000,
    chunk_size=1024,
)

DESK = FlopsSpec(
    num_layers=4,
    hidden_size=128,
    query_heads=4,
    kv_heads=2,
    head_dim=32,
    intermediate_size=512,
    vocab_size=256,
    chunk_size=64,
)


def f_att(spec: FlopsSpec) -> int:
    """One layer of attention at (s, s_pst) cached keys. Per layer."""
    s, p = int(spec.s), int(spec.s_pst)
    hq, hk, D, d = spec.query_heads, spec.kv_heads, spec.hidden_size, spec.head_dim
    qkv = 2 * s * D * d * hq + 4 * s * D * d * hk  # q plus k and v projections
    qk = 2 * hq * s * (s + p) * d
    if spec.softmax_linear:
        softmax = hq * s * (s + p)
    else:
        softmax = hq * (s + p) ** 2
    av = 2 * hq * s * (s + p) * d
    out = 2 * s * d * hq * D
    return qkv + qk + softmax + av + out


def _f_mlp(spec: FlopsSpec) -> int:
    """Gated MLP for s rows. Per layer."""
    s, D, I = int(spec.s), spec.hidden_size, spec.intermediate_size
    up = 4 * s * D * I  # up and gate projections together
    gate = s * I  # elementwise gating
    down = 2 * s * D * I
    return up + gate + down


def _f_lm(spec: FlopsSpec) -> int:
    """Output head for s rows. Counted once, not per layer."""
    return 2 * int(spec.s) * spec.hidden_size * spec.vocab_size


def f_oth(spec: FlopsSpec) -> int:
    """Everything outside attention for s rows: one MLP layer plus the head."""
    return _f_mlp(spec) + _f_lm(spec)


def flops_full(n: int, spec: FlopsSpec) -> int:
    """Plain full-attention forward over n tokens, no cache."""
    if n < 0:
        raise ConfigError("n must be >= 0")
    L = spec.num_layers
    at = spec.at(n, 0)
    return L * f_att(at) + L * _f_mlp(at) + _f_lm(at)


def _chunks(n: int, w: int) -> list[int]:
    return [min(w, n - s) for s in range(0, n, w)]


def flops_beacon(n: int, spec: FlopsSpec) -> int:
    """Chunked forward with condensing: chunk i encodes its raw tokens plus
    ceil(len/ratio) beacons against the entries accumulated so far."""
    if n < 0:
        raise ConfigError("n must be >= 0")
    if spec.chunk_size < 1 or spec.ratio < 1:
        raise ConfigError("chunk_size and ratio must be >= 1")
    L = spec.num_layers
    att = 0
    cached = 0
    total_rows = 0
    for length in _chunks(n, spec.chunk_size):
        k = -(-length // spec.ratio)  # ceil
        rows = length + k
        att += f_att(spec.at(rows, cached))
        cached += k
        total_rows += rows
    at_all = spec.at(total_rows, 0)
    return L * att + L * _f_mlp(at_all) + _f_lm(at_all)


@dataclass(frozen=True)
class CacheEntries:
    """KV cache occupancy per layer for an n-token context.

    full: entries without condensing (one per token). compressed: entries
    with every chunk sealed, sum of ceil(len/ratio). tail_raw: rows of the
    final partial chunk; while decoding mid-chunk those rows sit in the
    cache uncompressed and the sealed count excludes that chunk.
    """

    full: int
    compressed: int
    tail_raw: int


def kv_cache_entries(
    n: int, w: int, ratio: int, ratio_set: tuple[int, ...] = DEFAULT_RATIO_SET
) -> CacheEntries:
    if n < 0 or w < 1:
        raise ConfigError("need n >= 0 and chunk width >= 1")
    if ratio not in ratio_set:
        raise ConfigError(f"ratio {ratio} not in ratio_set {tuple(ratio_set)}")
    compressed = sum(-(-length // ratio) for length in _chunks(n, w))
    return CacheEntries(full=n, compressed=compressed, tail_raw=n % w)


def emit_curve(
    spec: FlopsSpec, lengths: list[int], ratios: list[int]
) -> list[dict]:
    """Rows of {n, flops_full, flops_x{r}, ratio_x{r}...} for each length."""
    if not lengths or not ratios:
        raise ConfigError("need at least one length and one ratio")
    if list(lengths) != sorted(lengths):
        raise ConfigError("lengths must be sorted ascending")
    rows = []
    for n in lengths:
        row: dict = {"n": int(n), "flops_full": flops_full(int(n), spec)}
        for r in ratios:
            fb = flops_beacon(int(n), replace(spec, ratio=int(r)))
            row[f"flops_x{r}"] = fb
            row[f"ratio_x{r}"] = row["flops_full"] / fb
        rows.append(row)
    return rows


def write_curve_csv(rows: list[dict], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
