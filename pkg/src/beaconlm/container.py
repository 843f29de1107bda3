"""Binary container for checkpoints and cache snapshots.

One file layout serves both artifact kinds:

    bytes 0..3    magic ``b"BLM1"``
    bytes 4..11   header length, uint64 little-endian
    header        canonical JSON (sorted keys, no whitespace)
    payload       raw little-endian tensor bytes, tensors in sorted-name
                  order, offsets recorded in the header index

The header carries ``kind`` ("checkpoint" or "cache"), a ``meta`` object,
a ``version`` int, and a ``tensors`` index mapping each name to dtype,
shape, offset and byte count. Offsets are relative to the start of the
payload section. Because the header is canonical JSON and tensors are
laid out in sorted order, identical inputs produce identical file bytes.

Checkpoints store model weights under the disjoint prefixes ``base.`` and
``beacon.``; the freeze invariant of compression training is checkable by
hashing the base prefix alone (see base_params_hash). Cache snapshots
store one concatenated K and V tensor per layer plus bookkeeping needed
to resume feeding exactly where the producer stopped.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError, StateError
from .model import (
    BaseParams,
    BeaconModel,
    BeaconParams,
    LayerBase,
    LayerBeacon,
    ModelConfig,
)
from .compressor import CompressedCache
from .numerics import Tensor

MAGIC = b"BLM1"
FORMAT_VERSION = 1

_ALLOWED_DTYPES = ("<f4", "<f8")


# ---------------------------------------------------------------------------
# raw read/write


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _little_endian(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def write_container(path, kind: str, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write one artifact. Tensor dict values are plain numpy arrays."""
    index: dict[str, dict] = {}
    offset = 0
    blobs: list[bytes] = []
    for name in sorted(tensors):
        arr = _little_endian(tensors[name])
        dt = arr.dtype.str
        if dt not in _ALLOWED_DTYPES:
            raise DataError(f"tensor {name!r} has unsupported dtype {dt}")
        raw = arr.tobytes()
        index[name] = {
            "dtype": dt,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        blobs.append(raw)
        offset += len(raw)
    header = _canonical_json(
        {"kind": kind, "version": FORMAT_VERSION, "meta": meta, "tensors": index}
    )
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def read_container(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    """Read an artifact back as (kind, meta, {name: array})."""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read container: {e}") from e
    if len(data) < 12 or data[:4] != MAGIC:
        raise DataError("not a container file (bad magic)")
    (hlen,) = struct.unpack("<Q", data[4:12])
    if 12 + hlen > len(data):
        raise DataError("truncated container header")
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"corrupt container header: {e}") from e
    for key in ("kind", "version", "meta", "tensors"):
        if key not in header:
            raise DataError(f"container header missing {key!r}")
    if header["version"] != FORMAT_VERSION:
        raise DataError(f"unsupported container version {header['version']!r}")
    payload = data[12 + hlen :]
    tensors: dict[str, np.ndarray] = {}
    for name, ent in header["tensors"].items():
        dt, shape = ent["dtype"], tuple(ent["shape"])
        off, nb = ent["offset"], ent["nbytes"]
        if dt not in _ALLOWED_DTYPES:
            raise DataError(f"tensor {name!r} has unsupported dtype {dt}")
        if off < 0 or off + nb > len(payload):
            raise DataError(f"tensor {name!r} lies outside the payload")
        arr = np.frombuffer(payload[off : off + nb], dtype=np.dtype(dt))
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise DataError(f"tensor {name!r} byte count disagrees with shape")
        tensors[name] = arr.reshape(shape).copy()
    return header["kind"], header["meta"], tensors


# ---------------------------------------------------------------------------
# hashing


def params_hash(named: dict[str, Tensor]) -> str:
    """Order-independent content hash of a named tensor family."""
    h = hashlib.sha256()
    for name in sorted(named):
        arr = _little_endian(named[name].data)
        h.update(name.encode("utf-8"))
        h.update(b"\x00")
        h.update(arr.dtype.str.encode("ascii"))
        h.update(repr(arr.shape).encode("ascii"))
        h.update(b"\x00")
        h.update(arr.tobytes())
    return h.hexdigest()


def base_params_hash(base: BaseParams) -> str:
    """Hash of the frozen family; unchanged before/after beacon training."""
    return params_hash(base.named())


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoints


def _expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, I, V = cfg.hidden_size, cfg.intermediate_size, cfg.vocab_size
    dq = cfg.query_heads * cfg.head_dim
    dk = cfg.kv_heads * cfg.head_dim
    out: dict[str, tuple[int, ...]] = {
        "base.embed": (V, D),
        "base.final_norm": (D,),
        "base.lm_head": (D, V),
        "beacon.embed": (D,),
    }
    for i in range(cfg.num_layers):
        b = f"base.layers.{i}"
        out[f"{b}.attn_norm"] = (D,)
        out[f"{b}.attn.wq"] = (D, dq)
        out[f"{b}.attn.wk"] = (D, dk)
        out[f"{b}.attn.wv"] = (D, dk)
        out[f"{b}.attn.wo"] = (dq, D)
        out[f"{b}.mlp_norm"] = (D,)
        out[f"{b}.mlp.up"] = (D, I)
        out[f"{b}.mlp.gate"] = (D, I)
        out[f"{b}.mlp.down"] = (I, D)
        s = f"beacon.layers.{i}.attn"
        out[f"{s}.wq"] = (D, dq)
        out[f"{s}.wk"] = (D, dk)
        out[f"{s}.wv"] = (D, dk)
    return out


def save_checkpoint(
    path,
    config: ModelConfig,
    base: BaseParams,
    beacon: BeaconParams,
    meta: dict | None = None,
) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, t in base.named().items():
        tensors[f"base.{name}"] = t.data
    for name, t in beacon.named().items():
        tensors[f"beacon.{name}"] = t.data
    full_meta = {
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
    }
    if meta:
        overlap = set(meta) & set(full_meta)
        if overlap:
            raise DataError(f"meta keys collide with reserved ones: {sorted(overlap)}")
        full_meta.update(meta)
    write_container(path, "checkpoint", full_meta, tensors)


def load_checkpoint(path) -> tuple[ModelConfig, BaseParams, BeaconParams, dict]:
    kind, meta, tensors = read_container(path)
    if kind != "checkpoint":
        raise DataError(f"expected a checkpoint container, found kind {kind!r}")
    if "config" not in meta or "config_hash" not in meta:
        raise DataError("checkpoint meta lacks config")
    config = ModelConfig.from_dict(meta["config"])
    if config.config_hash() != meta["config_hash"]:
        raise DataError("checkpoint config hash disagrees with its config")
    expected = _expected_shapes(config)
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))[:3]
        extra = sorted(set(tensors) - set(expected))[:3]
        raise DataError(
            f"checkpoint tensors do not match the architecture "
            f"(missing {missing}, unexpected {extra})"
        )
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise DataError(
                f"tensor {name!r} has shape {tensors[name].shape}, wanted {shape}"
            )

    def t(name: str) -> Tensor:
        return Tensor(tensors[name])

    base_layers = [
        LayerBase(
            attn_norm=t(f"base.layers.{i}.attn_norm"),
            wq=t(f"base.layers.{i}.attn.wq"),
            wk=t(f"base.layers.{i}.attn.wk"),
            wv=t(f"base.layers.{i}.attn.wv"),
            wo=t(f"base.layers.{i}.attn.wo"),
            mlp_norm=t(f"base.layers.{i}.mlp_norm"),
            up=t(f"base.layers.{i}.mlp.up"),
            gate=t(f"base.layers.{i}.mlp.gate"),
            down=t(f"base.layers.{i}.mlp.down"),
        )
        for i in range(config.num_layers)
    ]
    base = BaseParams(
        embed=t("base.embed"),
        layers=base_layers,
        final_norm=t("base.final_norm"),
        lm_head=t("base.lm_head"),
    )
    beacon_layers = [
        LayerBeacon(
            wq=t(f"beacon.layers.{i}.attn.wq"),
            wk=t(f"beacon.layers.{i}.attn.wk"),
            wv=t(f"beacon.layers.{i}.attn.wv"),
        )
        for i in range(config.num_layers)
    ]
    beacon = BeaconParams(embed=t("beacon.embed"), layers=beacon_layers)
    return config, base, beacon, meta


def load_model(path) -> BeaconModel:
    config, base, beacon, _ = load_checkpoint(path)
    return BeaconModel(config, base, beacon)


# ---------------------------------------------------------------------------
# cache snapshots


def save_cache(path, cache: CompressedCache) -> None:
    """Snapshot a cache: concatenated per-layer K/V plus resume bookkeeping."""
    tensors: dict[str, np.ndarray] = {}
    layer_kv = cache.layer_tensors()
    if layer_kv is not None:
        for i, (k, v) in enumerate(layer_kv):
            tensors[f"layers.{i}.k"] = k.data
            tensors[f"layers.{i}.v"] = v.data
    meta = {
        "config_hash": cache.config_hash,
        "num_layers": cache.num_layers,
        "entries": cache.entries,
        "consumed_tokens": cache.consumed,
        "chunks": cache.chunk_index,
        "pending": [int(x) for x in cache.pending],
        "ratios": [int(r) for r in cache.ratios],
    }
    write_container(path, "cache", meta, tensors)


def load_cache(path, model: BeaconModel) -> CompressedCache:
    """Rehydrate a snapshot against the model it was produced under."""
    kind, meta, tensors = read_container(path)
    if kind != "cache":
        raise DataError(f"expected a cache container, found kind {kind!r}")
    if meta.get("config_hash") != model.config.config_hash():
        raise StateError("cache snapshot was built under a different model config")
    L = meta["num_layers"]
    if L != model.config.num_layers:
        raise DataError("snapshot layer count disagrees with the model")
    entries = int(meta["entries"])
    parts: list[list[tuple[Tensor, Tensor]]] = []
    if entries == 0:
        if tensors:
            raise DataError("empty snapshot should carry no tensors")
        parts = [[] for _ in range(L)]
    else:
        want = {f"layers.{i}.{x}" for i in range(L) for x in ("k", "v")}
        if set(tensors) != want:
            raise DataError("snapshot tensor names do not match its layer count")
        kv_shape = (entries, model.config.kv_heads, model.config.head_dim)
        for i in range(L):
            k, v = tensors[f"layers.{i}.k"], tensors[f"layers.{i}.v"]
            if k.shape != kv_shape or v.shape != kv_shape:
                raise DataError(
                    f"layer {i} snapshot shape {k.shape} disagrees with {kv_shape}"
                )
            parts.append([(Tensor(k), Tensor(v))])
    return CompressedCache(
        config_hash=meta["config_hash"],
        num_layers=L,
        layer_parts=parts,
        entries=entries,
        consumed=int(meta["consumed_tokens"]),
        chunk_index=int(meta["chunks"]),
        pending=[int(x) for x in meta["pending"]],
        ratios=[int(r) for r in meta["ratios"]],
    )
