"""Training: compression auto-regression over a frozen base.

Two phases share one loop. The "base" phase is ordinary next-token
pretraining of the raw-token transformer, used to produce a frozen base
at desk scale. The "compress" phase trains only the beacon family: each
document is chunked, every chunk is encoded against the beacons
accumulated so far, and the loss is the mean NLL of raw tokens in chunks
after the first. Beacon rows and the whole first chunk carry the ignore
label. Gradients flow through the accumulated beacon activations into
earlier chunks; nothing is detached.

A batch is processed as gradient accumulation over single sequences, one
tape per sequence. The optimizer is Adam with decoupled weight decay and
a linearly decaying learning rate (no warmup).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import numerics as nm
from .numerics import Tensor, Tape, IGNORE_LABEL
from .errors import ConfigError, DataError, NumericError, UsageError
from .model import BeaconModel, ModelConfig
from .compressor import ChunkPlan, CompressedCache, encode_and_accumulate, partition, plans_for_tokens
from . import container


# ---------------------------------------------------------------------------
# tokenizer and corpus


class ByteTokenizer:
    """Byte-level tokenizer: one id per byte, id 0 doubles as eos.

    Plain text never contains NUL, so reserving byte 0 as the document
    terminator costs nothing at this scale.
    """

    vocab_size = 256
    eos_id = 0

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids) -> str:
        return bytes(int(i) for i in ids).decode("utf-8", errors="replace")


def read_documents(source) -> list[str]:
    """A directory of *.txt files (one doc each) or a file of one doc per line."""
    p = Path(source)
    if p.is_dir():
        return [f.read_text(encoding="utf-8") for f in sorted(p.glob("*.txt"))]
    if p.is_file():
        return [ln for ln in p.read_text(encoding="utf-8").splitlines() if ln.strip()]
    raise DataError(f"corpus source {source!r} is neither a directory nor a file")


def prepare_corpus(
    source,
    min_len: int,
    max_len: int,
    tokenizer: ByteTokenizer | None = None,
    seed: int = 0,
) -> list[np.ndarray]:
    """Tokenize, drop out-of-range documents, append eos, shuffle by seed.

    Length bounds are inclusive and apply before the eos is appended.
    """
    tokenizer = tokenizer or ByteTokenizer()
    docs = read_documents(source)
    kept = []
    for text in docs:
        ids = tokenizer.encode(text)
        if min_len <= len(ids) <= max_len:
            kept.append(np.asarray(ids + [tokenizer.eos_id], dtype=np.int64))
    if not kept:
        raise DataError("no documents survive the length filter")
    order = np.random.default_rng([seed, len(kept)]).permutation(len(kept))
    return [kept[i] for i in order]


# ---------------------------------------------------------------------------
# ratio schedule


@dataclass
class RatioSchedule:
    """Sequential ratio draws for training examples.

    chunkwise: an independent draw per chunk. instancewise: one draw per
    example, broadcast over its chunks. The draw sequence is a pure
    function of the seed.
    """

    ratio_set: tuple[int, ...]
    mode: str = "chunkwise"
    seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.ratio_set = tuple(int(r) for r in self.ratio_set)
        if not self.ratio_set:
            raise ConfigError("ratio_set must not be empty")
        if self.mode not in ("chunkwise", "instancewise"):
            raise ConfigError("ratio mode must be chunkwise or instancewise")
        self._rng = np.random.default_rng([self.seed, 1])

    def sample(self, num_chunks: int) -> list[int]:
        if num_chunks < 1:
            raise UsageError("an example has at least one chunk")
        if self.mode == "instancewise":
            return [int(self._rng.choice(self.ratio_set))] * num_chunks
        return [int(r) for r in self._rng.choice(self.ratio_set, size=num_chunks)]


# ---------------------------------------------------------------------------
# labels


def build_labels(
    plan: ChunkPlan,
    chunk_tokens: np.ndarray,
    first_chunk: bool,
    next_token: int | None,
) -> np.ndarray:
    """Next-raw-token labels aligned to one interleaved chunk.

    Beacon rows are ignored. Every row of the first chunk is ignored. A
    raw row elsewhere is labeled with the following raw token; the last
    raw row takes `next_token` (the first raw token of the next chunk),
    or is ignored when the document ends here.
    """
    chunk_tokens = np.asarray(chunk_tokens, dtype=np.int64)
    if chunk_tokens.size != plan.length:
        raise ConfigError("plan length disagrees with the chunk")
    out = np.full(plan.length + plan.beacons, IGNORE_LABEL, dtype=np.int64)
    if first_chunk:
        return out
    raw_rows = np.flatnonzero(~plan.kinds)
    out[raw_rows[:-1]] = chunk_tokens[1:]
    if next_token is not None:
        out[raw_rows[-1]] = next_token
    return out


def labels_for_document(
    plans: list[ChunkPlan], tokens: np.ndarray
) -> list[np.ndarray]:
    """Per-chunk label arrays for a whole document."""
    tokens = np.asarray(tokens, dtype=np.int64)
    n = tokens.size
    if sum(p.length for p in plans) != n:
        raise ConfigError("plans do not cover the document")
    out = []
    start = 0
    for i, plan in enumerate(plans):
        end = start + plan.length
        nxt = int(tokens[end]) if end < n else None
        out.append(build_labels(plan, tokens[start:end], i == 0, nxt))
        start = end
    return out


# ---------------------------------------------------------------------------
# losses


def compression_ar_loss(
    model: BeaconModel,
    tokens,
    ratios: list[int],
    layout: str = "interleaved",
) -> tuple[Tensor | None, int]:
    """Chunk-loop loss: mean NLL over labeled raw rows, all chunks on tape.

    Returns (loss, labeled_rows); (None, 0) when the example is too short
    to label anything (at most one chunk plus one successor token).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    n = tokens.size
    w = model.config.chunk_size
    if n < w + 2:
        return None, 0
    plans = plans_for_tokens(model.config, n, ratios, layout)
    labels = labels_for_document(plans, tokens)
    cache = CompressedCache.empty(model)
    total: Tensor | None = None
    counted = 0
    start = 0
    for plan, lab in zip(plans, labels):
        chunk = tokens[start : start + plan.length]
        start += plan.length
        h = encode_and_accumulate(model, chunk, plan, cache)
        if (lab == IGNORE_LABEL).all():
            continue
        loss_i, n_i = nm.cross_entropy(model.lm_logits(h), lab)
        if n_i == 0:
            continue
        piece = nm.mul(loss_i, float(n_i))
        total = piece if total is None else nm.add(total, piece)
        counted += n_i
    if total is None or counted == 0:
        return None, 0
    return nm.mul(total, 1.0 / counted), counted


def base_ar_loss(model: BeaconModel, tokens) -> tuple[Tensor | None, int]:
    """Vanilla next-token loss over a whole document, no beacons."""
    tokens = np.asarray(tokens, dtype=np.int64)
    n = tokens.size
    if n < 2:
        return None, 0
    h, _ = model.forward_chunk(tokens, None, 0)
    labels = np.concatenate([tokens[1:], [IGNORE_LABEL]])
    loss, counted = nm.cross_entropy(model.lm_logits(h), labels)
    return loss, counted


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay and linear lr decay, no warmup."""

    def __init__(
        self,
        named_params: list[tuple[str, Tensor]],
        lr: float,
        total_steps: int,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        if total_steps < 1:
            raise ConfigError("total_steps must be at least 1")
        b1, b2 = betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        self.params = list(named_params)
        self.lr = float(lr)
        self.total_steps = int(total_steps)
        self.b1, self.b2 = float(b1), float(b2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self._m = {n: np.zeros_like(p.data) for n, p in self.params}
        self._v = {n: np.zeros_like(p.data) for n, p in self.params}

    def current_lr(self) -> float:
        return self.lr * (1.0 - self.step_count / self.total_steps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def apply(self) -> float:
        """One update from the accumulated .grad buffers; returns lr used."""
        lr_t = self.current_lr()
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.b1**t
        c2 = 1.0 - self.b2**t
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in {name} at step {t}")
            m = self._m[name]
            v = self._v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= np.asarray(lr_t * update, dtype=p.data.dtype)
        return lr_t


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainConfig:
    model: dict = field(default_factory=dict)
    corpus: str = ""
    phase: str = "compress"
    seed: int = 0
    steps: int = 100
    batch_size: int = 4
    learning_rate: float = 5e-4
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    ratio_mode: str = "chunkwise"
    min_doc_len: int = 1
    max_doc_len: int = 1 << 20
    init_checkpoint: str | None = None
    out_checkpoint: str | None = None
    metrics_path: str | None = None
    log_every: int = 1
    beacon_layout: str = "interleaved"
    pretrain_corpus: str | None = None
    pretrain_mix: float = 0.0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.phase not in ("base", "compress"):
            raise ConfigError("phase must be 'base' or 'compress'")
        if self.steps < 1 or self.batch_size < 1 or self.log_every < 1:
            raise ConfigError("steps, batch_size and log_every must be positive")
        if not (0.0 <= self.pretrain_mix <= 1.0):
            raise ConfigError("pretrain_mix must lie in [0, 1]")
        if self.pretrain_mix > 0.0 and not self.pretrain_corpus:
            raise ConfigError("pretrain_mix needs a pretrain_corpus")
        if self.min_doc_len > self.max_doc_len:
            raise ConfigError("min_doc_len exceeds max_doc_len")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read training config: {e}") from e
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def _example_stream(corpus: list[np.ndarray], seed: int):
    """Cycle the corpus forever, reshuffled each epoch, fixed by seed."""
    epoch = 0
    while True:
        order = np.random.default_rng([seed, 2, epoch]).permutation(len(corpus))
        for i in order:
            yield corpus[i]
        epoch += 1


def train_step(
    model: BeaconModel,
    batch: list[np.ndarray],
    opt: AdamW,
    loss_fn,
) -> dict:
    """Gradient accumulation over the batch, then one optimizer update."""
    opt.zero_grad()
    losses = []
    tokens = 0
    for ex in batch:
        tokens += int(np.asarray(ex).size)
        with Tape() as tape:
            loss, counted = loss_fn(ex)
        if loss is None or counted == 0:
            continue
        nm.backward(tape, loss)
        losses.append(float(loss.data))
    m = len(losses)
    if m > 1:
        for _, p in opt.params:
            if p.grad is not None:
                p.grad /= m
    lr_used = opt.apply()
    mean_loss = float(np.mean(losses)) if losses else 0.0
    if not math.isfinite(mean_loss):
        raise NumericError(f"non-finite loss at step {opt.step_count}")
    return {
        "loss": mean_loss,
        "lr": lr_used,
        "examples": m,
        "skipped": len(batch) - m,
        "tokens": tokens,
    }


@dataclass
class TrainResult:
    model: BeaconModel
    summary: dict


def train(config: TrainConfig | dict | str) -> TrainResult:
    """Run one phase end to end; write checkpoint and metrics if asked."""
    if isinstance(config, (str, Path)):
        config = TrainConfig.from_file(config)
    elif isinstance(config, dict):
        config = TrainConfig.from_dict(config)

    if config.init_checkpoint:
        model = container.load_model(config.init_checkpoint)
        if config.model:
            declared = ModelConfig.from_dict(config.model)
            if declared != model.config:
                raise ConfigError(
                    "config.model disagrees with the checkpoint architecture"
                )
    else:
        if not config.model:
            raise ConfigError("need either model fields or an init_checkpoint")
        model = BeaconModel.new(ModelConfig.from_dict(config.model), seed=config.seed)
    cfg = model.config

    if not config.corpus:
        raise ConfigError("training needs a corpus")
    if cfg.vocab_size < ByteTokenizer.vocab_size:
        raise ConfigError("byte-level corpus needs vocab_size of at least 256")
    corpus = prepare_corpus(
        config.corpus, config.min_doc_len, config.max_doc_len, seed=config.seed
    )
    stream = _example_stream(corpus, config.seed)
    mix_stream = None
    mix_rng = None
    if config.pretrain_mix > 0.0:
        mix_corpus = prepare_corpus(
            config.pretrain_corpus,
            config.min_doc_len,
            config.max_doc_len,
            seed=config.seed,
        )
        mix_stream = _example_stream(mix_corpus, config.seed + 1)
        mix_rng = np.random.default_rng([config.seed, 3])

    trainable = model.set_trainable("base" if config.phase == "base" else "beacon")
    schedule = RatioSchedule(cfg.ratio_set, config.ratio_mode, config.seed)

    if config.phase == "base":
        def loss_fn(ex):
            return base_ar_loss(model, ex)
    else:
        def loss_fn(ex):
            n = int(np.asarray(ex).size)
            ratios = schedule.sample(len(partition(n, cfg.chunk_size)))
            return compression_ar_loss(model, ex, ratios, config.beacon_layout)

    opt = AdamW(
        trainable,
        lr=config.learning_rate,
        total_steps=config.steps,
        betas=config.betas,
        weight_decay=config.weight_decay,
    )
    base_hash_before = container.base_params_hash(model.base)

    metrics_file = None
    if config.metrics_path:
        Path(config.metrics_path).parent.mkdir(parents=True, exist_ok=True)
        metrics_file = open(config.metrics_path, "w", encoding="utf-8")
    first_loss = None
    last_loss = 0.0
    tokens_seen = 0
    try:
        for step in range(1, config.steps + 1):
            batch = []
            for _ in range(config.batch_size):
                if mix_stream is not None and mix_rng.random() < config.pretrain_mix:
                    batch.append(next(mix_stream))
                else:
                    batch.append(next(stream))
            rec = train_step(model, batch, opt, loss_fn)
            tokens_seen += rec["tokens"]
            last_loss = rec["loss"]
            if first_loss is None and rec["examples"] > 0:
                first_loss = rec["loss"]
            if metrics_file and (step % config.log_every == 0 or step == config.steps):
                row = {
                    "step": step,
                    "loss": rec["loss"],
                    "lr": rec["lr"],
                    "tokens_seen": tokens_seen,
                }
                metrics_file.write(json.dumps(row, sort_keys=True) + "\n")
                metrics_file.flush()
    finally:
        if metrics_file:
            metrics_file.close()

    base_hash_after = container.base_params_hash(model.base)
    if config.phase == "compress" and base_hash_after != base_hash_before:
        raise NumericError("frozen base parameters changed during training")
    if config.out_checkpoint:
        Path(config.out_checkpoint).parent.mkdir(parents=True, exist_ok=True)
        # stored config omits paths so equal runs give equal checkpoint bytes
        stored = config.to_dict()
        for key in (
            "corpus",
            "init_checkpoint",
            "out_checkpoint",
            "metrics_path",
            "pretrain_corpus",
        ):
            stored.pop(key, None)
        container.save_checkpoint(
            config.out_checkpoint,
            cfg,
            model.base,
            model.beacon,
            meta={"phase": config.phase, "train_config": stored},
        )
    summary = {
        "phase": config.phase,
        "steps": config.steps,
        "first_loss": first_loss if first_loss is not None else 0.0,
        "final_loss": last_loss,
        "tokens_seen": tokens_seen,
        "base_hash_before": base_hash_before,
        "base_hash_after": base_hash_after,
        "checkpoint": config.out_checkpoint,
        "metrics": config.metrics_path,
        "config_hash": cfg.config_hash(),
    }
    return TrainResult(model=model, summary=summary)
