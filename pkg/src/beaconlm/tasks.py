"""Synthetic retrieval tasks, scoring, and length-keyed ratio tables.

The retrieval probe plants key-value records inside distractor text and
asks for a value by key. Alphabets are disjoint on purpose: filler is
lowercase plus space, keys are uppercase A..P, values are digits, and the
record markers are punctuation. A candidate value can therefore appear
nowhere except inside a value field, which makes the chance baseline of
exact-substring scoring computable in closed form.

Record format  : #KKKK=VVVV;
Question format: ?KKKK=
Answer format  : VVVV;

The same format generates training corpora: documents of filler with
several records followed by question-answer pairs, so next-token training
teaches copying values out of compressed context.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from .compressor import RatioPolicy, Session, compress_context, generate
from .errors import ConfigError, DataError, UsageError
from .model import BeaconModel
from .trainer import ByteTokenizer

FILLER_ALPHABET = "abcdefghijklmnopqrstuvwxyz "
KEY_ALPHABET = "ABCDEFGHIJKLMNOP"
VALUE_ALPHABET = "0123456789"
KEY_LEN = 4
VALUE_LEN = 4
RECORD_LEN = KEY_LEN + VALUE_LEN + 3  # "#KKKK=VVVV;"


def _filler(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.choice(list(FILLER_ALPHABET), size=n)


def _draw_distinct(rng: np.random.Generator, alphabet: str, length: int, count: int) -> list[str]:
    out: set[str] = set()
    while len(out) < count:
        out.add("".join(rng.choice(list(alphabet), size=length)))
    return sorted(out)  # sorted, then shuffled by the caller for determinism


def record_text(key: str, value: str) -> str:
    return f"#{key}={value};"


def question_text(key: str) -> str:
    return f"?{key}="


def answer_text(value: str) -> str:
    return f"{value};"


# ---------------------------------------------------------------------------
# needle construction


def make_needle_case(
    rng: np.random.Generator,
    length: int,
    depths: list[float],
) -> dict:
    """One haystack with len(depths) planted records and per-record questions."""
    k = len(depths)
    if k < 1:
        raise ConfigError("at least one needle is required")
    for d in depths:
        if not (0.0 <= d <= 1.0):
            raise ConfigError("depth fraction must lie in [0, 1]")
    if length < k * (RECORD_LEN + 1):
        raise ConfigError(f"context of {length} cannot hold {k} records")
    keys = _draw_distinct(rng, KEY_ALPHABET, KEY_LEN, k)
    values = _draw_distinct(rng, VALUE_ALPHABET, VALUE_LEN, k)
    rng.shuffle(keys)
    rng.shuffle(values)

    context = _filler(rng, length)
    offsets = [round(d * (length - RECORD_LEN)) for d in depths]
    # push overlapping placements apart, keeping depth order
    placed = sorted(range(k), key=lambda i: offsets[i])
    for a, b in zip(placed, placed[1:]):
        if offsets[b] < offsets[a] + RECORD_LEN:
            offsets[b] = offsets[a] + RECORD_LEN
    if offsets[placed[-1]] + RECORD_LEN > length:
        raise ConfigError("records do not fit at the requested depths")
    needles = []
    for i in range(k):
        text = record_text(keys[i], values[i])
        context[offsets[i] : offsets[i] + RECORD_LEN] = list(text)
        needles.append({"key": keys[i], "value": values[i], "depth": float(depths[i])})
    ctx = "".join(context)
    for n in needles:
        if ctx.count(n["value"]) != 1:
            raise ConfigError("planted value is not unique in the haystack")
    return {
        "length": length,
        "context": ctx,
        "needles": needles,
        "questions": [question_text(n["key"]) for n in needles],
        "answers": [answer_text(n["value"]) for n in needles],
    }


def gen_needle_corpus(
    seed: int,
    lengths: int | list[int],
    depths: list[float],
    num_cases: int,
    num_needles: int = 1,
    chunk_size: int | None = None,
    path=None,
) -> list[dict]:
    """Reproducible task set over the (length, depth) grid.

    Single-needle cases cycle through every grid cell; multi-needle cases
    place one record per 1/k depth band, slid together by the grid depth.
    Pass chunk_size to enforce that every context spans at least two
    chunks.
    """
    if num_cases < 1:
        raise ConfigError("num_cases must be positive")
    if isinstance(lengths, int):
        lengths = [lengths]
    if not lengths or not depths:
        raise ConfigError("need at least one length and one depth")
    if chunk_size is not None:
        for n in lengths:
            if n < 2 * chunk_size:
                raise ConfigError(
                    f"context length {n} spans fewer than two chunks of {chunk_size}"
                )
    cells = [(n, d) for n in lengths for d in depths]
    out = []
    for i in range(num_cases):
        n, d = cells[i % len(cells)]
        rng = np.random.default_rng([seed, i])
        if num_needles == 1:
            case_depths = [d]
        else:
            # one needle per 1/k band, the grid depth sliding all of them
            case_depths = [(j + d) / num_needles for j in range(num_needles)]
        case = make_needle_case(rng, n, case_depths)
        case["id"] = i
        out.append(case)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for case in out:
                f.write(json.dumps(case, sort_keys=True) + "\n")
    return out


def load_needle_tasks(path) -> list[dict]:
    rows = []
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read task file: {e}") from e
    for line in text.splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        for key in ("context", "needles", "questions", "answers", "length"):
            if key not in row:
                raise DataError(f"task row lacks {key!r}")
        rows.append(row)
    if not rows:
        raise DataError("task file holds no cases")
    return rows


# ---------------------------------------------------------------------------
# scoring


def score_needle(outputs: list, tasks: list[dict]) -> dict:
    """Exact-substring accuracy, marginalized into (length, depth) cells.

    outputs[i] is one string for a single-question case or a list with one
    string per question. Every needle of every case is one scoring unit.
    """
    if len(outputs) != len(tasks):
        raise UsageError("one output per task case is required")
    cells: dict[tuple[int, float], list[int]] = {}
    hits = 0
    total = 0
    for out, task in zip(outputs, tasks):
        outs = [out] if isinstance(out, str) else list(out)
        if len(outs) != len(task["questions"]):
            raise UsageError("output count disagrees with the case's questions")
        for text, needle in zip(outs, task["needles"]):
            hit = int(needle["value"] in text)
            hits += hit
            total += 1
            key = (int(task["length"]), float(needle["depth"]))
            cells.setdefault(key, []).append(hit)
    return {
        "total": total,
        "hits": hits,
        "accuracy": hits / total,
        "cells": [
            {
                "length": n,
                "depth": d,
                "n": len(v),
                "hits": sum(v),
                "accuracy": sum(v) / len(v),
            }
            for (n, d), v in sorted(cells.items())
        ],
    }


def chance_hit_probability(
    output_len: int, value_len: int = VALUE_LEN, alphabet_size: int = len(VALUE_ALPHABET)
) -> float:
    """Union bound on a random digit string containing one fixed value.

    An output of output_len characters has output_len - value_len + 1
    windows; each matches a uniform random draw with alphabet^-value_len.
    The bound overstates chance, which only makes significance tests
    harder to pass.
    """
    windows = max(0, output_len - value_len + 1)
    return min(1.0, windows * alphabet_size ** (-value_len))


def needle_significance(hits: int, total: int, p0: float) -> float:
    """One-sided binomial p-value for beating the chance baseline."""
    if total < 1:
        raise UsageError("significance needs at least one trial")
    return float(binomtest(hits, total, p0, alternative="greater").pvalue)


# ---------------------------------------------------------------------------
# running a model over tasks


def evaluate_needle(
    model: BeaconModel,
    tasks: list[dict],
    ratio: int = 2,
    max_new: int = 8,
    seed: int = 0,
) -> tuple[list, dict]:
    """Compress each context, ask its questions, score the answers.

    Multi-question cases run as consecutive turns of one session over the
    same compressed context. Returns (outputs, report); the report carries
    the chance baseline for max_new-character outputs and its one-sided
    p-value.
    """
    tok = ByteTokenizer()
    policy = RatioPolicy(mode="constant", ratio=ratio)
    stop = ord(";")
    outputs: list = []
    for task in tasks:
        cache = compress_context(model, tok.encode(task["context"]), policy)
        if len(task["questions"]) == 1:
            ids = generate(
                model,
                cache,
                tok.encode(task["questions"][0]),
                max_new=max_new,
                policy=policy,
                seed=seed,
                stop_token=stop,
            )
            outputs.append(tok.decode(ids))
        else:
            session = Session(model, policy, cache)
            outs = []
            for q in task["questions"]:
                ids = session.generate(
                    tok.encode(q), max_new=max_new, seed=seed, stop_token=stop
                )
                outs.append(tok.decode(ids))
            outputs.append(outs)
    report = score_needle(outputs, tasks)
    p0 = chance_hit_probability(max_new)
    report["chance_p0"] = p0
    report["p_value"] = needle_significance(report["hits"], report["total"], p0)
    report["ratio"] = ratio
    return outputs, report


# ---------------------------------------------------------------------------
# training corpus in the same format


def make_copy_doc(
    rng: np.random.Generator,
    doc_len: int,
    num_records: int = 3,
    num_queries: int = 2,
) -> str:
    """Filler with planted records, then question-answer pairs at the end."""
    if num_queries > num_records:
        raise ConfigError("cannot query more keys than records")
    qa_len = num_queries * (RECORD_LEN)  # "?KKKK=" + "VVVV;" is record-sized
    body_len = doc_len - qa_len
    if body_len < num_records * (RECORD_LEN + 1):
        raise ConfigError(f"doc of {doc_len} cannot hold {num_records} records")
    keys = _draw_distinct(rng, KEY_ALPHABET, KEY_LEN, num_records)
    values = _draw_distinct(rng, VALUE_ALPHABET, VALUE_LEN, num_records)
    rng.shuffle(keys)
    rng.shuffle(values)
    body = _filler(rng, body_len)
    step = body_len // num_records
    for i in range(num_records):
        lo = i * step
        offset = lo + int(rng.integers(0, max(1, step - RECORD_LEN)))
        body[offset : offset + RECORD_LEN] = list(record_text(keys[i], values[i]))
    queried = rng.permutation(num_records)[:num_queries]
    qa = "".join(
        question_text(keys[q]) + answer_text(values[q]) for q in queried
    )
    return "".join(body) + qa


def build_copy_corpus(
    path,
    num_docs: int,
    doc_len: int,
    seed: int = 0,
    num_records: int = 3,
    num_queries: int = 2,
) -> list[str]:
    """Line-delimited training corpus of key-value copy documents."""
    docs = []
    for i in range(num_docs):
        rng = np.random.default_rng([seed, 5, i])
        docs.append(make_copy_doc(rng, doc_len, num_records, num_queries))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(docs) + "\n", encoding="utf-8")
    return docs


# ---------------------------------------------------------------------------
# length-keyed adaptive ratio table


@dataclass(frozen=True)
class AdaptiveTable:
    """Context length -> ratio lookup with strictly increasing thresholds.

    Entry (bound, ratio) covers lengths up to bound inclusive; lengths
    beyond the last bound take the last ratio. A pure function of length,
    never of content.
    """

    entries: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(
            self, "entries", tuple((int(b), int(r)) for b, r in self.entries)
        )
        if not self.entries:
            raise ConfigError("adaptive table must not be empty")
        bounds = [b for b, _ in self.entries]
        if any(a >= b for a, b in zip(bounds, bounds[1:])):
            raise ConfigError("adaptive table thresholds must strictly increase")
        if any(r < 1 for _, r in self.entries):
            raise ConfigError("ratios must be positive")

    def ratio_for_length(self, n: int) -> int:
        for bound, ratio in self.entries:
            if n <= bound:
                return ratio
        return self.entries[-1][1]


# Desk table mirrors the production-scale shape at 1/64 length.
DESK_ADAPTIVE = AdaptiveTable(((128, 2), (256, 4), (512, 8)))
PRODUCTION_ADAPTIVE = AdaptiveTable(((8192, 2), (16384, 4), (32768, 8)))


def resolve_policy(
    ratio_set: tuple[int, ...],
    mode: str = "constant",
    ratio: int | None = None,
    seed: int = 0,
    budget: int = 0,
    table: AdaptiveTable | None = None,
    context_len: int | None = None,
) -> RatioPolicy:
    """Translate user-facing policy flags into a chunk-sealing policy.

    constant: the given ratio (smallest in the set when omitted).
    random: a seeded per-chunk draw from the ratio set.
    adaptive: table lookup on the total context length, then constant.
    budget: smallest ratio whose projected entries fit the budget.
    """
    if mode == "constant":
        r = ratio if ratio is not None else min(ratio_set)
        return RatioPolicy(mode="constant", ratio=int(r))
    if mode == "random":
        return RatioPolicy(mode="random", seed=seed)
    if mode == "adaptive":
        if context_len is None:
            raise ConfigError("adaptive policy needs the context length")
        table = table if table is not None else DESK_ADAPTIVE
        r = table.ratio_for_length(int(context_len))
        if r not in ratio_set:
            raise ConfigError(
                f"adaptive table chose ratio {r}, not in ratio_set {ratio_set}"
            )
        return RatioPolicy(mode="constant", ratio=r)
    if mode == "budget":
        return RatioPolicy(mode="adaptive", budget=budget)
    raise ConfigError(f"unknown policy mode {mode!r}")
