"""Command line surface.

Batch verbs (train, needle-gen, needle-eval) call the library directly.
Request-shaped verbs (compress, generate, flops) go through the HTTP
service: in process by default, or against a remote server with
--server. serve runs the service as a daemon.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import BeaconError

DESK_TABLE_FLAG = "128:2,256:4,512:8"


def _int_list(s: str) -> list[int]:
    out = [int(x) for x in s.replace(" ", "").split(",") if x]
    if not out:
        raise argparse.ArgumentTypeError("expected a comma-separated int list")
    return out


def _float_list(s: str) -> list[float]:
    out = [float(x) for x in s.replace(" ", "").split(",") if x]
    if not out:
        raise argparse.ArgumentTypeError("expected a comma-separated float list")
    return out


def _table(s: str) -> list[list[int]]:
    try:
        return [[int(a), int(b)] for a, b in (part.split(":") for part in s.split(","))]
    except ValueError as e:
        raise argparse.ArgumentTypeError("table looks like '128:2,256:4'") from e


def _client(server: str | None):
    if server:
        import httpx

        return httpx.Client(base_url=server, timeout=httpx.Timeout(None))
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DeprecationWarning)
        from fastapi.testclient import TestClient

    from .service import create_app

    return TestClient(create_app())


def _post(client, path: str, body: dict) -> dict:
    r = client.post(path, json=body)
    if r.status_code >= 400:
        try:
            detail = r.json()
        except ValueError:
            detail = {"detail": r.text}
        print(json.dumps(detail), file=sys.stderr)
        raise SystemExit(1)
    return r.json()


def _policy_body(args) -> dict:
    body = {"mode": args.policy, "seed": args.policy_seed, "budget": args.budget}
    if args.ratio is not None:
        body["ratio"] = args.ratio
    if args.table is not None:
        body["table"] = args.table
    return body


def _add_policy_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--policy",
        choices=["constant", "random", "adaptive", "budget"],
        default="constant",
        help="ratio selection: fixed, per-chunk random, length-table, or entry budget",
    )
    p.add_argument("--ratio", type=int, default=None, help="ratio for constant mode")
    p.add_argument("--policy-seed", type=int, default=0, help="seed for random mode")
    p.add_argument("--budget", type=int, default=0, help="entry budget for budget mode")
    p.add_argument(
        "--table",
        type=_table,
        default=None,
        help=f"adaptive thresholds, e.g. '{DESK_TABLE_FLAG}'",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="beaconlm",
        description="Long-context compression via beacon activations.",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="run one training phase from a config file")
    p.add_argument("config", help="JSON training config")

    p = sub.add_parser("compress", help="compress a context into a cache snapshot")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="text file to compress")
    src.add_argument("--text", help="literal text to compress")
    _add_policy_flags(p)
    p.add_argument("--no-finalize", action="store_true", help="keep the tail pending")
    p.add_argument("--layout", choices=["interleaved", "trailing"], default="interleaved")
    p.add_argument("--snapshot-out", help="where to write the cache snapshot")
    p.add_argument("--server", help="remote service URL (default: in-process)")

    p = sub.add_parser("generate", help="decode against a compressed context")
    p.add_argument("--checkpoint", required=True)
    ctx = p.add_mutually_exclusive_group()
    ctx.add_argument("--snapshot", help="cache snapshot to condition on")
    ctx.add_argument("--context-file", help="raw context text file")
    ctx.add_argument("--context-text", help="literal raw context")
    p.add_argument("--prompt", required=True, help="prompt text")
    p.add_argument("--max-new", type=int, default=32)
    p.add_argument("--sampling", choices=["greedy", "temperature"], default="greedy")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stop-token", type=int, default=None)
    _add_policy_flags(p)
    p.add_argument("--json", action="store_true", help="print the full response")
    p.add_argument("--server", help="remote service URL (default: in-process)")

    p = sub.add_parser("flops", help="emit the analytical cost curve")
    p.add_argument("--preset", choices=["desk", "llama2-7b"], default="desk")
    for name in (
        "num-layers",
        "hidden-size",
        "query-heads",
        "kv-heads",
        "head-dim",
        "intermediate-size",
        "vocab-size",
        "chunk-size",
    ):
        p.add_argument(f"--{name}", type=int, default=None)
    p.add_argument("--lengths", type=_int_list, default=None)
    p.add_argument("--ratios", type=_int_list, default=None)
    p.add_argument("--softmax-linear", action="store_true")
    p.add_argument("--out", help="CSV file for the curve")
    p.add_argument("--server", help="remote service URL (default: in-process)")

    p = sub.add_parser("needle-gen", help="generate retrieval task files")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lengths", type=_int_list, required=True)
    p.add_argument("--depths", type=_float_list, default=[0.0, 0.25, 0.5, 0.75, 1.0])
    p.add_argument("--num-cases", type=int, required=True)
    p.add_argument("--num-needles", type=int, default=1)
    p.add_argument("--chunk-size", type=int, default=64)
    p.add_argument("--out", required=True, help="JSONL task file to write")

    p = sub.add_parser("needle-eval", help="score a checkpoint on retrieval tasks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tasks", required=True, help="JSONL task file")
    p.add_argument("--ratio", type=int, default=2)
    p.add_argument("--max-new", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the report JSON here too")

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    return parser


def _cmd_train(args) -> int:
    from .trainer import train

    result = train(args.config)
    print(json.dumps(result.summary, indent=2, sort_keys=True))
    return 0


def _cmd_compress(args) -> int:
    if args.input:
        text = Path(args.input).read_text(encoding="utf-8")
    else:
        text = args.text
    body = {
        "checkpoint": args.checkpoint,
        "text": text,
        "policy": _policy_body(args),
        "finalize": not args.no_finalize,
        "layout": args.layout,
        "snapshot_out": args.snapshot_out,
    }
    with _client(args.server) as client:
        out = _post(client, "/compress", body)
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def _cmd_generate(args) -> int:
    body = {
        "checkpoint": args.checkpoint,
        "prompt_text": args.prompt,
        "max_new": args.max_new,
        "sampling": args.sampling,
        "temperature": args.temperature,
        "seed": args.seed,
        "stop_token": args.stop_token,
        "policy": _policy_body(args),
    }
    if args.snapshot:
        body["snapshot"] = args.snapshot
    elif args.context_file:
        body["context_text"] = Path(args.context_file).read_text(encoding="utf-8")
    elif args.context_text is not None:
        body["context_text"] = args.context_text
    with _client(args.server) as client:
        out = _post(client, "/generate", body)
    if args.json:
        print(json.dumps(out, indent=2, sort_keys=True))
    else:
        print(out["text"])
    return 0


def _cmd_flops(args) -> int:
    body = {
        "preset": args.preset,
        "softmax_linear": args.softmax_linear,
        "lengths": args.lengths,
        "ratios": args.ratios,
    }
    for flag, key in (
        ("num_layers", "num_layers"),
        ("hidden_size", "hidden_size"),
        ("query_heads", "query_heads"),
        ("kv_heads", "kv_heads"),
        ("head_dim", "head_dim"),
        ("intermediate_size", "intermediate_size"),
        ("vocab_size", "vocab_size"),
        ("chunk_size", "chunk_size"),
    ):
        value = getattr(args, flag)
        if value is not None:
            body[key] = value
    with _client(args.server) as client:
        out = _post(client, "/flops/report", body)
    rows = out["rows"]
    if args.out:
        from .analyzer import write_curve_csv

        write_curve_csv(rows, args.out)
    for row in rows:
        ratios = " ".join(
            f"x{key[len('ratio_x'):]}={row[key]:.3f}"
            for key in sorted(row, key=lambda k: (len(k), k))
            if key.startswith("ratio_x")
        )
        print(f"n={row['n']} flops_full={row['flops_full']} {ratios}")
    return 0


def _cmd_needle_gen(args) -> int:
    from .tasks import gen_needle_corpus

    cases = gen_needle_corpus(
        seed=args.seed,
        lengths=args.lengths,
        depths=args.depths,
        num_cases=args.num_cases,
        num_needles=args.num_needles,
        chunk_size=args.chunk_size,
        path=args.out,
    )
    print(json.dumps({"cases": len(cases), "path": args.out}))
    return 0


def _cmd_needle_eval(args) -> int:
    from . import container
    from .tasks import evaluate_needle, load_needle_tasks

    model = container.load_model(args.checkpoint)
    tasks = load_needle_tasks(args.tasks)
    _, report = evaluate_needle(
        model, tasks, ratio=args.ratio, max_new=args.max_new, seed=args.seed
    )
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port)
    return 0


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "train": _cmd_train,
        "compress": _cmd_compress,
        "generate": _cmd_generate,
        "flops": _cmd_flops,
        "needle-gen": _cmd_needle_gen,
        "needle-eval": _cmd_needle_eval,
        "serve": _cmd_serve,
    }
    try:
        return handlers[args.cmd](args)
    except BeaconError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
