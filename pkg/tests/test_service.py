"""HTTP service: endpoints, policy plumbing, sessions, and error mapping."""

import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from beaconlm import analyzer
from beaconlm import container as ct
from beaconlm.compressor import CompressedCache, Session, compress_context
from beaconlm.compressor import generate as lib_generate
from beaconlm.model import BeaconModel, ModelConfig
from beaconlm.service import create_app
from beaconlm.tasks import resolve_policy
from beaconlm.trainer import ByteTokenizer

W8 = ModelConfig(
    vocab_size=256,
    num_layers=1,
    hidden_size=16,
    query_heads=2,
    kv_heads=1,
    head_dim=8,
    intermediate_size=32,
    chunk_size=8,
    ratio_set=(2, 4, 8),
)

OTHER = ModelConfig(
    vocab_size=256,
    num_layers=1,
    hidden_size=24,
    query_heads=2,
    kv_heads=1,
    head_dim=12,
    intermediate_size=48,
    chunk_size=8,
    ratio_set=(2, 4, 8),
)

TOK = ByteTokenizer()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("service")


@pytest.fixture(scope="module")
def ckpt(workdir):
    model = BeaconModel.new(W8, seed=7)
    path = workdir / "w8.blm"
    ct.save_checkpoint(path, W8, model.base, model.beacon)
    return str(path)


@pytest.fixture(scope="module")
def other_ckpt(workdir):
    model = BeaconModel.new(OTHER, seed=3)
    path = workdir / "other.blm"
    ct.save_checkpoint(path, OTHER, model.base, model.beacon)
    return str(path)


@pytest.fixture(scope="module")
def app():
    return create_app()


@pytest.fixture(scope="module")
def client(app):
    with TestClient(app) as c:
        yield c


def ids(text):
    return np.asarray(TOK.encode(text), dtype=np.int64)


class TestHealth:
    def test_ok(self, client):
        body = client.get("/health").json()
        assert body["status"] == "ok"
        import beaconlm

        assert body["version"] == beaconlm.__version__


class TestFlopsReport:
    def test_default_grid(self, client):
        rows = client.post("/flops/report", json={}).json()["rows"]
        assert [r["n"] for r in rows] == [8192, 16384, 32768, 65536, 131072, 262144]
        assert {"flops_full", "flops_x2", "ratio_x2", "flops_x32", "ratio_x32"} <= set(
            rows[0]
        )

    def test_llama7b_speedup_at_256k(self, client):
        body = {"preset": "llama2-7b", "lengths": [262144], "ratios": [8]}
        row = client.post("/flops/report", json=body).json()["rows"][0]
        assert row["ratio_x8"] >= 4.0

    def test_rows_match_analyzer(self, client):
        body = {"preset": "desk", "lengths": [64, 128], "ratios": [2]}
        got = client.post("/flops/report", json=body).json()["rows"]
        want = analyzer.emit_curve(analyzer.DESK, [64, 128], [2])
        assert got == want

    def test_csv_out(self, client, workdir):
        out = str(workdir / "curve.csv")
        body = {"preset": "desk", "lengths": [64], "ratios": [2], "csv_out": out}
        resp = client.post("/flops/report", json=body).json()
        assert resp["csv_out"] == out
        lines = open(out).read().splitlines()
        assert lines[0] == "n,flops_full,flops_x2,ratio_x2"
        row = resp["rows"][0]
        assert lines[1].split(",")[:2] == [str(row["n"]), str(row["flops_full"])]

    def test_arch_override_changes_cost(self, client):
        base = client.post(
            "/flops/report", json={"preset": "desk", "lengths": [128], "ratios": [2]}
        ).json()["rows"][0]
        wide = client.post(
            "/flops/report",
            json={
                "preset": "desk",
                "hidden_size": 256,
                "query_heads": 8,
                "lengths": [128],
                "ratios": [2],
            },
        ).json()["rows"][0]
        assert wide["flops_full"] > base["flops_full"]

    def test_unknown_preset_rejected(self, client):
        r = client.post("/flops/report", json={"preset": "gpt-17"})
        assert r.status_code == 422


class TestCompress:
    def test_entries_at_ratio_eight(self, client, ckpt):
        # n = 8w at the largest ratio condenses to exactly w entries
        body = {
            "checkpoint": ckpt,
            "text": "a" * 64,
            "policy": {"mode": "constant", "ratio": 8},
        }
        out = client.post("/compress", json=body).json()
        assert out["n"] == 64
        assert out["chunks"] == 8
        assert out["entries"] == W8.chunk_size
        assert out["reduction"] == 8.0
        assert out["pending_tokens"] == 0

    def test_unfinalized_tail_stays_pending(self, client, ckpt):
        body = {
            "checkpoint": ckpt,
            "text": "b" * 20,
            "policy": {"mode": "constant", "ratio": 2},
            "finalize": False,
        }
        out = client.post("/compress", json=body).json()
        assert out["chunks"] == 2
        assert out["pending_tokens"] == 4

    def test_snapshot_roundtrips(self, client, ckpt, workdir):
        snap = str(workdir / "ctx.blmc")
        body = {
            "checkpoint": ckpt,
            "text": "some shared conversation context here",
            "policy": {"mode": "constant", "ratio": 2},
            "snapshot_out": snap,
        }
        out = client.post("/compress", json=body).json()
        assert out["snapshot"] == snap
        model = ct.load_model(ckpt)
        cache = ct.load_cache(snap, model)
        assert cache.entries == out["entries"]

    def test_snapshot_bytes_query_independent(self, client, ckpt, workdir):
        # the artifact depends on the context alone, never on a later question
        a, b = str(workdir / "qa.blmc"), str(workdir / "qb.blmc")
        for snap in (a, b):
            body = {
                "checkpoint": ckpt,
                "text": "the orbit of mercury precesses slowly",
                "policy": {"mode": "constant", "ratio": 4},
                "snapshot_out": snap,
            }
            assert client.post("/compress", json=body).status_code == 200
        assert open(a, "rb").read() == open(b, "rb").read()

    def test_tokens_input(self, client, ckpt):
        body = {
            "checkpoint": ckpt,
            "tokens": list(range(1, 33)),
            "policy": {"mode": "constant", "ratio": 2},
        }
        out = client.post("/compress", json=body).json()
        assert out["n"] == 32
        assert out["entries"] == 16

    def test_adaptive_table_picks_by_length(self, client, ckpt):
        table = [[16, 2], [64, 4]]
        body = {
            "checkpoint": ckpt,
            "text": "c" * 32,
            "policy": {"mode": "adaptive", "table": table},
        }
        out = client.post("/compress", json=body).json()
        assert out["ratios"] == [4, 4, 4, 4]
        body["text"] = "c" * 16
        out = client.post("/compress", json=body).json()
        assert out["ratios"] == [2, 2]
        # beyond the last threshold the table clamps to its largest ratio
        body["text"] = "c" * 80
        out = client.post("/compress", json=body).json()
        assert set(out["ratios"]) == {4}

    def test_text_and_tokens_conflict(self, client, ckpt):
        body = {"checkpoint": ckpt, "text": "x", "tokens": [1, 2]}
        r = client.post("/compress", json=body)
        assert r.status_code == 400
        assert r.json()["error"] == "UsageError"
        r = client.post("/compress", json={"checkpoint": ckpt})
        assert r.status_code == 400

    def test_missing_checkpoint(self, client):
        r = client.post("/compress", json={"checkpoint": "/nope.blm", "text": "x"})
        assert r.status_code == 400
        assert r.json()["error"] == "DataError"

    def test_snapshot_is_not_a_checkpoint(self, client, ckpt, workdir):
        snap = str(workdir / "notckpt.blmc")
        body = {"checkpoint": ckpt, "text": "y" * 16, "snapshot_out": snap}
        client.post("/compress", json=body)
        r = client.post("/compress", json={"checkpoint": snap, "text": "z"})
        assert r.status_code == 400

    def test_ratio_outside_set(self, client, ckpt):
        body = {
            "checkpoint": ckpt,
            "text": "d" * 16,
            "policy": {"mode": "constant", "ratio": 5},
        }
        r = client.post("/compress", json=body)
        assert r.status_code == 400
        assert r.json()["error"] == "ConfigError"

    def test_extra_fields_rejected(self, client, ckpt):
        r = client.post("/compress", json={"checkpoint": ckpt, "text": "x", "bogus": 1})
        assert r.status_code == 422


class TestGenerate:
    def test_empty_cache_matches_vanilla(self, client, ckpt):
        model = ct.load_model(ckpt)
        want = lib_generate(model, CompressedCache.empty(model), ids("hello"), max_new=6)
        body = {"checkpoint": ckpt, "prompt_text": "hello", "max_new": 6}
        out = client.post("/generate", json=body).json()
        assert out["tokens"] == [int(t) for t in want]

    def test_greedy_is_deterministic(self, client, ckpt):
        body = {
            "checkpoint": ckpt,
            "context_text": "e" * 40,
            "prompt_text": "q: ",
            "max_new": 5,
        }
        first = client.post("/generate", json=body).json()
        second = client.post("/generate", json=body).json()
        assert first == second

    def test_snapshot_source_matches_library(self, client, ckpt, workdir):
        snap = str(workdir / "gen.blmc")
        ctx = "f" * 48
        client.post(
            "/compress",
            json={
                "checkpoint": ckpt,
                "text": ctx,
                "policy": {"mode": "constant", "ratio": 2},
                "snapshot_out": snap,
            },
        )
        model = ct.load_model(ckpt)
        cache = ct.load_cache(snap, model)
        policy = resolve_policy(model.config.ratio_set, mode="constant", ratio=2)
        want = lib_generate(model, cache, ids("go"), max_new=5, policy=policy)
        body = {
            "checkpoint": ckpt,
            "snapshot": snap,
            "prompt_text": "go",
            "max_new": 5,
            "policy": {"mode": "constant", "ratio": 2},
        }
        out = client.post("/generate", json=body).json()
        assert out["tokens"] == [int(t) for t in want]

    def test_context_source_matches_library(self, client, ckpt):
        ctx, prompt = "g" * 30, "h?"
        model = ct.load_model(ckpt)
        policy = resolve_policy(model.config.ratio_set, mode="constant", ratio=2)
        cache = compress_context(model, ids(ctx), policy, finalize=False)
        want = lib_generate(model, cache, ids(prompt), max_new=4, policy=policy)
        body = {
            "checkpoint": ckpt,
            "context_text": ctx,
            "prompt_text": prompt,
            "max_new": 4,
            "policy": {"mode": "constant", "ratio": 2},
        }
        out = client.post("/generate", json=body).json()
        assert out["tokens"] == [int(t) for t in want]

    def test_temperature_seed_reproducible(self, client, ckpt):
        body = {
            "checkpoint": ckpt,
            "prompt_text": "rng",
            "max_new": 6,
            "sampling": "temperature",
            "temperature": 1.3,
            "seed": 11,
        }
        first = client.post("/generate", json=body).json()
        second = client.post("/generate", json=body).json()
        assert first["tokens"] == second["tokens"]

    def test_stop_token_ends_output(self, client, ckpt):
        body = {"checkpoint": ckpt, "prompt_text": "s", "max_new": 6}
        free = client.post("/generate", json=body).json()["tokens"]
        body["stop_token"] = free[0]
        out = client.post("/generate", json=body).json()["tokens"]
        assert out == [free[0]]

    def test_multiple_sources_conflict(self, client, ckpt, workdir):
        body = {
            "checkpoint": ckpt,
            "snapshot": str(workdir / "gen.blmc"),
            "context_text": "x",
            "prompt_text": "p",
        }
        r = client.post("/generate", json=body)
        assert r.status_code == 400
        assert r.json()["error"] == "UsageError"

    def test_prompt_required(self, client, ckpt):
        r = client.post("/generate", json={"checkpoint": ckpt})
        assert r.status_code == 400

    def test_snapshot_under_other_model_conflicts(self, client, ckpt, other_ckpt, workdir):
        snap = str(workdir / "mismatch.blmc")
        client.post(
            "/compress",
            json={"checkpoint": ckpt, "text": "i" * 24, "snapshot_out": snap},
        )
        body = {"checkpoint": other_ckpt, "snapshot": snap, "prompt_text": "p"}
        r = client.post("/generate", json=body)
        assert r.status_code == 409
        assert r.json()["error"] == "StateError"


class TestSessions:
    def test_lifecycle(self, client, ckpt, workdir):
        r = client.post(
            "/sessions",
            json={"checkpoint": ckpt, "policy": {"mode": "constant", "ratio": 2}},
        )
        sid = r.json()["session_id"]

        stats = client.post(f"/sessions/{sid}/append", json={"text": "j" * 40}).json()
        assert stats["consumed_tokens"] == 40
        assert stats["entries"] == 20

        out = client.post(
            f"/sessions/{sid}/generate", json={"prompt_text": "k: ", "max_new": 3}
        ).json()
        assert len(out["tokens"]) == 3
        # the turn itself lands in the rolling cache
        assert out["stats"]["consumed_tokens"] + out["stats"]["pending_tokens"] == 46

        info = client.get(f"/sessions/{sid}").json()
        assert info["session_id"] == sid
        assert info["checkpoint"] == ckpt

        snap = str(workdir / "sess.blmc")
        body = client.post(f"/sessions/{sid}/snapshot", json={"path": snap}).json()
        model = ct.load_model(ckpt)
        assert ct.load_cache(snap, model).entries == body["entries"]

        assert client.delete(f"/sessions/{sid}").json() == {"deleted": sid}
        assert client.get(f"/sessions/{sid}").status_code == 404

    def test_second_turn_reuses_cache(self, client, app, ckpt):
        # twin the conversation through the library and compare the
        # chunk-encode counters: a service that recompressed the whole
        # context each turn would run far more chunk forwards
        ctx = "the quick brown fox jumps over the lazy dog. " * 4
        sid = client.post(
            "/sessions",
            json={"checkpoint": ckpt, "policy": {"mode": "constant", "ratio": 2}},
        ).json()["session_id"]
        client.post(f"/sessions/{sid}/append", json={"text": ctx})
        client.post(f"/sessions/{sid}/generate", json={"prompt_text": "q1: ", "max_new": 3})

        twin_model = ct.load_model(ckpt)
        policy = resolve_policy(twin_model.config.ratio_set, mode="constant", ratio=2)
        twin = Session(twin_model, policy)
        twin.append(ids(ctx))
        twin.generate(ids("q1: "), max_new=3)

        svc_model = app.state.service.model(ckpt)
        svc_model.encode_count = 0
        twin_model.encode_count = 0
        out = client.post(
            f"/sessions/{sid}/generate", json={"prompt_text": "and? ", "max_new": 4}
        ).json()
        want = twin.generate(ids("and? "), max_new=4)
        assert out["tokens"] == [int(t) for t in want]
        assert svc_model.encode_count == twin_model.encode_count
        # the context above spans 20+ chunks; turn two must not revisit them
        assert 0 < svc_model.encode_count < 12

    def test_append_validation(self, client, ckpt):
        sid = client.post("/sessions", json={"checkpoint": ckpt}).json()["session_id"]
        r = client.post(f"/sessions/{sid}/append", json={"text": "x", "tokens": [1]})
        assert r.status_code == 400
        r = client.post(f"/sessions/{sid}/append", json={"tokens": [1, 2, 3]})
        assert r.json()["consumed_tokens"] + r.json()["pending_tokens"] == 3

    def test_adaptive_policy_rejected(self, client, ckpt):
        r = client.post(
            "/sessions", json={"checkpoint": ckpt, "policy": {"mode": "adaptive"}}
        )
        assert r.status_code == 400
        assert "one-shot" in r.json()["detail"]

    def test_missing_session_is_404(self, client):
        assert client.get("/sessions/zzz").status_code == 404
        assert client.delete("/sessions/zzz").status_code == 404
        assert client.post("/sessions/zzz/append", json={"text": "x"}).status_code == 404
        assert (
            client.post("/sessions/zzz/generate", json={"prompt_text": "x"}).status_code
            == 404
        )
        assert (
            client.post("/sessions/zzz/snapshot", json={"path": "/tmp/x"}).status_code
            == 404
        )
