"""Model: oracle comparisons, dual-path routing, grouped heads, config."""

import numpy as np
import pytest

from beaconlm import numerics as nm
from beaconlm.errors import ConfigError, DataError, StateError
from beaconlm.model import BeaconModel, ModelConfig
from beaconlm.numerics import Tape, Tensor, backward

from oracles import attention_with_cache_oracle, vanilla_logits


def tiny_config(**kw):
    d = dict(
        num_layers=2,
        hidden_size=16,
        query_heads=4,
        kv_heads=2,
        head_dim=4,
        intermediate_size=24,
        vocab_size=32,
        chunk_size=8,
        ratio_set=(2, 4),
    )
    d.update(kw)
    return ModelConfig(**d)


def np_weights(model):
    return {k: t.data.astype(np.float64) for k, t in model.base.named().items()}


# ---------------------------------------------------------------------------
# vanilla reduction


def test_vanilla_forward_matches_oracle():
    cfg = tiny_config()
    model = BeaconModel.new(cfg, seed=1)
    rng = np.random.default_rng(2)
    tokens = rng.integers(0, cfg.vocab_size, size=11)
    h, _ = model.forward_chunk(tokens, None, 0)
    got = model.lm_logits(h).data
    want = vanilla_logits(cfg.to_dict(), np_weights(model), list(tokens))
    assert np.max(np.abs(got - want)) < 1e-5


def test_vanilla_forward_random_configs():
    rng = np.random.default_rng(0)
    for trial in range(5):
        hk = int(rng.choice([1, 2]))
        hq = hk * int(rng.choice([1, 2]))
        d = int(rng.choice([2, 4]))
        cfg = ModelConfig(
            num_layers=int(rng.integers(1, 3)),
            hidden_size=hq * d,
            query_heads=hq,
            kv_heads=hk,
            head_dim=d,
            intermediate_size=int(rng.integers(4, 12)),
            vocab_size=int(rng.integers(8, 40)),
            chunk_size=4,
            ratio_set=(2,),
        )
        model = BeaconModel.new(cfg, seed=trial)
        tokens = rng.integers(0, cfg.vocab_size, size=int(rng.integers(1, 9)))
        h, _ = model.forward_chunk(tokens, None, 0)
        got = model.lm_logits(h).data
        want = vanilla_logits(cfg.to_dict(), np_weights(model), list(tokens))
        assert np.max(np.abs(got - want)) < 1e-5, f"trial {trial}"


# ---------------------------------------------------------------------------
# attention against the brute-force oracle


def test_attend_with_cache_matches_bruteforce():
    cfg = tiny_config()
    model = BeaconModel.new(cfg, seed=3)
    rng = np.random.default_rng(4)
    t, m = 5, 7
    q = Tensor(rng.normal(size=(t, 4, 4)).astype(np.float32))
    k = Tensor(rng.normal(size=(t, 2, 4)).astype(np.float32))
    v = Tensor(rng.normal(size=(t, 2, 4)).astype(np.float32))
    ck = Tensor(rng.normal(size=(m, 2, 4)).astype(np.float32))
    cv = Tensor(rng.normal(size=(m, 2, 4)).astype(np.float32))
    qpos = np.arange(m, m + t)
    kpos = np.arange(m + t)
    got = model.attend_with_cache(q, k, v, ck, cv, qpos, kpos).data
    want = attention_with_cache_oracle(
        q.data, k.data, v.data, ck.data, cv.data, qpos, kpos, cfg.rope_base
    )
    assert np.max(np.abs(got - want)) < 1e-5


def test_attend_no_cache_matches_bruteforce():
    cfg = tiny_config(query_heads=2, kv_heads=1, hidden_size=8, head_dim=4)
    model = BeaconModel.new(cfg, seed=5)
    rng = np.random.default_rng(6)
    t = 6
    q = Tensor(rng.normal(size=(t, 2, 4)).astype(np.float32))
    k = Tensor(rng.normal(size=(t, 1, 4)).astype(np.float32))
    v = Tensor(rng.normal(size=(t, 1, 4)).astype(np.float32))
    pos = np.arange(t)
    got = model.attend_with_cache(q, k, v, None, None, pos, pos).data
    want = attention_with_cache_oracle(
        q.data,
        k.data,
        v.data,
        np.zeros((0, 1, 4)),
        np.zeros((0, 1, 4)),
        pos,
        pos,
        cfg.rope_base,
    )
    assert np.max(np.abs(got - want)) < 1e-5


def test_attend_cache_length_mismatch():
    cfg = tiny_config()
    model = BeaconModel.new(cfg, seed=0)
    rng = np.random.default_rng(0)
    q = Tensor(rng.normal(size=(2, 4, 4)).astype(np.float32))
    k = Tensor(rng.normal(size=(2, 2, 4)).astype(np.float32))
    v = Tensor(rng.normal(size=(2, 2, 4)).astype(np.float32))
    ck = Tensor(rng.normal(size=(3, 2, 4)).astype(np.float32))
    with pytest.raises(StateError):
        model.attend_with_cache(
            q, k, v, ck, ck, np.arange(3, 5), np.arange(4)
        )


def test_gqa_head_grouping():
    # zero the values of kv head 1: query heads in its group see zero context
    cfg = tiny_config()
    model = BeaconModel.new(cfg, seed=7)
    rng = np.random.default_rng(8)
    t = 4
    q = Tensor(rng.normal(size=(t, 4, 4)).astype(np.float32))
    k = Tensor(rng.normal(size=(t, 2, 4)).astype(np.float32))
    vdata = rng.normal(size=(t, 2, 4)).astype(np.float32)
    vdata[:, 1, :] = 0.0
    v = Tensor(vdata)
    pos = np.arange(t)
    out = model.attend_with_cache(q, k, v, None, None, pos, pos).data
    out = out.reshape(t, 4, 4)
    assert np.abs(out[:, 2:, :]).max() == 0.0
    assert np.abs(out[:, :2, :]).max() > 0.0


# ---------------------------------------------------------------------------
# dual projection path


def test_embed_routes_by_kind():
    cfg = tiny_config()
    model = BeaconModel.new(cfg, seed=9)
    b = cfg.beacon_token_id
    ids = np.array([3, b, 5, b])
    e = model.embed(ids).data
    np.testing.assert_array_equal(e[0], model.base.embed.data[3])
    np.testing.assert_array_equal(e[2], model.base.embed.data[5])
    np.testing.assert_array_equal(e[1], model.beacon.embed.data)
    np.testing.assert_array_equal(e[3], model.beacon.embed.data)


def test_embed_rejects_out_of_range():
    model = BeaconModel.new(tiny_config(), seed=0)
    with pytest.raises(DataError):
        model.embed(np.array([0, 33]))  # vocab 32, sentinel 32 is max


def test_beacon_init_copies_raw_weights():
    model = BeaconModel.new(tiny_config(), seed=10)
    for lb, lc in zip(model.base.layers, model.beacon.layers):
        np.testing.assert_array_equal(lb.wq.data, lc.wq.data)
        np.testing.assert_array_equal(lb.wk.data, lc.wk.data)
        np.testing.assert_array_equal(lb.wv.data, lc.wv.data)
        assert lb.wq.data is not lc.wq.data
    np.testing.assert_allclose(
        model.beacon.embed.data, model.base.embed.data.mean(axis=0), atol=1e-7
    )


def test_dual_projection_equals_single_path_when_weights_tied():
    # at init beacon weights equal raw weights, so routing must not change
    # the projection of any row given the same hidden input
    cfg = tiny_config()
    model = BeaconModel.new(cfg, seed=11)
    rng = np.random.default_rng(12)
    h = Tensor(rng.normal(size=(6, cfg.hidden_size)).astype(np.float32))
    kinds = np.array([False, True, False, False, True, False])
    q, k, v = model.project_qkv_dual(h, kinds, 0)
    q1, k1, v1 = model.project_qkv_dual(h, np.zeros(6, dtype=bool), 0)
    np.testing.assert_allclose(q.data, q1.data, atol=1e-7)
    np.testing.assert_allclose(k.data, k1.data, atol=1e-7)
    np.testing.assert_allclose(v.data, v1.data, atol=1e-7)


def test_dual_projection_routes_by_kind():
    cfg = tiny_config()
    model = BeaconModel.new(cfg, seed=13)
    model.beacon.layers[0].wk.data[:] = 0.0
    rng = np.random.default_rng(14)
    h = Tensor(rng.normal(size=(4, cfg.hidden_size)).astype(np.float32))
    kinds = np.array([False, True, False, True])
    _, k, _ = model.project_qkv_dual(h, kinds, 0)
    assert np.abs(k.data[1]).max() == 0.0 and np.abs(k.data[3]).max() == 0.0
    assert np.abs(k.data[0]).max() > 0.0 and np.abs(k.data[2]).max() > 0.0


def test_gradient_isolation_between_paths():
    # a loss built only from raw rows must not touch beacon projections,
    # and vice versa
    cfg = tiny_config()
    model = BeaconModel.new(cfg, seed=15)
    rng = np.random.default_rng(16)
    h = Tensor(rng.normal(size=(5, cfg.hidden_size)).astype(np.float32))
    kinds = np.array([False, True, False, True, False])
    wr = model.base.layers[0].wq
    wb = model.beacon.layers[0].wq
    wr.requires_grad = True
    wb.requires_grad = True

    def run(select_beacons):
        wr.zero_grad()
        wb.zero_grad()
        with Tape() as tape:
            q, _, _ = model.project_qkv_dual(h, kinds, 0)
            rows = np.flatnonzero(kinds if select_beacons else ~kinds)
            picked = nm.gather_rows(nm.reshape(q, (5, -1)), rows)
            loss = nm.sum_(nm.mul(picked, picked))
        backward(tape, loss)
        return np.abs(wr.grad).max(), np.abs(wb.grad).max()

    raw_wr, raw_wb = run(select_beacons=False)
    assert raw_wr > 0.0 and raw_wb == 0.0
    b_wr, b_wb = run(select_beacons=True)
    assert b_wr == 0.0 and b_wb > 0.0
    wr.requires_grad = False
    wb.requires_grad = False


def test_forward_chunk_counts_encodes_and_validates_cache():
    cfg = tiny_config()
    model = BeaconModel.new(cfg, seed=17)
    assert model.encode_count == 0
    h, kv = model.forward_chunk(np.array([1, 2, 3]), None, 0)
    assert model.encode_count == 1
    assert len(kv) == cfg.num_layers
    assert kv[0][0].data.shape == (3, cfg.kv_heads, cfg.head_dim)
    bad_cache = [
        (Tensor(np.zeros((2, 2, 4), dtype=np.float32)),) * 2
        for _ in range(cfg.num_layers)
    ]
    with pytest.raises(StateError):
        model.forward_chunk(np.array([1]), bad_cache, cache_rows=5)


# ---------------------------------------------------------------------------
# config


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_config(hidden_size=15)  # not query_heads * head_dim
    with pytest.raises(ConfigError):
        tiny_config(query_heads=3, kv_heads=2, hidden_size=12)
    with pytest.raises(ConfigError):
        tiny_config(ratio_set=(3,))  # does not divide chunk_size 8
    with pytest.raises(ConfigError):
        tiny_config(ratio_set=())
    with pytest.raises(ConfigError):
        tiny_config(head_dim=3, hidden_size=12)


def test_config_hash_stable_and_sensitive():
    a = tiny_config()
    b = tiny_config()
    c = tiny_config(chunk_size=16, ratio_set=(2, 4, 8, 16))
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()


def test_config_roundtrip():
    cfg = tiny_config()
    again = ModelConfig.from_dict(cfg.to_dict())
    assert again == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"bogus": 1})
