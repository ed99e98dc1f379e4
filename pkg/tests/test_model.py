from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import random_window, randomize, tiny_model, tiny_stats
from sertkit.data import window_from_triplets
from sertkit.encoding import NormStats, Triplet, VariableVocabulary
from sertkit.errors import ConfigError
from sertkit.model import (
    BlockParams,
    Checkpoint,
    ModelConfig,
    PaddedWindow,
    attention_block,
    embed_batch,
    forward,
    init_params,
    make_batch,
    predict,
    sert_forward,
    sstann_forward,
)
from sertkit.tensor import ShapeError, Tensor


def _layernorm(row, g, b, eps=1e-5):
    n = len(row)
    mu = sum(row) / n
    var = sum((x - mu) ** 2 for x in row) / n
    return [(row[i] - mu) / math.sqrt(var + eps) * g[i] + b[i] for i in range(n)]


def _matvec(row, w):
    return [sum(row[i] * w[i][j] for i in range(len(row))) for j in range(len(w[0]))]


def sert_oracle(emb, mask, params, config) -> list[float]:
    """Scalar re-computation of one SERT forward pass (mode A, batch of one)."""
    P = {name: t.data.tolist() for name, t in params.items()}
    n, d = len(emb), config.d
    dh = d // config.n_heads
    x = [[emb[i][j] * (1.0 if mask[i] else 0.0) for j in range(d)] for i in range(n)]
    for b in range(config.k):
        p = f"block{b}."
        a = [_layernorm(r, P[p + "ln1.g"], P[p + "ln1.b"]) for r in x]
        q = [_matvec(r, P[p + "wq"]) for r in a]
        k = [_matvec(r, P[p + "wk"]) for r in a]
        v = [_matvec(r, P[p + "wv"]) for r in a]
        ctx = [[0.0] * d for _ in range(n)]
        for h in range(config.n_heads):
            cols = range(h * dh, (h + 1) * dh)
            for i in range(n):
                scores = [sum(q[i][c] * k[j][c] for c in cols) / math.sqrt(dh) for j in range(n)]
                top = max(s for s, m in zip(scores, mask) if m)
                w = [math.exp(s - top) if m else 0.0 for s, m in zip(scores, mask)]
                tot = sum(w)
                for c in cols:
                    ctx[i][c] = sum(w[j] / tot * v[j][c] for j in range(n))
        att_out = [_matvec(r, P[p + "wo"]) for r in ctx]
        x = [[x[i][j] + att_out[i][j] for j in range(d)] for i in range(n)]
        a2 = [_layernorm(r, P[p + "ln2.g"], P[p + "ln2.b"]) for r in x]
        hid = [[max(0.0, u + bb) for u, bb in zip(_matvec(r, P[p + "ffn.w1"]), P[p + "ffn.b1"])] for r in a2]
        ff = [[u + bb for u, bb in zip(_matvec(r, P[p + "ffn.w2"]), P[p + "ffn.b2"])] for r in hid]
        x = [[x[i][j] + ff[i][j] for j in range(d)] for i in range(n)]
    x = [[x[i][j] * (1.0 if mask[i] else 0.0) for j in range(d)] for i in range(n)]
    flat = [val for row in x for val in row] + [0.0] * ((config.n_max - n) * d)
    hidden = [max(0.0, u + bb) for u, bb in zip(_matvec(flat, P["head.w1"]), P["head.b1"])]
    return [u + bb for u, bb in zip(_matvec(hidden, P["head.w2"]), P["head.b2"])]


def _padded(rng, n, d, n_real, loc_d=None):
    emb = rng.normal(size=(1, n, d))
    mask = np.zeros((1, n), dtype=bool)
    mask[0, :n_real] = True
    emb[~mask] = 0.0
    loc = None if loc_d is None else Tensor(rng.normal(size=(1, loc_d)))
    return PaddedWindow(Tensor(emb), mask, loc)


class TestConfig:
    def test_heads_must_divide_d(self):
        with pytest.raises(ConfigError, match=r"d \(10\) must be divisible by n_heads \(3\)"):
            ModelConfig(d=10, n_heads=3).validate()

    @pytest.mark.parametrize("field,value", [("n_max", 0), ("n_targets", 0), ("location_mode", "C"), ("dropout", 1.0)])
    def test_invalid_fields(self, field, value):
        with pytest.raises(ConfigError):
            ModelConfig(**{field: value}).validate()

    def test_defaults(self):
        c = ModelConfig()
        assert (c.d, c.n_heads, c.k) == (60, 6, 6)


class TestSertForward:
    def test_zero_network_returns_head_bias(self, rng):
        config, vocab, params = tiny_model("sert")
        for _, p in params.items():
            p.data = np.zeros_like(p.data)
        params["head.b2"].data = np.array([0.25, -1.0, 3.0])
        for n_real in (1, 3, 5):
            out = sert_forward(_padded(rng, 5, 8, n_real), params, config).data
            np.testing.assert_array_equal(out, [[0.25, -1.0, 3.0]])

    def test_padding_region_is_ignored(self, rng):
        config, _, params = tiny_model("sert", seed=2)
        randomize(params, rng)
        win = _padded(rng, 5, 8, 2)
        noisy = win.embeddings.data.copy()
        noisy[0, 2:] = rng.normal(size=(3, 8)) * 100
        a = sert_forward(win, params, config).data
        b = sert_forward(PaddedWindow(Tensor(noisy), win.mask), params, config).data
        np.testing.assert_array_equal(a, b)

    def test_matches_manual_oracle(self, rng):
        config, _, params = tiny_model("sert", seed=4, d=4, n_heads=2, k=1, n_max=3, n_targets=2)
        randomize(params, rng)
        for n_real in (1, 2, 3):
            win = _padded(rng, 3, 4, n_real)
            got = sert_forward(win, params, config).data[0]
            want = sert_oracle(win.embeddings.data[0].tolist(), win.mask[0].tolist(), params, config)
            np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)

    def test_two_blocks_match_oracle(self, rng):
        config, _, params = tiny_model("sert", seed=5, d=6, n_heads=3, k=2, n_max=4, n_targets=2)
        randomize(params, rng)
        win = _padded(rng, 4, 6, 3)
        got = sert_forward(win, params, config).data[0]
        want = sert_oracle(win.embeddings.data[0].tolist(), win.mask[0].tolist(), params, config)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)

    def test_mode_b_uses_location(self, rng):
        config, vocab, params = tiny_model("sert", mode="B")
        win = _padded(rng, 5, 8, 3, loc_d=8)
        a = sert_forward(win, params, config).data
        other = PaddedWindow(win.embeddings, win.mask, Tensor(win.location.data + 1.0))
        assert not np.array_equal(a, sert_forward(other, params, config).data)
        assert params["head.w1"].shape == (5 * 8 + 8, 8)

    def test_shape_mismatch(self, rng):
        config, _, params = tiny_model("sert")
        with pytest.raises(ShapeError):
            sert_forward(_padded(rng, 5, 6, 2), params, config)
        with pytest.raises(ShapeError):
            sert_forward(_padded(rng, 6, 8, 2), params, config)

    def test_inference_is_bit_reproducible(self, rng):
        config, _, params = tiny_model("sert", seed=3)
        win = _padded(rng, 5, 8, 4)
        assert sert_forward(win, params, config).data.tobytes() == sert_forward(win, params, config).data.tobytes()

    def test_dropout_only_with_rng(self, rng):
        config, _, params = tiny_model("sert", seed=3, dropout=0.5)
        win = _padded(rng, 5, 8, 4)
        base = sert_forward(win, params, config).data
        dropped = sert_forward(win, params, config, rng=np.random.default_rng(0)).data
        assert not np.array_equal(base, dropped)


class TestSstannForward:
    def test_zero_weights_give_bias(self, rng):
        config, _, params = tiny_model("sstann", n_targets=2)
        params["sst.w"].data[:] = 0.0
        params["sst.b"].data = np.array([1.5, -2.0])
        pred, contrib, _ = sstann_forward(_padded(rng, 5, 8, 3), params, config)
        np.testing.assert_array_equal(pred.data, [[1.5, -2.0]])
        assert not contrib.data.any()

    def test_single_triplet_dot_product(self):
        config = ModelConfig(d=2, n_heads=1, k=0, n_max=1, n_targets=1, lookback=2).validate()
        params = init_params("sstann", config, VariableVocabulary(["a"]), np.random.default_rng(0))
        params["sst.w"].data = np.array([[[3.0], [4.0]]])
        params["sst.b"].data = np.array([0.0])
        win = PaddedWindow(Tensor([[[1.0, 2.0]]]), np.array([[True]]))
        pred, contrib, _ = sstann_forward(win, params, config)
        assert contrib.data[0, 0, 0] == 11.0
        assert pred.data[0, 0] == 11.0

    def test_decomposition_identity(self, rng):
        config, _, params = tiny_model("sstann", n_max=9, n_targets=3)
        randomize(params, rng)
        win = _padded(rng, 9, 8, 7)
        pred, contrib, intercept = sstann_forward(win, params, config)
        manual = np.einsum("nd,ndk->k", win.embeddings.data[0], params["sst.w"].data) + params["sst.b"].data
        np.testing.assert_allclose(pred.data[0], contrib.data[0].sum(axis=0) + params["sst.b"].data, atol=1e-12)
        np.testing.assert_allclose(pred.data[0], manual, atol=1e-12)
        assert not contrib.data[0, 7:].any()

    def test_per_position_weights(self, rng):
        config, _, params = tiny_model("sstann")
        assert params["sst.w"].shape == (5, 8, 3)
        assert "block0.wq" not in params

    def test_mode_b_intercept_includes_location(self, rng):
        config, _, params = tiny_model("sstann", mode="B")
        win = _padded(rng, 5, 8, 3, loc_d=8)
        pred, contrib, intercept = sstann_forward(win, params, config)
        want = params["sst.b"].data + win.location.data @ params["sst.w_loc"].data
        np.testing.assert_allclose(intercept.data, want, atol=1e-15)
        np.testing.assert_array_equal(pred.data, contrib.data.sum(axis=1) + intercept.data)


class TestAttentionBlock:
    def _block(self, rng, d=8):
        config, _, params = tiny_model("sert", d=d)
        randomize(params, rng)
        return BlockParams.from_store(params, 0), config

    def test_single_key_is_point_mass(self, rng):
        bp, config = self._block(rng)
        x = Tensor(rng.normal(size=(1, 4, 8)))
        mask = np.array([[False, True, False, False]])
        _, att = attention_block(x, mask, bp, config.n_heads, return_attention=True)
        np.testing.assert_array_equal(att[0, :, :, 1], np.ones((config.n_heads, 4)))

    def test_zero_projections_uniform(self, rng):
        bp, config = self._block(rng)
        bp.wq.data[:] = 0.0
        bp.wk.data[:] = 0.0
        mask = np.array([[True, True, False, True, False]])
        _, att = attention_block(Tensor(rng.normal(size=(1, 5, 8))), mask, bp, config.n_heads, return_attention=True)
        np.testing.assert_allclose(att[0][..., mask[0]], 1.0 / 3.0, atol=1e-15)
        assert not att[0][..., ~mask[0]].any()

    def test_rows_sum_to_one(self, rng):
        bp, config = self._block(rng)
        for _ in range(20):
            mask = rng.random((3, 5)) < 0.5
            mask[:, 0] = True
            _, att = attention_block(Tensor(rng.normal(size=(3, 5, 8))), mask, bp, config.n_heads, return_attention=True)
            np.testing.assert_allclose(att.sum(axis=-1), 1.0, atol=1e-12)

    def test_empty_mask_rejected(self, rng):
        bp, config = self._block(rng)
        with pytest.raises(ValueError):
            attention_block(Tensor(rng.normal(size=(1, 3, 8))), np.zeros((1, 3), dtype=bool), bp, config.n_heads)

    def test_gradients_match_finite_differences(self, rng):
        config, _, params = tiny_model("sert", d=4, n_heads=2)
        randomize(params, rng, scale=0.3)
        bp = BlockParams.from_store(params, 0)
        x = rng.normal(size=(2, 3, 4))
        mask = np.array([[True, True, False], [True, True, True]])
        weights = rng.normal(size=(2, 3, 4))

        def loss():
            return (attention_block(Tensor(x), mask, bp, 2) * weights).sum()

        params.zero_grads()
        loss().backward()
        worst = 0.0
        for name, p in params.items():
            if not name.startswith("block0."):
                continue
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + 1e-3
                up = loss().item()
                flat[i] = orig - 1e-3
                down = loss().item()
                flat[i] = orig
                num = (up - down) / 2e-3
                ana = p.grad.reshape(-1)[i]
                worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-7))
        assert worst < 1e-4


class TestPipelineLevel:
    def test_canonical_order_makes_input_order_irrelevant(self, rng):
        config, vocab, params = tiny_model("sert", seed=1, n_max=6)
        stats = tiny_stats(3, 4, rng)
        triplets = [Triplet(float(t), int(f), float(rng.normal())) for t, f in [(0, 2), (1, 0), (1, 1), (3, 2), (2, 0)]]
        base = window_from_triplets(triplets, [1.0, 2.0, 3.0], [True] * 3, anchor=4, n_max=6)
        for _ in range(10):
            perm = [triplets[i] for i in rng.permutation(len(triplets))]
            w = window_from_triplets(perm, [1.0, 2.0, 3.0], [True] * 3, anchor=4, n_max=6)
            for kind in ("sert",):
                a = forward(kind, make_batch([base], stats, config), params, config).data
                b = forward(kind, make_batch([w], stats, config), params, config).data
                assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("kind", ["sert", "sstann"])
    def test_trimmed_batch_equals_full_padding(self, kind, rng):
        config, vocab, params = tiny_model(kind, seed=6, n_max=12)
        randomize(params, rng, scale=0.3)
        stats = tiny_stats(3, 4, rng)
        windows = [random_window(rng, 3, 4, 7) for _ in range(6)]
        trimmed = forward(kind, make_batch(windows, stats, config, trim=True), params, config).data
        full = forward(kind, make_batch(windows, stats, config, trim=False), params, config).data
        np.testing.assert_allclose(trimmed, full, rtol=0, atol=1e-12)

    def test_batch_independent_of_neighbours(self, rng):
        config, vocab, params = tiny_model("sert", seed=6, n_max=12)
        stats = tiny_stats(3, 4, rng)
        windows = [random_window(rng, 3, 4, 12) for _ in range(5)]
        together = predict("sert", windows, params, config, stats)
        alone = np.vstack([predict("sert", [w], params, config, stats) for w in windows])
        np.testing.assert_allclose(together, alone, rtol=0, atol=1e-12)

    def test_targets_normalized_and_predictions_denormalized(self, rng):
        config, vocab, params = tiny_model("sstann", n_targets=3)
        stats = NormStats(np.array([10.0, -5.0, 0.0]), np.array([2.0, 4.0, 1.0]), 4)
        w = random_window(rng, 3, 4, 5, target_p=1.0)
        batch = make_batch([w], stats, config)
        np.testing.assert_allclose(batch.targets[0], (w.targets - stats.mean) / stats.std)
        raw = forward("sstann", batch, params, config).data[0]
        np.testing.assert_allclose(predict("sstann", [w], params, config, stats)[0], raw * stats.std + stats.mean)


class TestCheckpoint:
    @pytest.mark.parametrize("kind,mode", [("sert", "A"), ("sstann", "B")])
    def test_round_trip_predictions_identical(self, kind, mode, tmp_path, rng):
        config, vocab, params = tiny_model(kind, seed=9, mode=mode)
        stats = tiny_stats(3, 4, rng)
        ck = Checkpoint(kind, config, vocab, stats, params, {"note": "x"})
        ck.save(tmp_path / "c.json")
        back = Checkpoint.load(tmp_path / "c.json")
        windows = [random_window(rng, 3, 4, 5, n_locations=2 if mode == "B" else None) for _ in range(4)]
        a = predict(kind, windows, params, config, stats)
        b = predict(kind, windows, back.params, back.config, back.stats)
        assert a.tobytes() == b.tobytes()
        assert back.meta == {"note": "x"}
        assert back.vocab.to_dict() == vocab.to_dict()

    def test_serialization_is_deterministic(self, tmp_path):
        config, vocab, params = tiny_model("sstann", seed=2)
        ck = Checkpoint("sstann", config, vocab, tiny_stats(3, 4), params)
        assert ck.to_json() == Checkpoint.from_json(ck.to_json()).to_json()

    def test_shape_mismatch_rejected(self):
        config, vocab, params = tiny_model("sstann", seed=2)
        text = Checkpoint("sstann", config, vocab, tiny_stats(3, 4), params).to_json()
        bad = text.replace('"n_max": 5', '"n_max": 6')
        with pytest.raises(Exception):
            Checkpoint.from_json(bad)

    def test_vocab_mode_mismatch(self):
        config = ModelConfig(d=4, n_heads=1, k=0, n_max=2, n_targets=2, lookback=2, location_mode="B")
        with pytest.raises(ConfigError):
            init_params("sstann", config, VariableVocabulary(["a", "b"]), np.random.default_rng(0))

    def test_embed_batch_location_lookup(self, rng):
        config, vocab, params = tiny_model("sstann", mode="B")
        w = random_window(rng, 3, 4, 5, n_locations=2)
        win = embed_batch(make_batch([w], tiny_stats(3, 4), config), params, config)
        np.testing.assert_array_equal(win.location.data[0], params["loc_table"].data[w.location])
