from __future__ import annotations

import numpy as np
import pytest

from contrastforge.causal import (CausalParams, attention_forward, causal_effect,
                                  causal_forward, causal_forward_batch,
                                  init_causal_params, item_causal_vectors,
                                  load_causal_checkpoint, project,
                                  project_forward, save_causal_checkpoint,
                                  self_attention)
from contrastforge.errors import InvalidArgumentError


def _params(d_enc=6, hidden=5, out_dim=4, seed=11):
    return init_causal_params(d_enc, hidden, out_dim, seed)


class TestParams:
    def test_init_shapes_and_zero_biases(self):
        p = _params(6, 5, 4)
        assert p.d_enc == 6 and p.hidden == 5 and p.out_dim == 4
        assert p.w_1.shape == (6, 5)
        assert p.w_2.shape == (5, 4)
        np.testing.assert_array_equal(p.b_1, np.zeros(5))
        np.testing.assert_array_equal(p.b_2, np.zeros(4))

    def test_init_deterministic(self):
        a, b = _params(seed=3), _params(seed=3)
        for name in a.to_dict():
            np.testing.assert_array_equal(a.to_dict()[name], b.to_dict()[name])

    def test_validate_catches_wrong_shape(self):
        p = _params()
        p.b_1 = np.zeros(7)
        with pytest.raises(InvalidArgumentError, match="b_1"):
            p.validate()

    def test_dict_roundtrip_and_copy_isolation(self):
        p = _params()
        q = CausalParams.from_dict(p.to_dict())
        assert q.w_q is p.w_q
        r = p.copy()
        r.w_q[0, 0] += 1.0
        assert r.w_q[0, 0] != p.w_q[0, 0]


class TestAttention:
    def test_single_token_reduces_to_value_projection(self, rng):
        p = _params()
        x = rng.normal(size=(1, 6))
        pooled, per_token = self_attention(x, p)
        np.testing.assert_allclose(pooled, (x @ p.w_v.T)[0], atol=1e-12)
        np.testing.assert_allclose(per_token, x @ p.w_v.T, atol=1e-12)

    def test_identical_tokens_pool_to_the_same_value(self, rng):
        p = _params()
        row = rng.normal(size=6)
        pooled, _ = self_attention(np.stack([row, row, row]), p)
        np.testing.assert_allclose(pooled, row @ p.w_v.T, atol=1e-12)

    def test_attention_rows_are_distributions(self, rng):
        p = _params()
        cache = attention_forward(rng.normal(size=(3, 4, 6)), p)
        np.testing.assert_allclose(cache["attn"].sum(axis=-1),
                                   np.ones((3, 4)), rtol=1e-12)
        assert np.all(cache["attn"] > 0)

    def test_mean_pooling_is_permutation_invariant(self, rng):
        p = _params()
        tokens = rng.normal(size=(4, 6))
        pooled, _ = self_attention(tokens, p)
        shuffled, _ = self_attention(tokens[[2, 0, 3, 1]], p)
        np.testing.assert_allclose(pooled, shuffled, atol=1e-12)

    def test_single_item_matches_batch_of_one(self, rng):
        p = _params()
        tokens = rng.normal(size=(4, 6))
        single = attention_forward(tokens, p)
        batched = attention_forward(tokens[None], p)
        np.testing.assert_array_equal(single["pooled"], batched["pooled"])

    def test_unknown_pooling_rejected(self, rng):
        with pytest.raises(InvalidArgumentError, match="median"):
            attention_forward(rng.normal(size=(2, 6)), _params(), pooling="median")


class TestCausalEffect:
    def test_hand_value(self):
        np.testing.assert_array_equal(
            causal_effect(np.array([1.0, 2.0]), np.array([0.5, 2.0])),
            np.array([0.5, 0.0]))

    def test_antisymmetric(self, rng):
        a, b = rng.normal(size=(2, 5))
        np.testing.assert_array_equal(causal_effect(a, b), -causal_effect(b, a))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InvalidArgumentError):
            causal_effect(np.zeros(3), np.zeros(4))


class TestProject:
    def test_zero_input_passes_through_output_bias(self, rng):
        p = _params()
        p.b_2 = rng.normal(size=4)
        np.testing.assert_array_equal(project(np.zeros(6), p), p.b_2)

    def test_relu_gates_the_hidden_layer(self):
        p = _params(d_enc=2, hidden=2, out_dim=1, seed=0)
        p.w_1 = np.array([[1.0, -1.0], [0.0, 0.0]])
        p.b_1 = np.zeros(2)
        p.w_2 = np.array([[1.0], [1.0]])
        p.b_2 = np.zeros(1)
        # positive input activates only the first hidden unit
        assert project(np.array([3.0, 0.0]), p)[0] == pytest.approx(3.0)
        assert project(np.array([-3.0, 0.0]), p)[0] == pytest.approx(3.0)

    def test_batch_and_single_agree(self, rng):
        p = _params()
        x = rng.normal(size=(7, 6))
        batch = project(x, p)
        for row in range(7):
            np.testing.assert_allclose(project(x[row], p), batch[row], atol=1e-13)


def _reference_forward(pos, neg, p):
    """Independent recomputation of the causal embedding with explicit loops."""
    def softmax(v):
        e = np.exp(v - v.max())
        return e / e.sum()

    def pool(tokens):
        f = tokens.shape[0]
        q = tokens @ p.w_q.T
        k = tokens @ p.w_k.T
        v = tokens @ p.w_v.T
        outs = []
        for row in range(f):
            weights = softmax(q[row] @ k.T / np.sqrt(p.d_enc))
            outs.append(weights @ v)
        return np.mean(outs, axis=0)

    def mlp(x):
        return np.maximum(x @ p.w_1 + p.b_1, 0.0) @ p.w_2 + p.b_2

    e_t = pool(pos) - pool(neg)
    return e_t, mlp(e_t), mlp(pool(neg))


class TestCausalForward:
    def test_matches_independent_reference(self, rng):
        p = init_causal_params(16, 16, 8, seed=29)
        pos = rng.normal(size=(4, 16))
        neg = rng.normal(size=(4, 16))
        emb = causal_forward(pos, neg, p)
        ref_et, ref_ec, ref_ecn = _reference_forward(pos, neg, p)
        np.testing.assert_allclose(emb.e_t, ref_et, atol=1e-12)
        np.testing.assert_allclose(emb.e_c, ref_ec, atol=1e-12)
        np.testing.assert_allclose(emb.e_c_neg, ref_ecn, atol=1e-12)

    def test_identical_tokens_give_zero_effect(self, rng):
        p = _params()
        tokens = rng.normal(size=(4, 6))
        emb = causal_forward(tokens, tokens.copy(), p)
        np.testing.assert_array_equal(emb.e_t, np.zeros(6))
        np.testing.assert_array_equal(emb.e_c, project(np.zeros(6), p))

    def test_swapping_sides_negates_the_effect(self, rng):
        p = _params()
        pos, neg = rng.normal(size=(2, 4, 6))
        forward = causal_forward(pos, neg, p)
        backward = causal_forward(neg, pos, p)
        np.testing.assert_array_equal(backward.e_t, -forward.e_t)

    def test_batch_agrees_with_per_item_calls(self, rng):
        p = _params()
        pos = rng.normal(size=(5, 4, 6))
        neg = rng.normal(size=(5, 4, 6))
        cache = causal_forward_batch(pos, neg, p)
        for b in range(5):
            item = causal_forward(pos[b], neg[b], p)
            np.testing.assert_allclose(cache["e_c"][b], item.e_c, atol=1e-13)
            np.testing.assert_allclose(cache["e_c_neg"][b], item.e_c_neg, atol=1e-13)

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(InvalidArgumentError):
            causal_forward(rng.normal(size=(4, 6)), rng.normal(size=(3, 6)), _params())


def test_item_causal_vectors_project_pooled_positives(rng):
    p = _params()
    pos = rng.normal(size=(7, 4, 6))
    vectors = item_causal_vectors(pos, p)
    assert vectors.shape == (7, 4)
    for b in range(7):
        pooled, _ = self_attention(pos[b], p)
        np.testing.assert_allclose(vectors[b], project(pooled, p), atol=1e-13)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        p = _params(d_enc=8, hidden=6, out_dim=4, seed=5)
        save_causal_checkpoint(p, tmp_path / "ckpt", meta={"seed": 5})
        loaded, meta = load_causal_checkpoint(tmp_path / "ckpt")
        assert meta["d_enc"] == 8 and meta["h"] == 6 and meta["d"] == 4
        assert meta["seed"] == 5
        for name, arr in p.to_dict().items():
            np.testing.assert_array_equal(loaded.to_dict()[name],
                                          arr.astype(np.float32))

    def test_bias_vectors_come_back_one_dimensional(self, tmp_path):
        p = _params()
        save_causal_checkpoint(p, tmp_path / "ckpt")
        loaded, _ = load_causal_checkpoint(tmp_path / "ckpt")
        assert loaded.b_1.ndim == 1
        assert loaded.b_2.ndim == 1
