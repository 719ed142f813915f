from __future__ import annotations

import numpy as np
import pytest

from contrastforge.dataio import split_80_10_10
from contrastforge.errors import GraphError, InvalidArgumentError
from contrastforge.evaluation import topk_metrics_from_scores
from contrastforge.graph import (BaseTrainConfig, EarlyStopper, EmbeddingTable,
                                 batch_bpr_grads, bpr_base_loss,
                                 build_normalized_adjacency,
                                 load_base_checkpoint, propagate,
                                 save_base_checkpoint, train_base)

from _helpers import (dense_averaged_propagation, direct_dataset,
                      random_bipartite_dataset, two_block_dataset)


class TestNormalizedAdjacency:
    def test_single_pair_coefficient_is_one(self):
        ds = direct_dataset(1, 1, [(0, 0)])
        adj = build_normalized_adjacency(ds)
        dense = adj.matrix.toarray()
        assert dense[0, 1] == pytest.approx(1.0)
        assert dense[1, 0] == pytest.approx(1.0)

    def test_degree_two_user_scales_by_inverse_sqrt(self):
        ds = direct_dataset(1, 2, [(0, 0), (0, 1)])
        dense = build_normalized_adjacency(ds).matrix.toarray()
        np.testing.assert_allclose(dense[0, 1:], 1.0 / np.sqrt(2.0), rtol=1e-15)

    def test_matches_dense_normalization(self):
        ds = random_bipartite_dataset(9, 7, seed=21)
        adj = build_normalized_adjacency(ds)
        n_users = ds.num_users
        n = n_users + ds.num_items
        a = np.zeros((n, n))
        for u, i in ds.train:
            a[u, n_users + i] = 1.0
            a[n_users + i, u] = 1.0
        inv_sqrt = np.diag(1.0 / np.sqrt(a.sum(axis=1)))
        np.testing.assert_allclose(adj.matrix.toarray(), inv_sqrt @ a @ inv_sqrt,
                                   atol=1e-12)

    def test_symmetry(self):
        ds = random_bipartite_dataset(12, 10, seed=5)
        m = build_normalized_adjacency(ds).matrix
        assert (m != m.T).nnz == 0

    def test_isolated_item_named_in_error(self):
        ds = direct_dataset(2, 3, [(0, 0), (0, 1), (1, 0), (1, 1)])
        with pytest.raises(GraphError, match="i2"):
            build_normalized_adjacency(ds)

    def test_isolated_user_named_in_error(self):
        ds = direct_dataset(3, 2, [(0, 0), (0, 1), (1, 0), (1, 1)])
        with pytest.raises(GraphError, match="u2"):
            build_normalized_adjacency(ds)


class TestPropagate:
    def test_zero_layers_returns_input(self, rng):
        ds = random_bipartite_dataset(6, 5, seed=3)
        adj = build_normalized_adjacency(ds)
        table = EmbeddingTable(rng.normal(size=(6, 4)), rng.normal(size=(5, 4)))
        out = propagate(adj, table, 0)
        np.testing.assert_array_equal(out.user, table.user)
        np.testing.assert_array_equal(out.item, table.item)

    def test_single_edge_one_layer_averages_endpoints(self):
        ds = direct_dataset(1, 1, [(0, 0)])
        adj = build_normalized_adjacency(ds)
        x = np.array([[2.0, 4.0]])
        y = np.array([[6.0, 0.0]])
        out = propagate(adj, EmbeddingTable(x, y), 1)
        np.testing.assert_allclose(out.user, (x + y) / 2.0, rtol=1e-15)
        np.testing.assert_allclose(out.item, (x + y) / 2.0, rtol=1e-15)

    @pytest.mark.parametrize("num_layers", [0, 1, 2, 3])
    def test_matches_dense_oracle(self, num_layers, rng):
        ds = random_bipartite_dataset(11, 9, seed=17)
        adj = build_normalized_adjacency(ds)
        user0 = rng.normal(size=(11, 6))
        item0 = rng.normal(size=(9, 6))
        out = propagate(adj, EmbeddingTable(user0, item0), num_layers)
        ref_user, ref_item = dense_averaged_propagation(ds, user0, item0, num_layers)
        np.testing.assert_allclose(out.user, ref_user, atol=1e-10)
        np.testing.assert_allclose(out.item, ref_item, atol=1e-10)

    def test_linear_in_the_embeddings(self, rng):
        ds = random_bipartite_dataset(8, 6, seed=2)
        adj = build_normalized_adjacency(ds)
        xu, xi = rng.normal(size=(8, 3)), rng.normal(size=(6, 3))
        yu, yi = rng.normal(size=(8, 3)), rng.normal(size=(6, 3))
        combo = propagate(adj, EmbeddingTable(2.0 * xu + 3.0 * yu, 2.0 * xi + 3.0 * yi), 2)
        px = propagate(adj, EmbeddingTable(xu, xi), 2)
        py = propagate(adj, EmbeddingTable(yu, yi), 2)
        np.testing.assert_allclose(combo.user, 2.0 * px.user + 3.0 * py.user, atol=1e-10)
        np.testing.assert_allclose(combo.item, 2.0 * px.item + 3.0 * py.item, atol=1e-10)


class TestBprLoss:
    def test_zero_margin_gives_log_two_and_no_user_pull(self):
        v = np.array([1.0, -2.0, 0.5])
        loss, (g_user, g_pos, g_neg) = bpr_base_loss(v, v.copy(), v.copy())
        assert loss == pytest.approx(np.log(2.0), rel=1e-12)
        np.testing.assert_array_equal(g_user, np.zeros(3))
        np.testing.assert_allclose(g_pos, -0.5 * v, rtol=1e-12)
        np.testing.assert_allclose(g_neg, 0.5 * v, rtol=1e-12)

    def test_large_margin_loss_nearly_zero(self):
        u = np.array([1.0, 0.0])
        pos = np.array([10.0, 0.0])
        neg = np.zeros(2)
        loss, _ = bpr_base_loss(u, pos, neg)
        assert loss == pytest.approx(np.log1p(np.exp(-10.0)), rel=1e-10)

    def test_gradients_match_finite_differences(self, rng):
        u, pos, neg = rng.normal(size=(3, 5))
        _, grads = bpr_base_loss(u, pos, neg)
        h = 1e-6
        for which, vec in enumerate((u, pos, neg)):
            for j in range(5):
                bumped = [u.copy(), pos.copy(), neg.copy()]
                bumped[which][j] += h
                up, _ = bpr_base_loss(*bumped)
                bumped[which][j] -= 2 * h
                down, _ = bpr_base_loss(*bumped)
                numeric = (up - down) / (2 * h)
                assert numeric == pytest.approx(grads[which][j], abs=1e-6)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InvalidArgumentError):
            bpr_base_loss(np.zeros(3), np.zeros(3), np.zeros(4))


def test_batch_bpr_matches_per_pair_loop(rng):
    num_users, num_items, dim = 7, 9, 4
    user_mat = rng.normal(size=(num_users, dim))
    item_mat = rng.normal(size=(num_items, dim))
    users = rng.integers(num_users, size=12)
    items = rng.integers(num_items, size=12)
    negs = rng.integers(num_items, size=12)

    loss, g_user, g_item = batch_bpr_grads(user_mat, item_mat, users, items, negs)

    ref_loss = 0.0
    ref_gu = np.zeros_like(user_mat)
    ref_gi = np.zeros_like(item_mat)
    for u, i, j in zip(users, items, negs):
        l, (du, dp, dn) = bpr_base_loss(user_mat[u], item_mat[i], item_mat[j])
        ref_loss += l / 12
        ref_gu[u] += du / 12
        ref_gi[i] += dp / 12
        ref_gi[j] += dn / 12
    assert loss == pytest.approx(ref_loss, rel=1e-12)
    np.testing.assert_allclose(g_user, ref_gu, atol=1e-12)
    np.testing.assert_allclose(g_item, ref_gi, atol=1e-12)


class TestEarlyStopper:
    def test_stops_after_exactly_patience_flat_epochs(self):
        stopper = EarlyStopper(patience=3)
        assert stopper.update(0, 1.0) is False
        assert stopper.update(1, 2.0) is False
        assert stopper.update(2, 2.0) is False
        assert stopper.update(3, 2.0) is False
        assert stopper.update(4, 2.0) is True
        assert stopper.best_epoch == 1
        assert stopper.best_value == 2.0

    def test_improvement_resets_the_counter(self):
        stopper = EarlyStopper(patience=2)
        stopper.update(0, 1.0)
        stopper.update(1, 0.5)
        assert stopper.update(2, 3.0) is False
        assert stopper.improved
        assert stopper.update(3, 3.0) is False
        assert stopper.update(4, 3.0) is True

    def test_equal_value_is_not_improvement(self):
        stopper = EarlyStopper(patience=1)
        stopper.update(0, 1.0)
        assert stopper.update(1, 1.0) is True
        assert not stopper.improved

    def test_patience_below_one_rejected(self):
        with pytest.raises(InvalidArgumentError):
            EarlyStopper(0)


def _popularity_recall(ds, k=10):
    counts = np.zeros(ds.num_items)
    for _, i in ds.train:
        counts[i] += 1
    scores = np.tile(counts, (ds.num_users, 1))
    report = topk_metrics_from_scores(scores, ds.train_positives(),
                                      ds.split_positives("val"), [k])
    return report.recall[k]


class TestTrainBase:
    def test_learns_block_structure_beyond_popularity(self):
        ds = two_block_dataset(users_per_block=100, items_per_block=50, seed=13)
        config = BaseTrainConfig(dim=16, num_layers=2, lr=0.05, batch_size=512,
                                 max_epochs=15, patience=15, seed=13,
                                 stop_metric_k=10)
        result = train_base(ds, config)
        final = result.epochs[-1]
        assert final["mean_loss"] < result.epochs[0]["mean_loss"]
        best_recall = max(e["val_recall"] for e in result.epochs)
        assert best_recall > 2.0 * _popularity_recall(ds, k=10)

    def test_zero_lr_keeps_initialization(self):
        ds = two_block_dataset(users_per_block=10, items_per_block=8,
                               train_per_user=4, seed=3)
        config = BaseTrainConfig(dim=8, lr=0.0, max_epochs=2, patience=5, seed=1)
        result = train_base(ds, config)
        fresh = train_base(ds, BaseTrainConfig(dim=8, lr=0.0, max_epochs=1,
                                               patience=5, seed=1))
        np.testing.assert_array_equal(result.model.layer_zero.user,
                                      fresh.model.layer_zero.user)
        np.testing.assert_array_equal(result.model.layer_zero.item,
                                      fresh.model.layer_zero.item)

    def test_deterministic_given_seed(self):
        ds = two_block_dataset(users_per_block=10, items_per_block=8,
                               train_per_user=4, seed=3)
        config = BaseTrainConfig(dim=8, lr=0.02, max_epochs=3, patience=5, seed=9)
        a = train_base(ds, config)
        b = train_base(ds, config)
        np.testing.assert_array_equal(a.model.averaged.user, b.model.averaged.user)
        np.testing.assert_array_equal(a.model.averaged.item, b.model.averaged.item)
        for ea, eb in zip(a.epochs, b.epochs):
            assert ea["mean_loss"] == eb["mean_loss"]
            assert ea["val_recall"] == eb["val_recall"]

    def test_snapshots_collected_per_epoch(self):
        ds = two_block_dataset(users_per_block=10, items_per_block=8,
                               train_per_user=4, seed=3)
        config = BaseTrainConfig(dim=8, lr=0.02, max_epochs=3, patience=5, seed=9,
                                 snapshot_users=True)
        result = train_base(ds, config)
        assert len(result.user_snapshots) == len(result.epochs)
        assert result.user_snapshots[0].shape == (ds.num_users, 8)


class TestCheckpoint:
    def test_roundtrip_recovers_averaged_tables(self, tmp_path):
        ds = two_block_dataset(users_per_block=8, items_per_block=6,
                               train_per_user=3, seed=5)
        config = BaseTrainConfig(dim=8, lr=0.02, max_epochs=2, patience=5, seed=2)
        result = train_base(ds, config)
        save_base_checkpoint(result.model, ds, tmp_path / "ckpt")
        loaded = load_base_checkpoint(tmp_path / "ckpt", ds)
        # layer zero persists as float32, so compare after the same rounding
        np.testing.assert_array_equal(
            loaded.layer_zero.user, result.model.layer_zero.user.astype(np.float32))
        assert loaded.num_layers == result.model.num_layers
        assert loaded.averaged is not None

    def test_dataset_mismatch_rejected(self, tmp_path, toy_dataset):
        ds = two_block_dataset(users_per_block=8, items_per_block=6,
                               train_per_user=3, seed=5)
        result = train_base(ds, BaseTrainConfig(dim=4, max_epochs=1, seed=0))
        save_base_checkpoint(result.model, ds, tmp_path / "ckpt")
        with pytest.raises(InvalidArgumentError, match="ids"):
            load_base_checkpoint(tmp_path / "ckpt", toy_dataset)
