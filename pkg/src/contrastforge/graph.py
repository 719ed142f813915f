"""Bipartite graph construction, linear propagation with layer averaging, and
phase-1 training of the base recommender with pairwise ranking loss.

The propagation operator is symmetric, so the backward pass through it is the
operator itself; gradients w.r.t. the layer-zero tables are obtained by
propagating the upstream gradient and averaging with the same 1/(L+1) factor.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import evaluation
from .dataio import EmbeddingFile, InteractionDataset, read_embedding_file, write_embedding_file
from .errors import GraphError, InvalidArgumentError, NumericalError
from .numerics import (AdamState, adam_step, ensure_finite, log_sigmoid,
                       rng_stream, sigmoid, xavier_init)
from .sampling import uniform_negative


@dataclass
class NormalizedAdjacency:
    """Symmetric degree-normalized adjacency over user + item nodes.

    Users occupy rows [0, num_users), items [num_users, num_users + num_items).
    Edge (j, k) carries 1 / sqrt(deg_j * deg_k), degrees from the training split.
    """

    matrix: sp.csr_matrix
    num_users: int
    num_items: int


def build_normalized_adjacency(ds: InteractionDataset) -> NormalizedAdjacency:
    if not ds.train:
        raise InvalidArgumentError("training split is empty")
    n_users, n_items = ds.num_users, ds.num_items
    users = np.array([u for u, _ in ds.train])
    items = np.array([i for _, i in ds.train])

    user_deg = np.bincount(users, minlength=n_users)
    item_deg = np.bincount(items, minlength=n_items)
    if (user_deg == 0).any():
        idx = int(np.argmin(user_deg))
        raise GraphError(f"user {ds.user_ids[idx]!r} has no training interactions")
    if (item_deg == 0).any():
        idx = int(np.argmin(item_deg))
        raise GraphError(f"item {ds.item_ids[idx]!r} has no training interactions")

    coef = 1.0 / np.sqrt(user_deg[users] * item_deg[items])
    rows = np.concatenate([users, items + n_users])
    cols = np.concatenate([items + n_users, users])
    data = np.concatenate([coef, coef])
    n = n_users + n_items
    matrix = sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()
    return NormalizedAdjacency(matrix=matrix, num_users=n_users, num_items=n_items)


@dataclass
class EmbeddingTable:
    user: np.ndarray
    item: np.ndarray

    @property
    def dim(self) -> int:
        return self.user.shape[1]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.user.copy(), self.item.copy())


def propagate(adj: NormalizedAdjacency, table: EmbeddingTable, num_layers: int) -> EmbeddingTable:
    """Layer-averaged propagation: mean of A^l E for l = 0..num_layers."""
    if num_layers < 0:
        raise InvalidArgumentError("num_layers must be >= 0")
    current = np.vstack([table.user, table.item])
    acc = current.copy()
    for _ in range(num_layers):
        current = adj.matrix @ current
        acc += current
    avg = acc / (num_layers + 1)
    ensure_finite("propagated embeddings", avg)
    return EmbeddingTable(user=avg[:adj.num_users], item=avg[adj.num_users:])


def bpr_base_loss(user_vec: np.ndarray, pos_vec: np.ndarray, neg_vec: np.ndarray):
    """-log sigmoid(u . (pos - neg)) and its gradients w.r.t. all three vectors."""
    if not (user_vec.shape == pos_vec.shape == neg_vec.shape):
        raise InvalidArgumentError("bpr_base_loss vectors must share one dimension")
    diff = pos_vec - neg_vec
    margin = float(user_vec @ diff)
    loss = float(-log_sigmoid(margin))
    coef = sigmoid(margin) - 1.0
    grad_user = coef * diff
    grad_pos = coef * user_vec
    grad_neg = -coef * user_vec
    return loss, (grad_user, grad_pos, grad_neg)


@dataclass
class BaseModel:
    """Layer-zero embedding tables plus the cached layer-averaged tables."""

    layer_zero: EmbeddingTable
    num_layers: int
    averaged: EmbeddingTable | None = None

    def refresh(self, adj: NormalizedAdjacency) -> None:
        self.averaged = propagate(adj, self.layer_zero, self.num_layers)


class EarlyStopper:
    """Stop once the validation metric has not strictly improved for `patience` epochs."""

    def __init__(self, patience: int):
        if patience < 1:
            raise InvalidArgumentError("patience must be >= 1")
        self.patience = patience
        self.best_value = -np.inf
        self.best_epoch = -1
        self.epochs_since_best = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record one epoch's metric; returns True when training should stop."""
        if value > self.best_value:
            self.best_value = value
            self.best_epoch = epoch
            self.epochs_since_best = 0
            return False
        self.epochs_since_best += 1
        return self.epochs_since_best >= self.patience

    @property
    def improved(self) -> bool:
        return self.epochs_since_best == 0


@dataclass
class BaseTrainConfig:
    dim: int = 64
    num_layers: int = 2
    lr: float = 1e-3
    batch_size: int = 2048
    max_epochs: int = 1000
    patience: int = 20
    seed: int = 0
    stop_metric_k: int = 20
    snapshot_users: bool = False


@dataclass
class BaseTrainResult:
    model: BaseModel
    epochs: list[dict]
    best_epoch: int
    stop_reason: str
    user_snapshots: list[np.ndarray] = field(default_factory=list)


def _scatter_pair_grads(grad_user, grad_item, users, items, gu, gi, gn, negs):
    np.add.at(grad_user, users, gu)
    np.add.at(grad_item, items, gi)
    np.add.at(grad_item, negs, gn)


def batch_bpr_grads(user_mat, item_mat, users, items, negs):
    """Mean BPR loss over index triples plus gradients w.r.t. the averaged tables."""
    u = user_mat[users]
    diff = item_mat[items] - item_mat[negs]
    margins = np.einsum("bd,bd->b", u, diff)
    loss = float(np.mean(-log_sigmoid(margins)))
    coef = (sigmoid(margins) - 1.0) / len(users)
    grad_user = np.zeros_like(user_mat)
    grad_item = np.zeros_like(item_mat)
    gu = coef[:, None] * diff
    gi = coef[:, None] * u
    _scatter_pair_grads(grad_user, grad_item, users, items, gu, gi, -gi, negs)
    return loss, grad_user, grad_item


def train_base(ds: InteractionDataset, config: BaseTrainConfig) -> BaseTrainResult:
    """Minibatch BPR over the training split with uniform negatives and early stopping."""
    adj = build_normalized_adjacency(ds)
    user0 = xavier_init(ds.num_users, config.dim, rng_stream(config.seed, "base-user").integers(2**31))
    item0 = xavier_init(ds.num_items, config.dim, rng_stream(config.seed, "base-item").integers(2**31))
    model = BaseModel(layer_zero=EmbeddingTable(user0, item0), num_layers=config.num_layers)

    states = {
        "user": AdamState.for_param(user0, lr=config.lr),
        "item": AdamState.for_param(item0, lr=config.lr),
    }
    pairs = np.array(ds.train, dtype=np.int64)
    val_relevant = ds.split_positives("val")
    stopper = EarlyStopper(config.patience)
    best_tables = model.layer_zero.copy()
    epochs: list[dict] = []
    snapshots: list[np.ndarray] = []
    stop_reason = "max_epochs"

    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        order = rng_stream(config.seed, "base-shuffle", epoch).permutation(len(pairs))
        neg_rng = rng_stream(config.seed, "base-neg", epoch)
        epoch_loss = 0.0
        for start in range(0, len(pairs), config.batch_size):
            batch = pairs[order[start:start + config.batch_size]]
            users, items = batch[:, 0], batch[:, 1]
            negs = np.array([uniform_negative(int(u), ds, neg_rng) for u in users])
            model.refresh(adj)
            loss, g_user, g_item = batch_bpr_grads(
                model.averaged.user, model.averaged.item, users, items, negs)
            if not np.isfinite(loss):
                raise NumericalError(
                    f"base training diverged at epoch {epoch}, batch offset {start}")
            back = propagate(adj, EmbeddingTable(g_user, g_item), config.num_layers)
            model.layer_zero.user = adam_step(model.layer_zero.user, back.user, states["user"])
            model.layer_zero.item = adam_step(model.layer_zero.item, back.item, states["item"])
            epoch_loss += loss * len(batch)
        epoch_loss /= len(pairs)

        model.refresh(adj)
        scores = model.averaged.user @ model.averaged.item.T
        metrics = evaluation.topk_metrics_from_scores(
            scores, ds.train_positives(), val_relevant, [config.stop_metric_k])
        val_recall = metrics.recall[config.stop_metric_k]
        if config.snapshot_users:
            snapshots.append(model.averaged.user.copy())
        epochs.append({"epoch": epoch, "mean_loss": epoch_loss,
                       "val_recall": val_recall,
                       "wall_time_s": time.perf_counter() - t0})
        stop = stopper.update(epoch, val_recall)
        if stopper.improved:
            best_tables = model.layer_zero.copy()
        if stop:
            stop_reason = "early_stopping"
            break

    model.layer_zero = best_tables
    model.refresh(adj)
    return BaseTrainResult(model=model, epochs=epochs,
                           best_epoch=stopper.best_epoch, stop_reason=stop_reason,
                           user_snapshots=snapshots)


def save_base_checkpoint(model: BaseModel, ds: InteractionDataset, directory: str | Path,
                         meta: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    d = model.layer_zero.dim
    write_embedding_file(EmbeddingFile(ds.user_ids, d, model.layer_zero.user.astype(np.float32)),
                         directory / "base_user.emb")
    write_embedding_file(EmbeddingFile(ds.item_ids, d, model.layer_zero.item.astype(np.float32)),
                         directory / "base_item.emb")
    import json
    payload = {"dim": d, "num_layers": model.num_layers}
    payload.update(meta or {})
    (directory / "base_meta.json").write_text(json.dumps(payload, indent=2) + "\n",
                                              encoding="utf-8")


def load_base_checkpoint(directory: str | Path, ds: InteractionDataset) -> BaseModel:
    directory = Path(directory)
    import json
    meta = json.loads((directory / "base_meta.json").read_text(encoding="utf-8"))
    user = read_embedding_file(directory / "base_user.emb")
    item = read_embedding_file(directory / "base_item.emb")
    if user.ids != ds.user_ids or item.ids != ds.item_ids:
        raise InvalidArgumentError("checkpoint ids do not match the dataset")
    model = BaseModel(layer_zero=EmbeddingTable(user.vectors.astype(np.float64),
                                                item.vectors.astype(np.float64)),
                      num_layers=meta["num_layers"])
    model.refresh(build_normalized_adjacency(ds))
    return model
