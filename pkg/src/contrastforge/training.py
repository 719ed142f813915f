"""Phase-2 training: the fused score, the ranking and alignment losses over
causal outputs, and the minibatch loop that optimizes the causal parameters
against a frozen (by default) base recommender.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import evaluation
from .causal import (CausalParams, causal_backward_batch, causal_forward_batch,
                     init_causal_params, item_causal_vectors)
from .dataio import InteractionDataset
from .errors import InvalidArgumentError, MissingArtifactError
from .graph import BaseModel, EarlyStopper, EmbeddingTable, build_normalized_adjacency, propagate
from .numerics import AdamState, adam_step, log_sigmoid, rng_stream, sigmoid, softplus_scalar
from .pipeline import AttributeEmbedding
from .sampling import uniform_negative


def fused_score(e_u: np.ndarray, e_i: np.ndarray, e_c: np.ndarray, lam: float) -> float:
    """Base inner product plus lam times the causal inner product."""
    if not (e_u.shape == e_i.shape == e_c.shape):
        raise InvalidArgumentError("fused_score vectors must share one dimension")
    return float(e_u @ e_i + lam * (e_u @ e_c))


def rec_loss(e_u: np.ndarray, e_i: np.ndarray, e_c: np.ndarray, e_c_neg: np.ndarray,
             lam: float):
    """-log sigmoid(lam u.c + u.i - u.c*) with gradients for all four vectors.

    The negative side is the causal negative term alone; with lam = 0 and a
    base negative embedding in place of e_c_neg this reduces to the base
    pairwise loss.
    """
    s = lam * float(e_u @ e_c) + float(e_u @ e_i) - float(e_u @ e_c_neg)
    loss = float(-log_sigmoid(s))
    coef = sigmoid(s) - 1.0
    grads = {
        "e_u": coef * (lam * e_c + e_i - e_c_neg),
        "e_i": coef * e_u,
        "e_c": coef * lam * e_u,
        "e_c_neg": -coef * e_u,
    }
    return loss, grads


def align_loss(e_c: np.ndarray, e_c_neg: np.ndarray, e_i: np.ndarray, tau: float,
               variant: str = "paper"):
    """Contrastive alignment of the causal effect with the item embedding.

    The "paper" variant is the printed ratio form, algebraically
    (n - p) / tau for p = e_c.e_i and n = e_c*.e_i; it is unbounded below.
    The "stabilized" variant adds the positive logit to the denominator,
    giving softplus((n - p) / tau) >= 0.
    """
    if tau <= 0:
        raise InvalidArgumentError("tau must be positive")
    p = float(e_c @ e_i)
    n = float(e_c_neg @ e_i)
    z = (n - p) / tau
    if variant == "paper":
        loss = z
        g = 1.0 / tau
    elif variant == "stabilized":
        loss = softplus_scalar(z)
        g = sigmoid(z) / tau
    else:
        raise InvalidArgumentError(f"unknown align variant {variant!r}")
    grads = {
        "e_c": -g * e_i,
        "e_c_neg": g * e_i,
        "e_i": g * (e_c_neg - e_c),
    }
    return loss, grads


@dataclass
class TrainConfig:
    lam: float = 0.5
    alpha: float = 0.01
    tau: float = 0.1
    lr: float = 1e-3
    batch_size: int = 2048
    max_epochs: int = 1000
    patience: int = 20
    d: int = 64
    d_enc: int = 64
    hidden: int = 64
    num_layers: int = 2
    seed: int = 0
    freeze_base: bool = True
    align_variant: str = "paper"
    neg_source: str = "generated"
    pooling: str = "mean"
    stop_metric_k: int = 20

    def validate(self) -> None:
        if self.tau <= 0:
            raise InvalidArgumentError("tau must be positive")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")
        if self.patience < 1:
            raise InvalidArgumentError("patience must be >= 1")
        if self.align_variant not in ("paper", "stabilized"):
            raise InvalidArgumentError(f"unknown align variant {self.align_variant!r}")
        if self.neg_source not in ("generated", "uniform"):
            raise InvalidArgumentError(f"unknown neg_source {self.neg_source!r}")


@dataclass
class TrainRecord:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""


def stack_attribute_tokens(ds: InteractionDataset,
                           embeddings: list[AttributeEmbedding]):
    """Align attribute embeddings with item indices; returns (pos, neg) stacks
    of shape (num_items, F, d_enc). A catalog item without an embedding is an
    error naming the item."""
    by_id = {e.item_id: e for e in embeddings}
    pos_rows = []
    neg_rows = []
    for item_id in ds.item_ids:
        if item_id not in by_id:
            raise MissingArtifactError(f"no attribute embedding for item {item_id!r}")
        emb = by_id[item_id]
        pos_rows.append(emb.positive_tokens)
        neg_rows.append(emb.negative_tokens)
    return np.stack(pos_rows), np.stack(neg_rows)


def total_loss(users: np.ndarray, items: np.ndarray, user_mat: np.ndarray,
               item_mat: np.ndarray, pos_tokens: np.ndarray, neg_tokens: np.ndarray,
               params: CausalParams, config: TrainConfig):
    """Mean rec loss plus alpha times mean align loss over one batch, with
    gradients for every causal parameter and for the touched base rows.

    Token stacks are already gathered per batch element (B, F, d_enc).
    Returns (total, mean_rec, mean_align, param_grads, d_user_rows, d_item_rows).
    """
    b = len(users)
    cache = causal_forward_batch(pos_tokens, neg_tokens, params, config.pooling)
    e_c, e_cn = cache["e_c"], cache["e_c_neg"]
    u = user_mat[users]
    i = item_mat[items]

    s = config.lam * np.einsum("bd,bd->b", u, e_c) \
        + np.einsum("bd,bd->b", u, i) - np.einsum("bd,bd->b", u, e_cn)
    rec_terms = -log_sigmoid(s)
    mean_rec = float(np.mean(rec_terms))
    rec_coef = (sigmoid(s) - 1.0) / b

    # n - p computed from the hidden-layer difference so the shared bias b_2
    # cancels exactly instead of to roundoff; algebraically (e_c*.i - e_c.i)
    delta = (cache["proj_neg"]["hidden"] - cache["proj_effect"]["hidden"]) @ params.w_2
    z = np.einsum("bd,bd->b", delta, i) / config.tau
    if config.align_variant == "paper":
        align_terms = z
        align_g = np.full(b, 1.0 / config.tau)
    else:
        align_terms = np.logaddexp(0.0, z)
        align_g = sigmoid(z) / config.tau
    mean_align = float(np.mean(align_terms))
    align_coef = config.alpha * align_g / b

    d_ec = rec_coef[:, None] * (config.lam * u) - align_coef[:, None] * i
    d_ecn = -rec_coef[:, None] * u + align_coef[:, None] * i
    param_grads = causal_backward_batch(cache, d_ec, d_ecn, params)

    d_u = rec_coef[:, None] * (config.lam * e_c + i - e_cn)
    d_i = rec_coef[:, None] * u + align_coef[:, None] * (e_cn - e_c)
    total = mean_rec + config.alpha * mean_align
    return total, mean_rec, mean_align, param_grads, d_u, d_i


def validation_report(model: BaseModel, ds: InteractionDataset, params: CausalParams,
                      pos_tokens: np.ndarray, config: TrainConfig, split: str = "val",
                      ks: list[int] | None = None):
    """Fused-score evaluation of the current model state on one split."""
    causal_items = item_causal_vectors(pos_tokens, params, config.pooling)
    return evaluation.evaluate_topk(
        model.averaged.user, model.averaged.item,
        ds.train_positives(), ds.split_positives(split),
        ks or [config.stop_metric_k],
        causal_item_mat=causal_items, fuse_weight=config.lam)


def train_neggen(ds: InteractionDataset, base: BaseModel,
                 embeddings: list[AttributeEmbedding],
                 config: TrainConfig) -> tuple[CausalParams, TrainRecord]:
    """Minibatch optimization of the causal parameters under the joint loss,
    early-stopped on validation recall with the fused score. A non-finite loss
    aborts the run and keeps the best parameters seen so far."""
    config.validate()
    adj = build_normalized_adjacency(ds)
    if base.averaged is None:
        base.refresh(adj)
    pos_stack, neg_stack = stack_attribute_tokens(ds, embeddings)
    d_enc = pos_stack.shape[2]
    if d_enc != config.d_enc:
        raise InvalidArgumentError(
            f"attribute embeddings have d_enc={d_enc}, config says {config.d_enc}")

    params = init_causal_params(config.d_enc, config.hidden, config.d,
                                rng_stream(config.seed, "causal-init").integers(2**31))
    states = {name: AdamState.for_param(arr, lr=config.lr)
              for name, arr in params.to_dict().items()}
    base_states = None
    if not config.freeze_base:
        base_states = {
            "user": AdamState.for_param(base.layer_zero.user, lr=config.lr),
            "item": AdamState.for_param(base.layer_zero.item, lr=config.lr),
        }

    pairs = np.array(ds.train, dtype=np.int64)
    stopper = EarlyStopper(config.patience)
    best = params.copy()
    record = TrainRecord()
    record.stop_reason = "max_epochs"

    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        order = rng_stream(config.seed, "causal-shuffle", epoch).permutation(len(pairs))
        neg_rng = rng_stream(config.seed, "causal-neg", epoch)
        sum_rec = 0.0
        sum_align = 0.0
        diverged = False
        for start in range(0, len(pairs), config.batch_size):
            batch = pairs[order[start:start + config.batch_size]]
            users, items = batch[:, 0], batch[:, 1]
            if config.neg_source == "generated":
                neg_tokens = neg_stack[items]
            else:
                drawn = np.array([uniform_negative(int(u), ds, neg_rng) for u in users])
                neg_tokens = pos_stack[drawn]
            total, mean_rec, mean_align, grads, d_u, d_i = total_loss(
                users, items, base.averaged.user, base.averaged.item,
                pos_stack[items], neg_tokens, params, config)
            if not np.isfinite(total):
                diverged = True
                break
            updated = params.to_dict()
            for name, grad in grads.items():
                updated[name] = adam_step(updated[name], grad, states[name])
            params = CausalParams.from_dict(updated)
            if base_states is not None:
                grad_user = np.zeros_like(base.averaged.user)
                grad_item = np.zeros_like(base.averaged.item)
                np.add.at(grad_user, users, d_u)
                np.add.at(grad_item, items, d_i)
                back = propagate(adj, EmbeddingTable(grad_user, grad_item),
                                 base.num_layers)
                base.layer_zero.user = adam_step(base.layer_zero.user, back.user,
                                                 base_states["user"])
                base.layer_zero.item = adam_step(base.layer_zero.item, back.item,
                                                 base_states["item"])
                base.refresh(adj)
            sum_rec += mean_rec * len(batch)
            sum_align += mean_align * len(batch)
        if diverged:
            record.stop_reason = "diverged"
            break

        report = validation_report(base, ds, params, pos_stack, config)
        val_recall = report.recall[config.stop_metric_k]
        record.epochs.append({
            "epoch": epoch,
            "mean_rec_loss": sum_rec / len(pairs),
            "mean_align_loss": sum_align / len(pairs),
            "val_recall": val_recall,
            "wall_time_s": time.perf_counter() - t0,
        })
        stop = stopper.update(epoch, val_recall)
        if stopper.improved:
            best = params.copy()
        if stop:
            record.stop_reason = "early_stopping"
            break

    record.best_epoch = stopper.best_epoch
    return best, record
