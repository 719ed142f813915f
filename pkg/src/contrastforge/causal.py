"""Causal learning over attribute tokens: single-head self-attention, the
total-effect difference embedding, and a two-layer ReLU projection, all with
analytic gradients.

Conventions are row-vector throughout: Q = X W_q^T for token matrix X, and the
projection computes relu(x W_1 + b_1) W_2 + b_2 with W_1 of shape
(d_enc, hidden) and W_2 of shape (hidden, out_dim).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import EmbeddingFile, read_embedding_file, write_embedding_file
from .errors import InvalidArgumentError
from .numerics import ensure_finite, xavier_init

_PARAM_NAMES = ("W_q", "W_k", "W_v", "W_1", "b_1", "W_2", "b_2")


@dataclass
class CausalParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_1: np.ndarray
    b_1: np.ndarray
    w_2: np.ndarray
    b_2: np.ndarray

    @property
    def d_enc(self) -> int:
        return self.w_q.shape[0]

    @property
    def hidden(self) -> int:
        return self.w_1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w_2.shape[1]

    def validate(self) -> None:
        e, h, d = self.d_enc, self.hidden, self.out_dim
        expected = {"W_q": (e, e), "W_k": (e, e), "W_v": (e, e),
                    "W_1": (e, h), "b_1": (h,), "W_2": (h, d), "b_2": (d,)}
        for name, shape in expected.items():
            arr = self.to_dict()[name]
            if arr.shape != shape:
                raise InvalidArgumentError(
                    f"parameter {name} has shape {arr.shape}, expected {shape}")
            ensure_finite(name, arr)

    def to_dict(self) -> dict[str, np.ndarray]:
        return {"W_q": self.w_q, "W_k": self.w_k, "W_v": self.w_v,
                "W_1": self.w_1, "b_1": self.b_1, "W_2": self.w_2, "b_2": self.b_2}

    @classmethod
    def from_dict(cls, d: dict[str, np.ndarray]) -> "CausalParams":
        return cls(w_q=d["W_q"], w_k=d["W_k"], w_v=d["W_v"],
                   w_1=d["W_1"], b_1=d["b_1"], w_2=d["W_2"], b_2=d["b_2"])

    def copy(self) -> "CausalParams":
        return CausalParams.from_dict({k: v.copy() for k, v in self.to_dict().items()})


def init_causal_params(d_enc: int, hidden: int, out_dim: int, seed: int) -> CausalParams:
    params = CausalParams(
        w_q=xavier_init(d_enc, d_enc, seed ^ 0x51),
        w_k=xavier_init(d_enc, d_enc, seed ^ 0x52),
        w_v=xavier_init(d_enc, d_enc, seed ^ 0x53),
        w_1=xavier_init(d_enc, hidden, seed ^ 0x54),
        b_1=np.zeros(hidden),
        w_2=xavier_init(hidden, out_dim, seed ^ 0x55),
        b_2=np.zeros(out_dim),
    )
    params.validate()
    return params


def _softmax_last(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def _check_pooling(pooling: str) -> None:
    if pooling not in ("mean", "first"):
        raise InvalidArgumentError(f"unknown pooling {pooling!r}")


def attention_forward(tokens: np.ndarray, params: CausalParams,
                      pooling: str = "mean") -> dict:
    """Batched attention over (B, F, d_enc) token stacks. Returns the cache of
    intermediates needed by the backward pass, with pooled output under
    "pooled" and per-token output under "out"."""
    _check_pooling(pooling)
    x = np.asarray(tokens, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1] < 1:
        raise InvalidArgumentError("tokens must be (F, d_enc) or (B, F, d_enc), F >= 1")
    q = x @ params.w_q.T
    k = x @ params.w_k.T
    v = x @ params.w_v.T
    scale = 1.0 / np.sqrt(params.d_enc)
    scores = (q @ k.transpose(0, 2, 1)) * scale
    attn = _softmax_last(scores)
    out = attn @ v
    if pooling == "mean":
        pooled = out.mean(axis=1)
    else:
        pooled = out[:, 0, :]
    return {"x": x, "q": q, "k": k, "v": v, "attn": attn, "out": out,
            "pooled": pooled, "scale": scale, "pooling": pooling}


def attention_backward(cache: dict, d_pooled: np.ndarray, params: CausalParams):
    """Gradients of a scalar loss w.r.t. W_q, W_k, W_v given d loss / d pooled."""
    x, q, k, v = cache["x"], cache["q"], cache["k"], cache["v"]
    attn, scale = cache["attn"], cache["scale"]
    b, f, _ = x.shape
    d_out = np.zeros_like(cache["out"])
    if cache["pooling"] == "mean":
        d_out += d_pooled[:, None, :] / f
    else:
        d_out[:, 0, :] = d_pooled
    d_attn = d_out @ v.transpose(0, 2, 1)
    d_v = attn.transpose(0, 2, 1) @ d_out
    inner = (d_attn * attn).sum(axis=-1, keepdims=True)
    d_scores = attn * (d_attn - inner)
    d_q = (d_scores @ k) * scale
    d_k = (d_scores.transpose(0, 2, 1) @ q) * scale
    d_wq = np.einsum("bfe,bfg->eg", d_q, x)
    d_wk = np.einsum("bfe,bfg->eg", d_k, x)
    d_wv = np.einsum("bfe,bfg->eg", d_v, x)
    return d_wq, d_wk, d_wv


def self_attention(tokens: np.ndarray, params: CausalParams,
                   pooling: str = "mean") -> tuple[np.ndarray, np.ndarray]:
    """Single-item attention: returns (pooled vector, per-token matrix)."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2:
        raise InvalidArgumentError("tokens must be a (F, d_enc) matrix")
    cache = attention_forward(tokens, params, pooling)
    return cache["pooled"][0], cache["out"][0]


def causal_effect(pooled_pos: np.ndarray, pooled_neg: np.ndarray) -> np.ndarray:
    pooled_pos = np.asarray(pooled_pos, dtype=np.float64)
    pooled_neg = np.asarray(pooled_neg, dtype=np.float64)
    if pooled_pos.shape != pooled_neg.shape:
        raise InvalidArgumentError("pooled vectors differ in shape")
    return pooled_pos - pooled_neg


def project_forward(x: np.ndarray, params: CausalParams) -> dict:
    """relu(x W_1 + b_1) W_2 + b_2 over (B, d_enc) rows, with cache."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None]
    pre = x @ params.w_1 + params.b_1
    hidden = np.maximum(pre, 0.0)
    out = hidden @ params.w_2 + params.b_2
    return {"x": x, "pre": pre, "hidden": hidden, "out": out, "squeeze": squeeze}


def project_backward(cache: dict, d_out: np.ndarray, params: CausalParams):
    """Returns (d_W1, d_b1, d_W2, d_b2, d_x) for upstream d_out of shape (B, d)."""
    x, pre, hidden = cache["x"], cache["pre"], cache["hidden"]
    d_out = np.atleast_2d(np.asarray(d_out, dtype=np.float64))
    d_b2 = d_out.sum(axis=0)
    d_w2 = hidden.T @ d_out
    d_hidden = d_out @ params.w_2.T
    d_pre = d_hidden * (pre > 0.0)
    d_b1 = d_pre.sum(axis=0)
    d_w1 = x.T @ d_pre
    d_x = d_pre @ params.w_1.T
    return d_w1, d_b1, d_w2, d_b2, d_x


def project(x: np.ndarray, params: CausalParams) -> np.ndarray:
    cache = project_forward(x, params)
    return cache["out"][0] if cache["squeeze"] else cache["out"]


@dataclass
class CausalEffectEmbedding:
    """Total effect e_t in encoder space, its projection e_c, and the projected
    negative representation e_c_neg, for one item."""

    e_t: np.ndarray
    e_c: np.ndarray
    e_c_neg: np.ndarray


def causal_forward(pos_tokens: np.ndarray, neg_tokens: np.ndarray,
                   params: CausalParams, pooling: str = "mean") -> CausalEffectEmbedding:
    """Shared-parameter attention over both token sets, difference, projection."""
    pos_tokens = np.asarray(pos_tokens, dtype=np.float64)
    neg_tokens = np.asarray(neg_tokens, dtype=np.float64)
    if pos_tokens.shape != neg_tokens.shape:
        raise InvalidArgumentError("positive and negative token shapes differ")
    pooled_pos, _ = self_attention(pos_tokens, params, pooling)
    pooled_neg, _ = self_attention(neg_tokens, params, pooling)
    e_t = causal_effect(pooled_pos, pooled_neg)
    return CausalEffectEmbedding(e_t=e_t,
                                 e_c=project(e_t, params),
                                 e_c_neg=project(pooled_neg, params))


def causal_forward_batch(pos_tokens: np.ndarray, neg_tokens: np.ndarray,
                         params: CausalParams, pooling: str = "mean") -> dict:
    """Vectorized causal_forward over (B, F, d_enc) stacks; returns a cache with
    "e_t", "e_c", "e_c_neg" plus everything the backward pass needs."""
    if pos_tokens.shape != neg_tokens.shape:
        raise InvalidArgumentError("positive and negative token shapes differ")
    attn_pos = attention_forward(pos_tokens, params, pooling)
    attn_neg = attention_forward(neg_tokens, params, pooling)
    e_t = attn_pos["pooled"] - attn_neg["pooled"]
    proj_effect = project_forward(e_t, params)
    proj_neg = project_forward(attn_neg["pooled"], params)
    return {"attn_pos": attn_pos, "attn_neg": attn_neg, "e_t": e_t,
            "proj_effect": proj_effect, "proj_neg": proj_neg,
            "e_c": proj_effect["out"], "e_c_neg": proj_neg["out"]}


def causal_backward_batch(cache: dict, d_ec: np.ndarray, d_ec_neg: np.ndarray,
                          params: CausalParams) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given upstream
    gradients for e_c and e_c_neg of shape (B, d)."""
    d_w1_a, d_b1_a, d_w2_a, d_b2_a, d_et = project_backward(
        cache["proj_effect"], d_ec, params)
    d_w1_b, d_b1_b, d_w2_b, d_b2_b, d_pooled_neg_proj = project_backward(
        cache["proj_neg"], d_ec_neg, params)
    d_pooled_pos = d_et
    d_pooled_neg = -d_et + d_pooled_neg_proj
    d_wq_p, d_wk_p, d_wv_p = attention_backward(cache["attn_pos"], d_pooled_pos, params)
    d_wq_n, d_wk_n, d_wv_n = attention_backward(cache["attn_neg"], d_pooled_neg, params)
    return {"W_q": d_wq_p + d_wq_n, "W_k": d_wk_p + d_wk_n, "W_v": d_wv_p + d_wv_n,
            "W_1": d_w1_a + d_w1_b, "b_1": d_b1_a + d_b1_b,
            "W_2": d_w2_a + d_w2_b, "b_2": d_b2_a + d_b2_b}


def item_causal_vectors(pos_tokens: np.ndarray, params: CausalParams,
                        pooling: str = "mean") -> np.ndarray:
    """Evaluation-time causal vectors: project the pooled attention output of
    each item's positive attribute tokens. Generated negatives stay training-only."""
    cache = attention_forward(pos_tokens, params, pooling)
    return project_forward(cache["pooled"], params)["out"]


def save_causal_checkpoint(params: CausalParams, directory: str | Path,
                           meta: dict | None = None) -> None:
    params.validate()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, arr in params.to_dict().items():
        mat = np.atleast_2d(arr).astype(np.float32)
        ids = [f"{name}#{r}" for r in range(mat.shape[0])]
        write_embedding_file(EmbeddingFile(ids, mat.shape[1], mat),
                             directory / f"{name}.emb")
    payload = {"d_enc": params.d_enc, "h": params.hidden, "d": params.out_dim}
    payload.update(meta or {})
    (directory / "causal_meta.json").write_text(
        json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_causal_checkpoint(directory: str | Path) -> tuple[CausalParams, dict]:
    directory = Path(directory)
    meta = json.loads((directory / "causal_meta.json").read_text(encoding="utf-8"))
    loaded: dict[str, np.ndarray] = {}
    for name in _PARAM_NAMES:
        emb = read_embedding_file(directory / f"{name}.emb")
        mat = emb.vectors.astype(np.float64)
        loaded[name] = mat[0] if name.startswith("b_") else mat
    params = CausalParams.from_dict(loaded)
    params.validate()
    return params, meta
