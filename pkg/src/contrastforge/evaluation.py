"""Full-ranking top-K evaluation, metric export, and the per-modality gradient
tracker used to diagnose which attribute channels still produce informative
negatives as training progresses.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, ParseError
from .numerics import rng_stream, sigmoid
from .sampling import DiagnosticsTrace


@dataclass
class MetricsReport:
    ks: list[int]
    recall: dict[int, float]
    ndcg: dict[int, float]
    num_evaluated: int
    num_skipped: int
    convergence_epoch: int | None = None
    val_series: list[float] | None = None


def recall_at_k(ranked_items: list[int], relevant: set[int], k: int) -> float:
    if k < 1:
        raise InvalidArgumentError("k must be >= 1")
    if not relevant:
        raise InvalidArgumentError("relevant set is empty")
    hits = sum(1 for item in ranked_items[:k] if item in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked_items: list[int], relevant: set[int], k: int) -> float:
    """Binary-gain NDCG with 1/log2(rank + 1) discount, ranks 1-indexed."""
    if k < 1:
        raise InvalidArgumentError("k must be >= 1")
    if not relevant:
        raise InvalidArgumentError("relevant set is empty")
    dcg = sum(1.0 / np.log2(pos + 1)
              for pos, item in enumerate(ranked_items[:k], start=1)
              if item in relevant)
    ideal = sum(1.0 / np.log2(pos + 1)
                for pos in range(1, min(k, len(relevant)) + 1))
    return float(dcg / ideal)


def rank_items(scores_row: np.ndarray, exclude: set[int]) -> list[int]:
    """Descending-score ranking over the catalog, ties broken by item index,
    with `exclude` (training positives) removed from candidacy."""
    masked = scores_row.astype(np.float64, copy=True)
    if exclude:
        masked[list(exclude)] = -np.inf
    order = np.argsort(-masked, kind="stable")
    return [int(i) for i in order if i not in exclude]


def topk_metrics_from_scores(scores: np.ndarray, train_positives, relevant,
                             ks: list[int]) -> MetricsReport:
    """Average Recall@K / NDCG@K over users with at least one relevant item.

    `scores` is (num_users, num_items); `train_positives` and `relevant` are
    per-user collections of item indices. Users with empty relevant sets are
    skipped but counted.
    """
    if not ks:
        raise InvalidArgumentError("ks must be non-empty")
    if any(k < 1 for k in ks):
        raise InvalidArgumentError("every K must be >= 1")
    recall_sums = {k: 0.0 for k in ks}
    ndcg_sums = {k: 0.0 for k in ks}
    evaluated = 0
    skipped = 0
    for u in range(scores.shape[0]):
        rel = set(relevant[u])
        if not rel:
            skipped += 1
            continue
        ranked = rank_items(scores[u], set(train_positives[u]))
        evaluated += 1
        for k in ks:
            recall_sums[k] += recall_at_k(ranked, rel, k)
            ndcg_sums[k] += ndcg_at_k(ranked, rel, k)
    if evaluated == 0:
        raise InvalidArgumentError("no users had relevant items to evaluate")
    return MetricsReport(
        ks=list(ks),
        recall={k: recall_sums[k] / evaluated for k in ks},
        ndcg={k: ndcg_sums[k] / evaluated for k in ks},
        num_evaluated=evaluated,
        num_skipped=skipped,
    )


def evaluate_topk(user_mat: np.ndarray, item_mat: np.ndarray, train_positives,
                  relevant, ks: list[int], *, causal_item_mat: np.ndarray | None = None,
                  fuse_weight: float = 0.0) -> MetricsReport:
    """Rank the full catalog for every user and average the top-K metrics.

    With a causal item matrix the score is u.item + fuse_weight * u.causal,
    otherwise the plain inner product.
    """
    scores = user_mat @ item_mat.T
    if causal_item_mat is not None:
        scores = scores + fuse_weight * (user_mat @ causal_item_mat.T)
    return topk_metrics_from_scores(scores, train_positives, relevant, ks)


def track_modality_gradients(user_snapshots: list[np.ndarray],
                             modality_item_vectors: dict[str, np.ndarray],
                             pairs: list[tuple[int, int]],
                             train_positives, seed: int) -> DiagnosticsTrace:
    """Mean BPR gradient magnitude per epoch and modality.

    For each epoch snapshot one uniform negative is drawn per training pair and
    shared across modalities, so traces differ only through the item vectors.
    Larger margins in a modality mean smaller gradients there.
    """
    if not user_snapshots:
        raise InvalidArgumentError("need at least one user snapshot")
    if not modality_item_vectors:
        raise InvalidArgumentError("need at least one modality")
    if not pairs:
        raise InvalidArgumentError("need at least one training pair")
    num_items = next(iter(modality_item_vectors.values())).shape[0]
    users = np.array([u for u, _ in pairs])
    items = np.array([i for _, i in pairs])
    trace = DiagnosticsTrace()
    for epoch, snapshot in enumerate(user_snapshots):
        rng = rng_stream(seed, "modality-neg", epoch)
        negs = np.empty(len(pairs), dtype=np.int64)
        for idx, u in enumerate(users):
            positives = train_positives[u]
            while True:
                cand = int(rng.integers(num_items))
                if cand not in positives:
                    negs[idx] = cand
                    break
        u_vecs = snapshot[users]
        norms = np.linalg.norm(u_vecs, axis=1)
        for modality, vectors in modality_item_vectors.items():
            margins = np.einsum("bd,bd->b", u_vecs, vectors[items] - vectors[negs])
            mags = norms * (1.0 - sigmoid(margins))
            trace.add(epoch, modality, float(np.mean(mags)))
    return trace


def modality_vectors(pos_tokens: np.ndarray, params) -> dict[str, np.ndarray]:
    """Per-modality item matrices in base-embedding space: the visual field
    vector, the mean of the textual metadata fields, and the mean of all
    fields, each pushed through the causal projection.

    `pos_tokens` is the (num_items, F, d_enc) stack in pipeline field order
    (visual_description first).
    """
    from .causal import project_forward

    if pos_tokens.ndim != 3:
        raise InvalidArgumentError("expected a (num_items, F, d_enc) stack")
    visual = pos_tokens[:, 0, :]
    textual = pos_tokens[:, 1:, :].mean(axis=1)
    fused = pos_tokens.mean(axis=1)
    return {
        "visual": project_forward(visual, params)["out"],
        "textual": project_forward(textual, params)["out"],
        "fused": project_forward(fused, params)["out"],
    }


_METRIC_HEADER = ["metric", "K", "value"]


def export_metrics(report: MetricsReport, json_path: str | Path, csv_path: str | Path) -> None:
    payload = {
        "ks": report.ks,
        "recall": {str(k): report.recall[k] for k in report.ks},
        "ndcg": {str(k): report.ndcg[k] for k in report.ks},
        "num_evaluated": report.num_evaluated,
        "num_skipped": report.num_skipped,
        "convergence_epoch": report.convergence_epoch,
        "val_series": report.val_series,
    }
    Path(json_path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_METRIC_HEADER)
    for k in report.ks:
        writer.writerow(["recall", k, f"{report.recall[k]:.6g}"])
    for k in report.ks:
        writer.writerow(["ndcg", k, f"{report.ndcg[k]:.6g}"])
    if report.convergence_epoch is not None:
        writer.writerow(["convergence_epoch", "", report.convergence_epoch])
    Path(csv_path).write_text(buf.getvalue(), encoding="utf-8")


def load_metrics_csv(csv_path: str | Path) -> MetricsReport:
    text = Path(csv_path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != _METRIC_HEADER:
        raise ParseError(f"unexpected metrics header {header!r}")
    recall: dict[int, float] = {}
    ndcg: dict[int, float] = {}
    convergence: int | None = None
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 3:
            raise ParseError("expected 3 fields", line_number=lineno)
        name, k, value = row
        if name == "recall":
            recall[int(k)] = float(value)
        elif name == "ndcg":
            ndcg[int(k)] = float(value)
        elif name == "convergence_epoch":
            convergence = int(value)
        else:
            raise ParseError(f"unknown metric {name!r}", line_number=lineno)
    ks = sorted(recall)
    if ks != sorted(ndcg):
        raise ParseError("recall and ndcg rows cover different K values")
    return MetricsReport(ks=ks, recall=recall, ndcg=ndcg,
                         num_evaluated=-1, num_skipped=-1,
                         convergence_epoch=convergence)
