"""Negative sampling strategies and the gradient-hardness diagnostics that
motivate generated negatives: the per-triple gradient magnitude
||u|| * (1 - sigmoid(u . (pos - neg))) and the ranking lower bound it controls.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .dataio import InteractionDataset
from .errors import InvalidArgumentError, ParseError
from .numerics import sigmoid


def uniform_negative(user: int, ds: InteractionDataset, rng: np.random.Generator) -> int:
    """Rejection-sample an item index the user has no training interaction with."""
    positives = ds.train_positives()[user]
    n = ds.num_items
    if len(positives) >= n:
        raise InvalidArgumentError(f"user index {user} interacts with every item")
    while True:
        cand = int(rng.integers(n))
        if cand not in positives:
            return cand


def dns_negative(user: int, ds: InteractionDataset, item_scores: np.ndarray,
                 num_candidates: int, rng: np.random.Generator) -> int:
    """Dynamic negative sampling: highest-scoring of `num_candidates` uniform draws."""
    if num_candidates < 1:
        raise InvalidArgumentError("num_candidates must be >= 1")
    cands = [uniform_negative(user, ds, rng) for _ in range(num_candidates)]
    return max(cands, key=lambda c: item_scores[c])


def gradient_magnitude(user_vec: np.ndarray, pos_vec: np.ndarray, neg_vec: np.ndarray) -> float:
    """Norm of the BPR gradient w.r.t. the user vector for one training triple."""
    margin = float(user_vec @ (pos_vec - neg_vec))
    return float(np.linalg.norm(user_vec) * (1.0 - sigmoid(margin)))


def ndcg_lower_bound(user_vec: np.ndarray, pairs) -> float:
    """Mean pairwise-win probability over (positive, negative) vector pairs.

    Each term is sigmoid(u . pos - u . neg); easy negatives saturate every term
    at 1 and the bound stops discriminating.
    """
    pairs = list(pairs)
    if not pairs:
        raise InvalidArgumentError("need at least one (positive, negative) pair")
    margins = np.array([float(np.asarray(user_vec) @ (np.asarray(p) - np.asarray(n)))
                        for p, n in pairs])
    return float(np.mean(sigmoid(margins)))


_TRACE_HEADER = ["epoch", "modality", "mean_grad_magnitude"]


@dataclass
class DiagnosticsTrace:
    """Per-epoch, per-modality mean gradient magnitudes in recording order."""

    rows: list[tuple[int, str, float]] = field(default_factory=list)

    def add(self, epoch: int, modality: str, mean_grad_magnitude: float) -> None:
        self.rows.append((int(epoch), str(modality), float(mean_grad_magnitude)))

    def series(self, modality: str) -> list[float]:
        return [v for _, m, v in self.rows if m == modality]

    def modalities(self) -> list[str]:
        seen: list[str] = []
        for _, m, _ in self.rows:
            if m not in seen:
                seen.append(m)
        return seen

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(_TRACE_HEADER)
        for epoch, modality, value in self.rows:
            writer.writerow([epoch, modality, f"{value:.6g}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "DiagnosticsTrace":
        reader = csv.reader(io.StringIO(text))
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty diagnostics trace") from None
        if header != _TRACE_HEADER:
            raise ParseError(f"unexpected trace header {header!r}")
        trace = cls()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError("expected 3 fields", line_number=lineno)
            try:
                trace.add(int(row[0]), row[1], float(row[2]))
            except ValueError as exc:
                raise ParseError(str(exc), line_number=lineno) from None
        return trace
