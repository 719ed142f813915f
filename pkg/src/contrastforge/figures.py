"""Figure rendering for the report paths: modality gradient traces, training
convergence, and the final metric summary. Files only, no interactive display.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .errors import InvalidArgumentError
from .evaluation import MetricsReport
from .sampling import DiagnosticsTrace

_STYLE = {
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 10,
}

_MODALITY_COLORS = {
    "visual": "#d62728",
    "textual": "#1f77b4",
    "fused": "#2ca02c",
}


def render_diagnostics_figure(trace: DiagnosticsTrace, path: str | Path) -> Path:
    """One line per modality: mean gradient magnitude over epochs."""
    if not trace.rows:
        raise InvalidArgumentError("diagnostics trace is empty")
    path = Path(path)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6, 4))
        for modality in trace.modalities():
            epochs = [e for e, m, _ in trace.rows if m == modality]
            values = trace.series(modality)
            ax.plot(epochs, values, marker="o", markersize=3,
                    label=modality, color=_MODALITY_COLORS.get(modality))
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean gradient magnitude")
        ax.set_title("Negative-sample gradient magnitude by modality")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def render_convergence_figure(epochs: list[dict], path: str | Path,
                              loss_keys: tuple[str, ...] = ("mean_loss",),
                              metric_key: str = "val_recall") -> Path:
    """Training loss curves on the left axis, validation metric on the right."""
    if not epochs:
        raise InvalidArgumentError("no epoch records to plot")
    path = Path(path)
    xs = [row["epoch"] for row in epochs]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6, 4))
        for key in loss_keys:
            if key in epochs[0]:
                ax.plot(xs, [row[key] for row in epochs], label=key)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax2 = ax.twinx()
        ax2.plot(xs, [row[metric_key] for row in epochs], color="#2ca02c",
                 linestyle="--", label=metric_key)
        ax2.set_ylabel(metric_key)
        ax2.spines["right"].set_visible(True)
        lines, labels = ax.get_legend_handles_labels()
        lines2, labels2 = ax2.get_legend_handles_labels()
        ax.legend(lines + lines2, labels + labels2, loc="best")
        ax.set_title("Training convergence")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def render_metrics_figure(report: MetricsReport, path: str | Path) -> Path:
    """Grouped bars: Recall@K and NDCG@K for every configured K."""
    path = Path(path)
    ks = report.ks
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6, 4))
        width = 0.35
        xs = range(len(ks))
        ax.bar([x - width / 2 for x in xs], [report.recall[k] for k in ks],
               width, label="Recall")
        ax.bar([x + width / 2 for x in xs], [report.ndcg[k] for k in ks],
               width, label="NDCG")
        ax.set_xticks(list(xs))
        ax.set_xticklabels([f"@{k}" for k in ks])
        ax.set_ylabel("metric value")
        title = "Top-K metrics"
        if report.convergence_epoch is not None:
            title += f" (converged at epoch {report.convergence_epoch})"
        ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
