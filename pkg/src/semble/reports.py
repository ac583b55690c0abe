"""Report emission: delimited files plus rendered figures.

Every reporting path writes machine-readable CSV (or structured text)
first and then renders a matplotlib figure of the same data next to
it, so runs are both scriptable and eyeballable. All numeric output is
formatted with a fixed precision to keep reruns byte-identical.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .retrieval import EmbeddingIndex, HubReport, hub_report, hubness_summary

FLOAT_FORMAT = "{:.6f}"


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if np.isnan(value):
            return ""
        return FLOAT_FORMAT.format(value)
    return str(value)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_history_csv(path, history) -> Path:
    """Per-epoch training curve: epoch, train_loss, val_correlation."""
    rows = [(r.epoch, r.train_loss, r.val_correlation) for r in history]
    return write_csv(path, ("epoch", "train_loss", "val_correlation"), rows)


def write_k_occurrence_csv(path, summary_rows) -> Path:
    """Wide k-occurrence table: item_id plus one N_k column per k."""
    ks = [k for k, _, _, _ in summary_rows]
    header = ("item_id", *[f"N_{k}" for k in ks])
    ids = summary_rows[0][1].ids
    columns = [profile.counts for _, profile, _, _ in summary_rows]
    rows = [(item, *[int(col[i]) for col in columns]) for i, item in enumerate(ids)]
    return write_csv(path, header, rows)


def write_metrics_csv(path, metrics: dict) -> Path:
    return write_csv(path, ("metric", "value"),
                     [(k, v) for k, v in metrics.items()])


def write_hub_reports(path, reports: list[HubReport]) -> Path:
    """Structured text records, one per k, blank-line separated."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blocks = []
    for r in reports:
        blocks.append("\n".join([
            f"k: {r.k}",
            f"hub_id: {r.hub_id}",
            f"hub_count: {r.hub_count}",
            f"reverse_queries: {','.join(str(i) for i in r.reverse_query_ids)}",
            f"orphans: {','.join(str(i) for i in r.orphan_ids)}",
            f"orphan_count: {len(r.orphan_ids)}",
            f"skewness: {FLOAT_FORMAT.format(r.skewness)}",
            f"hubness_index: {FLOAT_FORMAT.format(r.index_value)}",
        ]))
    path.write_text("\n\n".join(blocks) + "\n", encoding="utf-8")
    return path


def write_results_csv(path, results) -> Path:
    rows = [(r.config_id, r.regime, r.correlation, r.hubness, r.epoch)
            for r in results]
    return write_csv(path, ("config_id", "regime", "correlation", "hubness", "epoch"),
                     rows)


def write_summary_csv(path, summary_rows) -> Path:
    """Method comparison table; cost rows carry percentage strings."""
    return write_csv(path, ("method", "correlation", "hubness"), summary_rows)


def relative_cost(value: float, reference: float) -> str:
    """Signed percentage change against a reference, e.g. '-8.7%'."""
    if reference == 0:
        return ""
    return f"{100.0 * (value - reference) / reference:+.1f}%"


# -- figures -----------------------------------------------------------------


def render_k_occurrence_histogram(path, summary_rows) -> Path:
    """Histogram of N_k per k, log-scaled counts."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, len(summary_rows),
                             figsize=(3.2 * len(summary_rows), 3.0),
                             squeeze=False)
    for ax, (k, profile, skew, index_value) in zip(axes[0], summary_rows):
        counts = profile.counts
        bins = np.arange(counts.max() + 2) - 0.5
        ax.hist(counts, bins=bins, color="#4878a8", edgecolor="white")
        ax.set_yscale("symlog")
        ax.set_title(f"k={k}  skew={skew:.2f}  idx={index_value:.2f}", fontsize=9)
        ax.set_xlabel("N_k")
    axes[0][0].set_ylabel("items")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_training_history(path, history) -> Path:
    """Loss curve with the validation correlation on a twin axis."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    epochs = [r.epoch for r in history]
    losses = [r.train_loss for r in history]
    corr = [r.val_correlation for r in history]
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    ax.plot(epochs, losses, color="#4878a8", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss")
    if any(np.isfinite(c) for c in corr):
        twin = ax.twinx()
        twin.plot(epochs, corr, color="#a85448", label="val correlation")
        twin.set_ylabel("val correlation")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_summary_bars(path, summary_rows) -> Path:
    """Grouped bars of correlation and hubness per method row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    numeric = [(m, c, h) for m, c, h in summary_rows
               if isinstance(c, float) and isinstance(h, float)]
    if not numeric:
        numeric = [("none", 0.0, 0.0)]
    labels = [m for m, _, _ in numeric]
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(1.6 * len(labels) + 2.5, 3.2))
    ax.bar(x - 0.2, [c for _, c, _ in numeric], width=0.4,
           color="#4878a8", label="correlation")
    ax.bar(x + 0.2, [h for _, _, h in numeric], width=0.4,
           color="#a85448", label="hubness")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def evaluation_reports(out_dir, index: EmbeddingIndex, correlation: float,
                       k_set=(3, 5, 7, 11, 17)) -> dict:
    """Full evaluation bundle: metrics, k-occurrence CSV + figure, hub reports."""
    out = Path(out_dir)
    summary = hubness_summary(index, k_set)
    metrics = {"n_items": index.size, "rating_correlation": correlation}
    for k, profile, skew, idx_val in summary:
        metrics[f"skewness_k{k}"] = skew
        metrics[f"hubness_index_k{k}"] = idx_val
        metrics[f"orphans_k{k}"] = int((profile.counts == 0).sum())
    metrics["hubness_index_mean"] = float(
        np.mean([row[3] for row in summary])
    )
    reports = [hub_report(index, k) for k, _, _, _ in summary]
    paths = {
        "metrics": write_metrics_csv(out / "metrics.csv", metrics),
        "k_occurrences": write_k_occurrence_csv(out / "k_occurrences.csv", summary),
        "hub_reports": write_hub_reports(out / "hub_reports.txt", reports),
        "k_occurrence_figure": render_k_occurrence_histogram(
            out / "k_occurrences.png", summary),
    }
    return {"metrics": metrics, "paths": paths}
