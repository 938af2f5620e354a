"""Matplotlib figure rendering for the report paths.

Each reporting subcommand can drop a PNG next to its delimited/JSON
output; everything here is headless (Agg).
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .align import AlignmentReport  # noqa: E402
from .ppl import PplReport  # noqa: E402


def render_alignment_figure(report: AlignmentReport, path: Path) -> None:
    """Bar chart of round outcomes (accepted / unchanged / unqualified / failures)."""
    labels = ["Accepted", "Unchanged", "Unqualified", "Failures"]
    values = [
        report.accepted,
        report.unchanged_by_choice,
        report.unqualified,
        report.rewrite_failures,
    ]
    fig, ax = plt.subplots(figsize=(6, 4))
    bars = ax.bar(labels, values, color=["#4c72b0", "#8ca6c9", "#dd8452", "#c44e52"])
    ax.bar_label(bars)
    ax.set_ylabel("rounds")
    ax.set_title(f"Alignment outcomes ({report.total_rounds} rounds)")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_ppl_figure(report: PplReport, path: Path) -> None:
    """Histogram of per-round perplexity with the corpus-level value marked."""
    values = [value for _src, value in report.per_round_ppl]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(values, bins=min(40, max(5, len(values) // 5)), color="#4c72b0", alpha=0.8)
    ax.axvline(report.corpus_ppl, color="#c44e52", linestyle="--",
               label=f"corpus PPL = {report.corpus_ppl:.3f}")
    ax.set_xlabel("per-round perplexity")
    ax.set_ylabel("rounds")
    ax.set_title(f"Answer perplexity under {report.backend_name}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_partition_figure(class_counts: Dict[str, int], path: Path) -> None:
    """Bar chart of record counts per partition class."""
    labels: List[str] = list(class_counts)
    values = [class_counts[k] for k in labels]
    fig, ax = plt.subplots(figsize=(max(6, len(labels)), 4))
    bars = ax.bar(labels, values, color="#4c72b0")
    ax.bar_label(bars)
    ax.set_ylabel("records")
    ax.set_title("Trainset partition")
    plt.setp(ax.get_xticklabels(), rotation=30, ha="right")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
