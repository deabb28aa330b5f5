"""Offline report rendering: read JSONL metrics (and evaluation summaries)
and write matplotlib figures next to a delimited summary table. Not part of
the training loop; everything here is regenerated from the emitted files."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .runner import PHASE_FINETUNE, MetricsRecord, load_metrics  # noqa: E402


def _group_runs(records: list[MetricsRecord], phase: str):
    """Split records by seed for one phase, preserving episode order."""
    runs = defaultdict(list)
    for rec in records:
        if rec.phase == phase:
            runs[rec.seed].append(rec)
    return dict(sorted(runs.items()))


def plot_cumulative_failures(records_by_label: dict[str, list[MetricsRecord]],
                             out_path: Path, phase: str = PHASE_FINETUNE) -> Path:
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for label, records in records_by_label.items():
        for seed, run in _group_runs(records, phase).items():
            ax.plot([r.global_step for r in run],
                    [r.cumulative_failures for r in run],
                    label=f"{label} seed {seed}", alpha=0.8)
    ax.set_xlabel("environment step")
    ax.set_ylabel("cumulative failures")
    ax.set_title(f"cumulative failures ({phase})")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path


def plot_failure_rate(records_by_label: dict[str, list[MetricsRecord]],
                      out_path: Path, phase: str = PHASE_FINETUNE) -> Path:
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for label, records in records_by_label.items():
        for seed, run in _group_runs(records, phase).items():
            ax.plot([r.global_step for r in run],
                    [r.failure_rate for r in run],
                    label=f"{label} seed {seed}", alpha=0.8)
    ax.set_xlabel("environment step")
    ax.set_ylabel("trailing failure rate")
    ax.set_title(f"trailing-window failure rate ({phase})")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path


def plot_returns(records_by_label: dict[str, list[MetricsRecord]],
                 out_path: Path, phase: str = PHASE_FINETUNE, window: int = 25) -> Path:
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for label, records in records_by_label.items():
        for seed, run in _group_runs(records, phase).items():
            rets = [r.episode_return for r in run]
            smooth = [sum(rets[max(0, i - window + 1): i + 1])
                      / len(rets[max(0, i - window + 1): i + 1]) for i in range(len(rets))]
            ax.plot([r.global_step for r in run], smooth,
                    label=f"{label} seed {seed}", alpha=0.8)
    ax.set_xlabel("environment step")
    ax.set_ylabel(f"episode return (window {window})")
    ax.set_title(f"episode returns ({phase})")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path


def summarize_runs(records_by_label: dict[str, list[MetricsRecord]],
                   phase: str = PHASE_FINETUNE) -> list[dict]:
    rows = []
    for label, records in records_by_label.items():
        for seed, run in _group_runs(records, phase).items():
            if not run:
                continue
            last = run[-1]
            rows.append({
                "label": label,
                "seed": seed,
                "phase": phase,
                "episodes": len(run),
                "cumulative_failures": last.cumulative_failures,
                "final_failure_rate": last.failure_rate,
                "mean_return_last_50": round(
                    sum(r.episode_return for r in run[-50:]) / len(run[-50:]), 6),
                "final_alpha": last.alpha,
                "final_nu": last.nu,
            })
    return rows


def write_summary_csv(rows: list[dict], out_path: Path) -> Path:
    if not rows:
        raise ValueError("no rows to summarize")
    with open(out_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return out_path


def render_report(metrics_paths: list[str], out_dir: str,
                  labels: list[str] | None = None, phase: str = PHASE_FINETUNE) -> list[Path]:
    """Full report path: figures plus summary.csv for a set of metrics files.
    Labels default to the file stems."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if labels is None:
        labels = [Path(p).stem for p in metrics_paths]
    if len(labels) != len(metrics_paths):
        raise ValueError("labels and metrics files must pair up")
    grouped = {}
    for label, p in zip(labels, metrics_paths):
        grouped.setdefault(label, []).extend(load_metrics(p))
    written = [
        plot_cumulative_failures(grouped, out / "cumulative_failures.png", phase=phase),
        plot_failure_rate(grouped, out / "failure_rate.png", phase=phase),
        plot_returns(grouped, out / "returns.png", phase=phase),
        write_summary_csv(summarize_runs(grouped, phase=phase), out / "summary.csv"),
    ]
    return written


def plot_eval_paths(summaries: list[dict], out_path: Path) -> Path:
    """Bar chart of path-class fractions for evaluation summaries (one group
    per threshold)."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    width = 0.25
    classes = ("around", "bridge", "neither")
    for ci, cls in enumerate(classes):
        xs = [i + (ci - 1) * width for i in range(len(summaries))]
        ys = [s[f"{cls}_fraction"] for s in summaries]
        ax.bar(xs, ys, width=width, label=cls)
    ax.set_xticks(range(len(summaries)))
    ax.set_xticklabels([f"eps={s['eps_safe']}" for s in summaries], fontsize=8)
    ax.set_ylabel("fraction of evaluation episodes")
    ax.set_title("path classes by safety threshold")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path


def load_eval_summary(path: str | Path) -> dict:
    with open(path) as fh:
        return json.load(fh)
