"""Run reports: flat key-value text, JSON, CSV tables, and figures.

Everything lands in one report directory. Figures are rendered with the
Agg backend so report generation works headless.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["write_report"]


def _flat_lines(data: dict, prefix: str = "") -> list[str]:
    lines = []
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            lines += _flat_lines(value, prefix=f"{name}.")
        elif isinstance(value, (list, tuple)):
            lines.append(f"{name} = {' '.join(str(v) for v in value)}")
        else:
            lines.append(f"{name} = {value}")
    return lines


def _plot_loss_curve(history, path: Path) -> None:
    steps = [s for s, _ in history]
    losses = [l for _, l in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, losses, lw=1.2)
    ax.set_xlabel("training step")
    ax.set_ylabel("anchor L1 loss")
    ax.set_yscale("log")
    ax.set_title("Global correction training")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_per_view_errors(stages: dict[str, list[float]], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    names = list(stages)
    n_views = max(len(v) for v in stages.values())
    x = np.arange(n_views)
    width = 0.8 / max(len(names), 1)
    for i, name in enumerate(names):
        vals = stages[name]
        ax.bar(x + i * width, vals, width=width, label=name)
    ax.set_xlabel("view")
    ax.set_ylabel("mean depth L1")
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels([str(i) for i in range(n_views)])
    ax.legend(fontsize=8)
    ax.set_title("Per-view depth error by stage")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_timings(timings: list[tuple[str, float]], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 0.5 * len(timings) + 1.5))
    names = [t[0] for t in timings]
    secs = [t[1] for t in timings]
    ax.barh(range(len(names)), secs, color="tab:blue")
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel("seconds")
    ax.set_title("Stage timing")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_cycle_errors(errors: np.ndarray, threshold: float, path: Path) -> None:
    finite = errors[np.isfinite(errors)]
    fig, ax = plt.subplots(figsize=(6, 4))
    if finite.size:
        ax.hist(np.clip(finite, 0, 5 * threshold), bins=60, color="tab:orange")
    ax.axvline(threshold, color="k", ls="--", lw=1, label=f"threshold {threshold} px")
    ax.set_xlabel("mean cycle reprojection error (px)")
    ax.set_ylabel("points")
    ax.legend(fontsize=8)
    ax.set_title("Reliability filter input")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(
    report_dir,
    summary: dict,
    timings: list[tuple[str, float]] | None = None,
    loss_history: list[tuple[int, float]] | None = None,
    per_view_errors: dict[str, list[float]] | None = None,
    cycle_errors: np.ndarray | None = None,
    threshold_px: float = 1.0,
) -> None:
    """Write report.txt / report.json, CSV tables, and PNG figures."""
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)

    payload = dict(summary)
    if timings:
        payload["timing_seconds"] = {name: secs for name, secs in timings}
    (report_dir / "report.json").write_text(json.dumps(payload, indent=2) + "\n")

    lines = _flat_lines(summary)
    if timings:
        lines += [f"timing.{name} = {secs:.3f}" for name, secs in timings]
    (report_dir / "report.txt").write_text("\n".join(lines) + "\n")

    if timings:
        with open(report_dir / "timing.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["stage", "seconds"])
            writer.writerows([(name, f"{secs:.6f}") for name, secs in timings])
        _plot_timings(timings, report_dir / "stage_timing.png")

    if per_view_errors:
        with open(report_dir / "per_view_errors.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            stages = list(per_view_errors)
            writer.writerow(["view"] + stages)
            n = max(len(v) for v in per_view_errors.values())
            for i in range(n):
                writer.writerow(
                    [i] + [f"{per_view_errors[s][i]:.9g}" for s in stages]
                )
        _plot_per_view_errors(per_view_errors, report_dir / "depth_error_per_view.png")

    if loss_history:
        _plot_loss_curve(loss_history, report_dir / "training_loss.png")

    if cycle_errors is not None and len(cycle_errors):
        _plot_cycle_errors(cycle_errors, threshold_px, report_dir / "cycle_error_hist.png")
