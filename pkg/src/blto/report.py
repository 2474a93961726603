"""Aggregate completed runs into delimited tables and rendered figures.

Each input run directory is expected to contain one or more
``victim-<method>/`` subdirectories with a ``metrics.csv`` ledger and a
``header.json`` identity record, as written by the CLI pipeline.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import MetricsRecord, read_metrics


@dataclass
class RunSeries:
    run_name: str
    attack: str
    method: str
    records: list[MetricsRecord]

    @property
    def label(self) -> str:
        return f"{self.run_name}:{self.attack}/{self.method}"


class ReportError(RuntimeError):
    pass


def collect_runs(run_dirs: list[Path]) -> tuple[list[RunSeries], list[str]]:
    """Scan run directories for victim ledgers; returns (series, problems)."""
    series: list[RunSeries] = []
    problems: list[str] = []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        victim_dirs = sorted(run_dir.glob("victim-*"))
        if not victim_dirs:
            problems.append(f"{run_dir}: no victim-*/ ledger directories")
            continue
        for victim_dir in victim_dirs:
            metrics_path = victim_dir / "metrics.csv"
            header_path = victim_dir / "header.json"
            if not metrics_path.is_file():
                problems.append(f"{victim_dir}: missing metrics.csv")
                continue
            header = {}
            if header_path.is_file():
                header = json.loads(header_path.read_text())
            records = read_metrics(metrics_path)
            if not records:
                problems.append(f"{victim_dir}: empty ledger")
                continue
            series.append(
                RunSeries(
                    run_name=header.get("run_name", run_dir.name),
                    attack=header.get("attack_kind", "unknown"),
                    method=header.get("method", victim_dir.name.removeprefix("victim-")),
                    records=records,
                )
            )
    return series, problems


def _curve_panel(ax, series_list: list[RunSeries], field: str, title: str) -> None:
    for series in series_list:
        epochs = [r.epoch for r in series.records]
        values = [getattr(r, field) for r in series.records]
        ax.plot(epochs, values, label=series.label, linewidth=1.4)
    ax.set_xlabel("epoch")
    ax.set_ylabel(field)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)


def _save_combined_figures(series: list[RunSeries], out_dir: Path) -> list[Path]:
    panels = [
        ("s_n", "normalized similarity", "similarity_vs_epoch.png"),
        ("asr", "attack success rate", "asr_vs_epoch.png"),
        ("alignment", "alignment loss (backdoored data)", "alignment_vs_epoch.png"),
        ("uniformity", "uniformity loss (backdoored data)", "uniformity_vs_epoch.png"),
    ]
    written = []
    for field, title, filename in panels:
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        _curve_panel(ax, series, field, title)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / filename
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def _save_run_curves(series: RunSeries, out_dir: Path) -> Path:
    fig, axes = plt.subplots(2, 2, figsize=(9.0, 6.5))
    for ax, (field, title) in zip(
        axes.flat,
        [
            ("s_n", "normalized similarity"),
            ("asr", "attack success rate"),
            ("alignment", "alignment loss"),
            ("uniformity", "uniformity loss"),
        ],
    ):
        _curve_panel(ax, [series], field, title)
    fig.suptitle(series.label)
    fig.tight_layout()
    safe = series.label.replace("/", "-").replace(":", "_")
    path = out_dir / f"{safe}.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_report(run_dirs: list[str | Path], out_dir: str | Path) -> tuple[Path, list[str]]:
    """Summary table plus figures; returns (summary path, skipped problems).

    Raises :class:`ReportError` before writing anything if no usable ledgers
    were found, so a failed report leaves no partial files.
    """
    series, problems = collect_runs([Path(d) for d in run_dirs])
    if not series:
        raise ReportError(
            "no usable run ledgers found: " + ("; ".join(problems) or "no inputs")
        )

    out = Path(out_dir)
    curves_dir = out / "curves"
    curves_dir.mkdir(parents=True, exist_ok=True)

    summary_path = out / "summary.csv"
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["attack", "method", "BA", "ASR"])
        for s in series:
            final = s.records[-1]
            writer.writerow([s.attack, s.method, format(final.ba, ".4f"), format(final.asr, ".4f")])

    _save_combined_figures(series, out)
    for s in series:
        _save_run_curves(s, curves_dir)
    return summary_path, problems


def save_backdoor_example(
    original: np.ndarray, backdoored: np.ndarray, path: str | Path
) -> Path:
    """Side-by-side original, backdoored, and amplified-difference panels."""
    diff = np.abs(backdoored - original)
    amplified = diff / max(float(diff.max()), 1e-8)
    fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.8))
    for ax, img, title in zip(
        axes, [original, backdoored, amplified], ["intact", "backdoored", "trigger (scaled)"]
    ):
        ax.imshow(np.clip(img.transpose(1, 2, 0), 0.0, 1.0))
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
