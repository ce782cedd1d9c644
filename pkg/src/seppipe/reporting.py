"""Report rendering: JSON, a delimited per-utterance table, and summary
figures written next to each other under a report directory.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .evaluation import EvalReport

CSV_FIELDS = ["id", "assignment", "permutation", "si_snr_db", "si_snri_db",
              "sdr_db", "sir_db", "sar_db"]


def write_report(reports: dict, out_dir, name: str = "report") -> Path:
    """Write {assignment_mode: EvalReport} as JSON + CSV + figures.

    Produces <name>.json, <name>_utterances.csv and figures/*.png under
    out_dir; returns the JSON path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    payload = {mode: rep.to_dict() for mode, rep in reports.items()}
    json_path = out_dir / f"{name}.json"
    with open(json_path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)

    csv_path = out_dir / f"{name}_utterances.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for rep in reports.values():
            for row in rep.utterances:
                flat = dict(row)
                flat["permutation"] = "-".join(str(p) for p in row.get("permutation", []))
                writer.writerow(flat)

    fig_dir = out_dir / "figures"
    fig_dir.mkdir(exist_ok=True)
    _histogram_figure(reports, fig_dir / f"{name}_si_snri_hist.png")
    _summary_figure(reports, fig_dir / f"{name}_summary.png")
    return json_path


def _histogram_figure(reports: dict, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    plotted = False
    for mode, rep in reports.items():
        key = "si_snri_db" if any("si_snri_db" in u for u in rep.utterances) else "si_snr_db"
        vals = [u[key] for u in rep.utterances if key in u]
        if vals:
            ax.hist(vals, bins=20, alpha=0.6, label=f"{mode} ({key})")
            plotted = True
    ax.set_xlabel("dB")
    ax.set_ylabel("utterances")
    ax.set_title("Per-utterance separation quality")
    if plotted:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _summary_figure(reports: dict, path: Path) -> None:
    metrics = ["si_snr_db", "si_snri_db", "sdr_db", "sir_db", "sar_db"]
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(len(reports), 1)
    for i, (mode, rep) in enumerate(reports.items()):
        xs, ys = [], []
        for j, m in enumerate(metrics):
            if m in rep.summary:
                xs.append(j + i * width)
                ys.append(rep.summary[m])
        ax.bar(xs, ys, width=width, label=mode)
    ax.set_xticks(range(len(metrics)))
    ax.set_xticklabels(metrics, rotation=20)
    ax.set_ylabel("dB (mean)")
    ax.set_title("Summary metrics")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def combined_report_dict(reports: dict) -> dict:
    return {mode: rep.to_dict() for mode, rep in reports.items()}


__all__ = ["write_report", "combined_report_dict", "EvalReport", "CSV_FIELDS"]
