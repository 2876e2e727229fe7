"""Tables and plots derived from result files."""

from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import UndefinedMetricError  # noqa: E402
from .evaluation import asr  # noqa: E402
from .io import read_records, write_csv, write_json  # noqa: E402


def summarize_records(records, ks=(1, 5)):
    """One row per (condition, target): ASR@k for each ``k`` plus record counts."""
    groups = OrderedDict()
    for r in records:
        groups.setdefault((r.condition, r.target_label), []).append(r)
    rows = []
    for (condition, target), recs in groups.items():
        row = {"condition": condition, "target_label": target, "n_records": len(recs),
               "n_images": len({r.image_id for r in recs})}
        for k in ks:
            try:
                row[f"asr@{k}"] = asr(recs, k)
            except UndefinedMetricError:
                row[f"asr@{k}"] = None
        rows.append(row)
    return rows


def _asr_bars(rows, ks, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.8 / len(ks)
    labels = [f"{r['condition']} (t={r['target_label']})" for r in rows]
    for j, k in enumerate(ks):
        vals = [r[f"asr@{k}"] or 0.0 for r in rows]
        ax.bar([i + j * width for i in range(len(rows))], vals, width, label=f"ASR@{k}")
    ax.set_xticks([i + width * (len(ks) - 1) / 2 for i in range(len(rows))])
    ax.set_xticklabels(labels)
    ax.set_ylim(0, 1)
    ax.set_ylabel("attack success rate")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _curve_plots(curve, out_dir, stem):
    rho = curve["fractions"]
    fig, ax = plt.subplots(figsize=(6, 4))
    for i in range(4):
        ax.plot(rho, [s[i] for s in curve["mean_scores"]], marker="o", label=f"CLIP Score {i + 1}")
    ax.set_xlabel("fraction of attacked keyframes")
    ax.set_ylabel("mean CLIP score")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / f"{stem}_scores.png")
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(rho, curve["asr_1_4"], marker="o", label="ASR1&4")
    ax.plot(rho, curve["asr_1_2"], marker="s", label="ASR1&2")
    ax.set_xlabel("fraction of attacked keyframes")
    ax.set_ylabel("attack success rate")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / f"{stem}_asr.png")
    plt.close(fig)


def write_report(inputs, out_dir, ks=(1, 5)):
    """Emit CSV/JSON tables and PNG plots for each results (.jsonl) or video curve (.json) file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for path in map(Path, inputs):
        stem = path.stem
        if path.suffix == ".jsonl":
            rows = summarize_records(read_records(path), ks)
            cols = ["condition", "target_label", "n_records", "n_images"] + [f"asr@{k}" for k in ks]
            write_csv(out_dir / f"{stem}_metrics.csv", rows, cols)
            write_json(out_dir / f"{stem}_metrics.json", rows)
            _asr_bars(rows, ks, out_dir / f"{stem}_asr_bars.png")
            written += [f"{stem}_metrics.csv", f"{stem}_metrics.json", f"{stem}_asr_bars.png"]
        else:
            with open(path) as fh:
                curve = json.load(fh)
            rows = [{"fraction": f, "asr_1_4": a, "asr_1_2": b, "s1": s[0], "s2": s[1], "s3": s[2], "s4": s[3]}
                    for f, a, b, s in zip(curve["fractions"], curve["asr_1_4"], curve["asr_1_2"],
                                          curve["mean_scores"])]
            write_csv(out_dir / f"{stem}_curve.csv", rows, list(rows[0]))
            _curve_plots(curve, out_dir, stem)
            written += [f"{stem}_curve.csv", f"{stem}_scores.png", f"{stem}_asr.png"]
    return written
