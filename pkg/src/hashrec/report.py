"""Delimited outputs, dataset statistics, and the rendered figures.

Everything the CLI writes that a person might read lands here: flat CSV
and JSON views of evaluation reports and benchmarks, the dataset summary
table, and matplotlib renderings of the loss trace, accuracy curves and
timing trends.  Figures always go through the Agg backend so headless
runs behave.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

import numpy as np  # noqa: E402

__all__ = [
    "accuracy_figure",
    "bench_figure",
    "dataset_stats",
    "format_stats",
    "loss_figure",
    "write_bench_csv",
    "write_eval_csv",
    "write_eval_json",
    "write_loss_csv",
]


def dataset_stats(split):
    """Counts and density of one split, shaped like a dataset table row."""
    n, m = split.n_users, split.n_items
    train = split.train.n_pairs
    total = train + len(split.test_sparse) + len(split.test_cold)
    return {
        "users": n,
        "items": m,
        "positives": total,
        "train_positives": train,
        "test_sparse": len(split.test_sparse),
        "test_cold": len(split.test_cold),
        "cold_items": int(split.cold_items.size),
        "dropped": split.dropped_sparse + split.dropped_cold,
        "density_pct": 100.0 * total / (n * m),
        "sparsity_pct": 100.0 - 100.0 * total / (n * m),
    }


def format_stats(stats):
    """Aligned key/value block for logs and the stats file."""
    width = max(len(k) for k in stats)
    lines = []
    for key, value in stats.items():
        if isinstance(value, float):
            value = f"{value:.2f}"
        lines.append(f"{key:<{width}}  {value}")
    return "\n".join(lines) + "\n"


def write_loss_csv(path, trace):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "loss"])
        for it, loss in enumerate(np.asarray(trace, dtype=np.float64)):
            writer.writerow([it, repr(float(loss))])


def write_eval_json(path, reports, meta=None):
    """One JSON document with both split reports plus run metadata."""
    payload = {
        "format": "hashrec-eval",
        "version": 1,
        "meta": dict(meta or {}),
        "reports": {
            tag: {
                **asdict(rep),
                "accuracy_at_k": {str(k): v for k, v in rep.accuracy_at_k.items()},
            }
            for tag, rep in reports.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def write_eval_csv(path, reports):
    """Flat CSV: one row per (split, metric, k)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["split", "metric", "k", "value"])
        for tag in sorted(reports):
            rep = reports[tag]
            for k in sorted(rep.accuracy_at_k):
                writer.writerow([tag, "accuracy", k, repr(rep.accuracy_at_k[k])])
            writer.writerow([tag, "mrr", "", repr(rep.mrr)])
            writer.writerow([tag, "n_test_cases", "", rep.n_test_cases])
            writer.writerow([tag, "n_negatives", "", rep.n_negatives])
            writer.writerow([tag, "short_cases", "", rep.short_cases])
            writer.writerow([tag, "ns_per_query", "", repr(rep.ns_per_query)])


def write_bench_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["m", "representation", "ns_per_query", "bytes_total"])
        for row in rows:
            writer.writerow(
                [row.m, row.representation, repr(row.ns_per_query), row.bytes_total]
            )


def loss_figure(path, trace):
    fig, ax = plt.subplots(figsize=(6, 4))
    trace = np.asarray(trace, dtype=np.float64)
    ax.plot(np.arange(trace.size), trace, marker="o", markersize=3)
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("objective")
    ax.set_title("training loss trace")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=120)
    plt.close(fig)


def accuracy_figure(path, reports):
    fig, ax = plt.subplots(figsize=(6, 4))
    for tag in sorted(reports):
        rep = reports[tag]
        ks = sorted(rep.accuracy_at_k)
        ax.plot(ks, [rep.accuracy_at_k[k] for k in ks], marker="o",
                markersize=3, label=f"{tag} (mrr={rep.mrr:.3f})")
    ax.set_xlabel("k")
    ax.set_ylabel("accuracy@k")
    ax.set_title("ranking accuracy")
    ax.set_ylim(bottom=0)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=120)
    plt.close(fig)


def bench_figure(path, rows):
    fig, ax = plt.subplots(figsize=(6, 4))
    reps = sorted({row.representation for row in rows})
    for rep in reps:
        pts = sorted((row.m, row.ns_per_query) for row in rows
                     if row.representation == rep)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=rep)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("items")
    ax.set_ylabel("ns per query")
    ax.set_title("top-k retrieval cost")
    ax.legend()
    ax.grid(True, alpha=0.3, which="both")
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=120)
    plt.close(fig)
