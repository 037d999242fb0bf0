"""Delimited outputs, stats tables and figure rendering."""

import json

import numpy as np

from conftest import random_interactions
from hashrec.data import DatasetSplit, SplitSpec
from hashrec.report import (
    accuracy_figure,
    bench_figure,
    dataset_stats,
    format_stats,
    loss_figure,
    write_bench_csv,
    write_eval_csv,
    write_eval_json,
    write_loss_csv,
)
from hashrec.retrieval import BenchRow, EvalReport


def tiny_split(rng):
    train = random_interactions(rng, 6, 10, density=0.5)
    return DatasetSplit(
        train=train,
        test_sparse=np.array([[0, 1], [2, 3]], dtype=np.int64),
        test_cold=np.array([[1, 9]], dtype=np.int64),
        cold_items=np.array([9], dtype=np.int64),
        user_ids={f"u{u}": u for u in range(6)},
        item_ids={f"i{j}": j for j in range(10)},
        spec=SplitSpec(sparsity_level=0.5),
        rep_index=0,
        dropped_sparse=2,
    )


def tiny_reports():
    kwargs = dict(n_negatives=50, ns_per_query=1200.0, short_cases=1)
    sparse = EvalReport(
        split="sparse", accuracy_at_k={1: 0.1, 5: 0.3}, mrr=0.2,
        n_test_cases=40, **kwargs,
    )
    cold = EvalReport(
        split="cold", accuracy_at_k={1: 0.05, 5: 0.15}, mrr=0.1,
        n_test_cases=10, **kwargs,
    )
    return {"sparse": sparse, "cold": cold}


def test_dataset_stats_adds_up(rng):
    split = tiny_split(rng)
    stats = dataset_stats(split)
    assert stats["users"] == 6
    assert stats["items"] == 10
    assert stats["train_positives"] == split.train.n_pairs
    assert stats["positives"] == split.train.n_pairs + 2 + 1
    assert stats["test_cold"] == 1
    assert stats["dropped"] == 2
    assert abs(stats["density_pct"] + stats["sparsity_pct"] - 100.0) < 1e-9
    table = format_stats(stats)
    lines = table.splitlines()
    assert len(lines) == len(stats)
    assert all(len(line.split()) == 2 for line in lines)


def test_eval_csv_layout(tmp_path):
    path = tmp_path / "eval.csv"
    write_eval_csv(path, tiny_reports())
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "split,metric,k,value"
    acc_rows = [l for l in lines if ",accuracy,," not in l and ",accuracy," in l]
    assert len(acc_rows) == 4  # two k values per split
    assert any(l.startswith("sparse,mrr,,") for l in lines)
    assert any(l.startswith("cold,short_cases,,") for l in lines)


def test_eval_json_stringifies_k(tmp_path):
    path = tmp_path / "eval.json"
    write_eval_json(path, tiny_reports(), meta={"seed": 3})
    payload = json.loads(path.read_text())
    assert payload["format"] == "hashrec-eval"
    assert payload["meta"]["seed"] == 3
    assert payload["reports"]["sparse"]["accuracy_at_k"]["5"] == 0.3


def test_loss_and_bench_csv(tmp_path):
    loss_path = tmp_path / "loss.csv"
    write_loss_csv(loss_path, np.array([3.0, 2.5, 2.25]))
    lines = loss_path.read_text().strip().splitlines()
    assert lines[0] == "iteration,loss"
    assert lines[1] == "0,3.0"
    assert len(lines) == 4

    rows = [
        BenchRow(m=100, representation="hamming", ns_per_query=10.0, bytes_total=800),
        BenchRow(m=100, representation="float64", ns_per_query=99.0, bytes_total=51200),
    ]
    bench_path = tmp_path / "bench.csv"
    write_bench_csv(bench_path, rows)
    lines = bench_path.read_text().strip().splitlines()
    assert lines[0] == "m,representation,ns_per_query,bytes_total"
    assert lines[1].startswith("100,hamming,")


def test_figures_render_png(tmp_path):
    targets = {
        "loss": (loss_figure, (np.array([3.0, 2.0, 1.5]),)),
        "acc": (accuracy_figure, (tiny_reports(),)),
        "bench": (bench_figure, ([
            BenchRow(100, "hamming", 10.0, 800),
            BenchRow(100, "float64", 99.0, 51200),
            BenchRow(1000, "hamming", 20.0, 8000),
            BenchRow(1000, "float64", 400.0, 512000),
        ],)),
    }
    for name, (fn, args) in targets.items():
        path = tmp_path / f"{name}.png"
        fn(path, *args)
        assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n", name
