"""Command line surface: synth, prepare, train, eval, bench.

Each subcommand reads one RunConfig (file plus flag overrides, flags win),
writes its outputs under `out_dir` through temp-and-rename so failures
never leave half-written files, and drops a JSON manifest with the config
echo, seeds, versions and content hashes needed to reproduce the run.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import time
import typing
from contextlib import contextmanager
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    RunConfig,
    apply_overrides,
    load_config,
    paper_scale,
    resolve_threads,
    to_text,
)
from .dae import DaeParams, pretrain
from .data import (
    binarize,
    build_content,
    index_feedback,
    load_content,
    load_corpus,
    load_split,
    save_content,
    save_split,
    split_dataset,
    write_documents_jsonl,
    write_interactions_csv,
)
from .errors import ArtifactError, ConfigError, HashrecError
from .report import (
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
from .retrieval import bench_retrieval, evaluate
from .solver import fit, load_model, save_model
from .synth import SynthSpec, generate, save_ground_truth

log = logging.getLogger("hashrec")

SPLIT_FILE = "split.json"
CONTENT_FILE = "content.npz"
MODEL_FILE = "model.bin"


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@contextmanager
def _atomic(path):
    """Yield a temp path, rename onto `path` only if the body succeeds."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


@contextmanager
def _phase(name):
    log.info("[%s] start", name)
    began = time.perf_counter()
    try:
        yield
    except Exception:
        log.error("[%s] failed", name)
        raise
    log.info("[%s] done in %.2fs", name, time.perf_counter() - began)


def _write_manifest(out_dir, command, cfg, inputs, outputs, extra=None):
    payload = {
        "format": "hashrec-manifest",
        "command": command,
        "package_version": __version__,
        "numpy_version": np.__version__,
        "config": to_text(cfg).splitlines(),
        "inputs": {str(k): v for k, v in inputs.items()},
        "outputs": {str(k): v for k, v in outputs.items()},
    }
    payload.update(extra or {})
    path = Path(out_dir) / f"{command}_manifest.json"
    with _atomic(path) as tmp:
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, indent=1)
            fh.write("\n")
    return path


def _hash_outputs(paths):
    return {Path(p).name: _sha256(p) for p in paths}


# ------------------------------------------------------------- subcommands


def cmd_synth(cfg, args):
    spec_values = {
        name: getattr(args, f"synth_{name}")
        for name in _SYNTH_TYPES
        if getattr(args, f"synth_{name}") is not None
    }
    spec = SynthSpec(**spec_values)
    out = Path(cfg.out_dir)
    with _phase("synth"):
        raw, truth = generate(spec)
        inter_path = out / "interactions.csv"
        docs_path = out / "documents.jsonl"
        truth_path = out / "ground_truth.json"
        with _atomic(inter_path) as tmp:
            write_interactions_csv(tmp, raw.interactions)
        with _atomic(docs_path) as tmp:
            write_documents_jsonl(tmp, raw.documents)
        with _atomic(truth_path) as tmp:
            save_ground_truth(tmp, truth)
    log.info(
        "[synth] %d interactions, %d documents, %d cold-flagged items",
        len(raw.interactions), len(raw.documents), len(truth.cold_items),
    )
    _write_manifest(
        out, "synth", cfg,
        inputs={}, outputs=_hash_outputs([inter_path, docs_path, truth_path]),
        extra={"synth_spec": truth.params},
    )
    return 0


def cmd_prepare(cfg, args):
    for role, path in (("interactions", cfg.interactions), ("documents", cfg.documents)):
        if not Path(path).is_file():
            raise ConfigError(f"missing {role} file: {path}")
    out = Path(cfg.out_dir)
    with _phase("load"):
        raw = load_corpus(cfg.interactions, cfg.documents)
        feedback = index_feedback(binarize(raw))
    with _phase("content"):
        content, vocab = build_content(
            raw, feedback.item_ids, cfg.vocab_cap, stem=cfg.stem
        )
    with _phase("split"):
        split = split_dataset(feedback, content, cfg.split_spec(), cfg.rep_index)
    split_path = out / SPLIT_FILE
    content_path = out / CONTENT_FILE
    stats_path = out / "stats.txt"
    with _atomic(split_path) as tmp:
        save_split(split, tmp)
    with _atomic(content_path) as tmp:
        with open(tmp, "wb") as fh:
            save_content(content, fh)
    stats = dataset_stats(split)
    table = format_stats(stats)
    with _atomic(stats_path) as tmp:
        tmp.write_text(table, encoding="utf-8")
    print(table, end="")
    _write_manifest(
        out, "prepare", cfg,
        inputs=_hash_outputs([cfg.interactions, cfg.documents]),
        outputs=_hash_outputs([split_path, content_path, stats_path]),
        extra={"stats": stats, "vocabulary_size": len(vocab)},
    )
    return 0


def cmd_train(cfg, args):
    out = Path(cfg.out_dir)
    split_path = out / SPLIT_FILE
    content_path = out / CONTENT_FILE
    for path in (split_path, content_path):
        if not path.is_file():
            raise ConfigError(f"missing prepared input: {path} (run prepare first)")
    split = load_split(split_path)
    content = load_content(content_path)
    threads = resolve_threads(cfg.threads)
    wall = {}

    began = time.perf_counter()
    with _phase("pretrain"):
        params = DaeParams.init(
            cfg.dae_layers(content.vectors.shape[1]),
            delta=cfg.weight_decay,
            corruption=cfg.corruption,
            seed=cfg.dae_seed,
        )
        losses = pretrain(params, content, cfg.pretrain_config())
        if losses:
            log.info("[pretrain] first=%.6f last=%.6f", losses[0], losses[-1])
    wall["pretrain"] = time.perf_counter() - began

    began = time.perf_counter()
    with _phase("solve"):
        dae_cfg = cfg.finetune_config() if cfg.finetune_epochs > 0 else None
        result = fit(
            split.train, content, params, cfg.hyper_params(),
            dae_cfg=dae_cfg, threads=threads,
        )
        for it, loss in enumerate(result.loss_trace):
            log.info("[solve] iter=%d loss=%.6f", it, loss)
        log.info(
            "[solve] %d iterations, converged=%s", result.n_iters, result.converged
        )
    wall["solve"] = time.perf_counter() - began

    model_path = out / MODEL_FILE
    trace_path = out / "loss_trace.csv"
    curve_path = out / "loss_curve.png"
    with _atomic(model_path) as tmp:
        save_model(
            tmp, result,
            id_maps_ref=SPLIT_FILE, id_maps_sha256=_sha256(split_path),
        )
    with _atomic(trace_path) as tmp:
        write_loss_csv(tmp, result.loss_trace)
    with _atomic(curve_path) as tmp:
        loss_figure(tmp, result.loss_trace)
    _write_manifest(
        out, "train", cfg,
        inputs=_hash_outputs([split_path, content_path]),
        outputs=_hash_outputs([model_path, trace_path, curve_path]),
        extra={
            "wall_times": wall,
            "threads": threads,
            "n_iters": result.n_iters,
            "converged": result.converged,
        },
    )
    return 0


def cmd_eval(cfg, args):
    out = Path(cfg.out_dir)
    split_path = out / SPLIT_FILE
    content_path = out / CONTENT_FILE
    model_path = out / MODEL_FILE
    for path in (split_path, content_path, model_path):
        if not path.is_file():
            raise ConfigError(f"missing input: {path}")
    split = load_split(split_path)
    content = load_content(content_path)
    artifact = load_model(model_path)
    split_sha = _sha256(split_path)
    if artifact.id_maps_sha256 is not None and artifact.id_maps_sha256 != split_sha:
        raise ArtifactError(
            f"model was trained on a different split "
            f"({artifact.id_maps_sha256[:12]} != {split_sha[:12]})"
        )
    if (
        artifact.user_codes.count != split.n_users
        or artifact.item_codes.count != split.n_items
    ):
        raise ArtifactError("model shape does not match the split")

    with _phase("evaluate"):
        reports = evaluate(
            split,
            artifact.user_codes,
            artifact.item_codes,
            artifact.dae,
            content,
            n_negatives=cfg.n_negatives,
            k_max=cfg.k_max,
            seed=cfg.eval_seed,
            threads=resolve_threads(cfg.threads),
        )
    for tag in sorted(reports):
        rep = reports[tag]
        log.info(
            "[evaluate] %s: cases=%d mrr=%.4f acc@10=%.4f short=%d",
            tag, rep.n_test_cases, rep.mrr,
            rep.accuracy_at_k.get(10, float("nan")), rep.short_cases,
        )
    meta = {
        "artifact_sha256": _sha256(model_path),
        "n_negatives": cfg.n_negatives,
        "k_max": cfg.k_max,
        "seed": cfg.eval_seed,
        "negatives_rule": (
            "sampled from items outside the user's train positives and the "
            "test item itself; other test positives stay eligible"
        ),
    }
    json_path = out / "eval_report.json"
    csv_path = out / "eval_report.csv"
    fig_path = out / "accuracy.png"
    with _atomic(json_path) as tmp:
        write_eval_json(tmp, reports, meta)
    with _atomic(csv_path) as tmp:
        write_eval_csv(tmp, reports)
    with _atomic(fig_path) as tmp:
        accuracy_figure(tmp, reports)
    _write_manifest(
        out, "eval", cfg,
        inputs=_hash_outputs([split_path, content_path, model_path]),
        outputs=_hash_outputs([json_path, csv_path, fig_path]),
        extra={"meta": meta},
    )
    return 0


def cmd_bench(cfg, args):
    out = Path(cfg.out_dir)
    with _phase("bench"):
        rows = bench_retrieval(
            cfg.bench_m,
            r=cfg.bench_r,
            trials=cfg.bench_trials,
            seed=cfg.bench_seed,
            n_queries=cfg.bench_queries,
        )
    for row in rows:
        log.info(
            "[bench] m=%d %s: %.0f ns/query, %d bytes",
            row.m, row.representation, row.ns_per_query, row.bytes_total,
        )
    csv_path = out / "bench.csv"
    fig_path = out / "bench.png"
    with _atomic(csv_path) as tmp:
        write_bench_csv(tmp, rows)
    with _atomic(fig_path) as tmp:
        bench_figure(tmp, rows)
    _write_manifest(
        out, "bench", cfg,
        inputs={}, outputs=_hash_outputs([csv_path, fig_path]),
    )
    return 0


# ------------------------------------------------------------------ wiring

_COMMANDS = {
    "synth": (cmd_synth, "generate a planted-block synthetic corpus"),
    "prepare": (cmd_prepare, "vectorise documents and carve the split"),
    "train": (cmd_train, "pretrain the encoder and learn the hash codes"),
    "eval": (cmd_eval, "score the sparse and cold test sets"),
    "bench": (cmd_bench, "time packed against float retrieval"),
}

_CFG_FIELDS = [f.name for f in fields(RunConfig)]
_SYNTH_TYPES = typing.get_type_hints(SynthSpec)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hashrec",
        description="binary hash codes for implicit-feedback recommendation",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="FILE", help="key = value config file")
        p.add_argument(
            "--paper-scale", action="store_true",
            help="use the published hyperparameters (overridden by flags)",
        )
        p.add_argument("-v", "--verbose", action="store_true")
        p.add_argument("-q", "--quiet", action="store_true")
        for field in _CFG_FIELDS:
            p.add_argument(
                "--" + field.replace("_", "-"),
                dest=f"cfg_{field}", metavar="V",
                help=argparse.SUPPRESS,
            )
        if name == "synth":
            for sname, kind in _SYNTH_TYPES.items():
                p.add_argument(
                    "--" + sname.replace("_", "-"),
                    dest=f"synth_{sname}", type=kind, metavar="V",
                )
    return parser


def _config_from_args(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.paper_scale:
        cfg = paper_scale(cfg)
    overrides = {
        name: getattr(args, f"cfg_{name}")
        for name in _CFG_FIELDS
        if getattr(args, f"cfg_{name}") is not None
    }
    return apply_overrides(cfg, overrides)


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(level)
    try:
        cfg = _config_from_args(args)
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command][0](cfg, args)
    except (HashrecError, OSError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
