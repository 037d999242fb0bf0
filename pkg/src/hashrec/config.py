"""Run configuration: flat key = value files with full flag overrides.

One RunConfig drives every subcommand.  The file format is TOML-style
text, one `key = value` per line with `#` comments and optional section
headers that are skipped, so manifests stay greppable.  Defaults are desk
scale (small codes, small nets, minutes not hours); `paper_scale` swaps
in the published hyperparameters where they differ.
"""

from __future__ import annotations

import os
import typing
from dataclasses import dataclass, fields, replace

from .core import HyperParams
from .dae import TrainConfig
from .data import SplitSpec
from .errors import ConfigError

__all__ = [
    "RunConfig",
    "apply_overrides",
    "load_config",
    "paper_scale",
    "resolve_threads",
    "to_text",
]

THREADS_ENV = "HASHREC_THREADS"


@dataclass(frozen=True)
class RunConfig:
    """Everything a pipeline run needs, in one flat namespace."""

    # paths
    interactions: str = "interactions.csv"
    documents: str = "documents.jsonl"
    out_dir: str = "out"
    # split
    sparsity_level: float = 0.7
    cold_threshold: int = 5
    repetitions: int = 5
    split_seed: int = 0
    rep_index: int = 0
    # content
    vocab_cap: int = 2000
    stem: bool = False
    # codes and solver
    n_bits: int = 16
    alpha: float = 1e-5
    beta: float = 1e-3
    lam: float = 1e-3
    outer_iters: int = 30
    dcd_max_passes: int = 3
    neg_samples: int | None = None
    solver_seed: int = 0
    # autoencoder
    hidden_dims: tuple[int, ...] = (64,)
    corruption: float = 0.3
    weight_decay: float = 1e-4
    learning_rate: float = 0.1
    batch_size: int = 32
    pretrain_epochs: int = 15
    finetune_epochs: int = 5
    dae_seed: int = 0
    # evaluation
    n_negatives: int = 1000
    k_max: int = 20
    eval_seed: int = 0
    # benchmark
    bench_m: tuple[int, ...] = (200_000, 400_000)
    bench_r: int = 64
    bench_trials: int = 5
    bench_queries: int = 8
    bench_seed: int = 0
    # execution
    threads: int = 0  # 0 means HASHREC_THREADS or 1

    def split_spec(self):
        return SplitSpec(
            sparsity_level=self.sparsity_level,
            cold_threshold=self.cold_threshold,
            repetitions=self.repetitions,
            seed=self.split_seed,
        )

    def hyper_params(self):
        return HyperParams(
            alpha=self.alpha,
            beta=self.beta,
            lam=self.lam,
            n_bits=self.n_bits,
            outer_iters=self.outer_iters,
            dcd_max_passes=self.dcd_max_passes,
            seed=self.solver_seed,
            neg_samples=self.neg_samples,
        )

    def dae_layers(self, input_dim):
        middle = list(self.hidden_dims)
        return [input_dim, *middle, self.n_bits, *reversed(middle), input_dim]

    def pretrain_config(self):
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.pretrain_epochs,
            seed=self.dae_seed,
        )

    def finetune_config(self):
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.finetune_epochs,
            seed=self.dae_seed + 1,
        )


def paper_scale(cfg):
    """The published hyperparameters where they differ from desk scale."""
    return replace(
        cfg,
        n_bits=30,
        lam=20.0,
        hidden_dims=(200,),
        vocab_cap=8000,
        outer_iters=50,
    )


def _field_types():
    hints = typing.get_type_hints(RunConfig)
    return {f.name: hints[f.name] for f in fields(RunConfig)}


_TYPES = _field_types()


def _cast(key, text, where):
    kind = _TYPES[key]
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        text = text[1:-1]
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        if kind == int | None:
            return None if text.lower() in ("none", "") else int(text)
        if typing.get_origin(kind) is tuple:
            parts = [p for p in text.replace(",", " ").split() if p]
            return tuple(int(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key}: {exc}") from exc
    raise ConfigError(f"{where}: no parser for field {key}")


def load_config(path):
    """Parse a key = value config file on top of the defaults."""
    values = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for line_no, line in enumerate(lines, start=1):
        where = f"{path}:{line_no}"
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            continue  # section headers are decorative
        if " #" in stripped:
            stripped = stripped[: stripped.index(" #")].rstrip()
        if "=" not in stripped:
            raise ConfigError(f"{where}: expected key = value, got {stripped!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in _TYPES:
            raise ConfigError(f"{where}: unknown key {key!r}")
        values[key] = _cast(key, value, where)
    return replace(RunConfig(), **values)


def apply_overrides(cfg, raw_pairs):
    """Layer raw string overrides (flag values) on top of a config."""
    values = {}
    for key, text in raw_pairs.items():
        if key not in _TYPES:
            raise ConfigError(f"unknown config field {key!r}")
        values[key] = _cast(key, text, f"--{key.replace('_', '-')}")
    return replace(cfg, **values)


def to_text(cfg):
    """Render a config as the same key = value lines the parser reads."""
    out = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ", ".join(str(v) for v in value)
        elif value is None:
            value = "none"
        elif isinstance(value, bool):
            value = "true" if value else "false"
        out.append(f"{f.name} = {value}")
    return "\n".join(out) + "\n"


def resolve_threads(value):
    """Thread count: explicit setting, else HASHREC_THREADS, else 1."""
    if value and value > 0:
        return int(value)
    env = os.environ.get(THREADS_ENV, "").strip()
    if env:
        try:
            parsed = int(env)
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be an integer: {env!r}") from exc
        if parsed > 0:
            return parsed
    return 1
