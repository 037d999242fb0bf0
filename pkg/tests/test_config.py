"""Run configuration parsing, casting and echoing."""

from dataclasses import replace

import pytest

from hashrec.config import (
    RunConfig,
    apply_overrides,
    load_config,
    paper_scale,
    to_text,
)
from hashrec.errors import ConfigError


def test_text_roundtrip_covers_every_field_kind(tmp_path):
    cfg = replace(
        RunConfig(),
        out_dir="elsewhere",
        stem=True,
        neg_samples=None,
        hidden_dims=(48, 24),
        lam=0.25,
        bench_m=(1000,),
    )
    path = tmp_path / "run.cfg"
    path.write_text(to_text(cfg))
    assert load_config(path) == cfg


def test_inline_comments_sections_and_blanks(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "# full line comment\n"
        "[model]\n"
        "n_bits = 8  # trailing note\n"
        "\n"
        "neg_samples = none\n"
        "stem = true\n"
    )
    cfg = load_config(path)
    assert cfg.n_bits == 8
    assert cfg.neg_samples is None
    assert cfg.stem is True


def test_bad_literal_names_file_and_line(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("alpha = 0.1\nn_bits = lots\n")
    with pytest.raises(ConfigError, match=r"run\.cfg:2"):
        load_config(path)


def test_override_casting_and_unknown_key():
    cfg = apply_overrides(RunConfig(), {"hidden_dims": "32, 16", "lam": "2.5"})
    assert cfg.hidden_dims == (32, 16)
    assert cfg.lam == 2.5
    with pytest.raises(ConfigError, match="mystery"):
        apply_overrides(RunConfig(), {"mystery": "1"})


def test_derived_layer_stack_is_symmetric():
    cfg = replace(RunConfig(), hidden_dims=(48, 24), n_bits=8)
    assert cfg.dae_layers(500) == [500, 48, 24, 8, 24, 48, 500]


def test_paper_scale_touches_only_published_knobs():
    base = RunConfig()
    big = paper_scale(base)
    assert (big.n_bits, big.lam, big.hidden_dims) == (30, 20.0, (200,))
    assert big.vocab_cap == 8000
    assert big.outer_iters == 50
    assert big.alpha == base.alpha
    assert big.n_negatives == base.n_negatives
