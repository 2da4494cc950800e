"""Strict config parsing: INI sections, CLI overrides, echo round-trip."""

import pytest

from dplx.config import (
    RunConfig,
    load_config,
    parse_overrides,
    resolved_text,
    write_resolved,
)
from dplx.errors import ConfigError


def write(tmp_path, text):
    path = tmp_path / "run.ini"
    path.write_text(text)
    return path


class TestLoad:
    def test_defaults_without_file(self):
        cfg = load_config()
        assert isinstance(cfg, RunConfig)
        assert cfg.model.width == 64 or cfg.model.width > 0
        assert cfg.train.k1 >= 0

    def test_sections_fill_dataclasses(self, tmp_path):
        path = write(tmp_path, """
[model]
vocab = 12
width = 16
layers = 4

[train]
k1 = 7
lr = 0.001
mode = unit

[loss]
w5 = 0.25

[data]
corpus = corpus.jsonl
out_dir = runs/x
""")
        cfg = load_config(path)
        assert cfg.model.vocab == 12
        assert cfg.model.width == 16
        assert cfg.model.layers == 4
        assert cfg.train.k1 == 7
        assert cfg.train.lr == 0.001
        assert cfg.train.weights.w5 == 0.25
        assert cfg.data.corpus == "corpus.jsonl"
        assert cfg.data.out_dir == "runs/x"

    def test_unknown_section_rejected(self, tmp_path):
        path = write(tmp_path, "[turbo]\nboost = 1\n")
        with pytest.raises(ConfigError, match=r"unknown config section \[turbo\]"):
            load_config(path)

    def test_unknown_key_rejected(self, tmp_path):
        path = write(tmp_path, "[model]\nwdith = 8\n")
        with pytest.raises(ConfigError, match="unknown config key model.wdith"):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="no such config file"):
            load_config(tmp_path / "nope.ini")

    def test_malformed_ini(self, tmp_path):
        path = write(tmp_path, "not an ini at all\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_coercion_errors(self, tmp_path):
        with pytest.raises(ConfigError, match="train.k1"):
            load_config(write(tmp_path, "[train]\nk1 = soon\n"))
        with pytest.raises(ConfigError, match="train.lr"):
            load_config(write(tmp_path, "[train]\nlr = fast\n"))
        with pytest.raises(ConfigError, match="expected a boolean"):
            load_config(write(tmp_path, "[train]\nstage2_add_composite = maybe\n"))

    def test_boolean_spellings(self, tmp_path):
        for raw, expect in (("yes", True), ("0", False), ("On", True)):
            cfg = load_config(write(tmp_path, f"[train]\nstage2_add_composite = {raw}\n"))
            assert cfg.train.stage2_add_composite is expect

    def test_dataclass_validation_still_fires(self, tmp_path):
        path = write(tmp_path, "[model]\nwidth = 7\n")
        with pytest.raises(ConfigError):
            load_config(path)


class TestOverrides:
    def test_parse_shapes(self):
        got = parse_overrides(["model.width=16", "train.k1=9", "model.heads=4"])
        assert got == {"model": {"width": "16", "heads": "4"}, "train": {"k1": "9"}}
        assert parse_overrides(None) == {}

    def test_malformed_override(self):
        with pytest.raises(ConfigError):
            parse_overrides(["width=16"])
        with pytest.raises(ConfigError):
            parse_overrides(["model.width"])

    def test_override_beats_file(self, tmp_path):
        path = write(tmp_path, "[train]\nk1 = 7\nseed = 3\n")
        cfg = load_config(path, parse_overrides(["train.k1=11"]))
        assert cfg.train.k1 == 11
        assert cfg.train.seed == 3

    def test_value_may_contain_equals(self):
        got = parse_overrides(["data.corpus=a=b.jsonl"])
        assert got["data"]["corpus"] == "a=b.jsonl"


class TestResolvedEcho:
    def test_roundtrip_reproduces_config(self, tmp_path):
        base = write(tmp_path, "[model]\nvocab = 9\nwidth = 16\n[train]\nk2 = 13\n")
        cfg = load_config(base, parse_overrides(["loss.w6=0.75"]))
        echoed = write_resolved(cfg, tmp_path / "out")
        assert echoed.name == "config.resolved.ini"
        again = load_config(echoed)
        assert again == cfg
        assert again.fingerprint() == cfg.fingerprint()

    def test_resolved_text_lists_every_key(self):
        text = resolved_text(load_config())
        for needle in ("[model]", "[train]", "[loss]", "[data]",
                       "width", "k1", "w5", "out_dir"):
            assert needle in text
