"""Shared fixtures: the acceptance report trail and the trained toy models.

The two session fixtures below are deliberately expensive (minutes): they
run the real staged training loop at desk scale and are shared by every
check that needs a trained model.  Their exact configurations are the
recorded baselines for the seeded training checks.
"""

import json
import time

import pytest

from dplx.data import generate_corpus, split_corpus
from dplx.decoding import evaluate_translation
from dplx.losses import LossWeights
from dplx.model import ModelConfig, build_model
from dplx.rng import RngHub
from dplx.training import (MetricsSink, TrainConfig, train_stage1_rdc,
                           train_stage2_ddm, train_stage3_finetune)

_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance check, then enforce it."""

    def check(ok, name, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else "")
        _ACCEPTANCE_LINES.append(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def read_metrics(out_dir):
    path = out_dir / "metrics.jsonl"
    return [json.loads(line) for line in path.read_text().splitlines()]


# ----------------------------------------------------------------------
# trained models (session scope: built once, shared across test files)

# mirrored-shift task at the pinned size (V=12, max_len=24), fresh-sample
# corpus large enough that 3000 steps never revisit a batch
STAGED_MODEL = dict(vocab=12, width=64, heads=4, kernel=7, upsample_kernel=4,
                    max_len=24, layers=2)
STAGED_TRAIN = dict(k1=3000, k2=2000, k3=1000, lr=1.2e-3, warmup=250,
                    batch_tokens=512, seed=0, log_interval=1)
STAGED_DATA = dict(n_pairs=100_000, v=12, max_len=24,
                   difficulty="reverse_shift", seed=11)
STAGED_DEV = 300


@pytest.fixture(scope="session")
def staged_run(tmp_path_factory):
    """Full three-stage run on the mirrored-shift task, with held-out
    greedy accuracy measured after stages 1 and 3."""
    t0 = time.time()
    sp = split_corpus(generate_corpus(**STAGED_DATA))
    train_pairs, dev = sp["train"], sp["dev"][:STAGED_DEV]
    mcfg = ModelConfig(**STAGED_MODEL)
    tcfg = TrainConfig(weights=LossWeights(), **STAGED_TRAIN)
    hub = RngHub(tcfg.seed)
    model = build_model(mcfg, hub)
    out = tmp_path_factory.mktemp("staged")

    wall = {}
    t = time.time()
    train_stage1_rdc(model, train_pairs, tcfg, hub, MetricsSink(out / "s1"))
    wall[1] = time.time() - t
    acc1 = {d: evaluate_translation(model, dev, d) for d in ("fwd", "rev")}

    t = time.time()
    train_stage2_ddm(model, train_pairs, tcfg, hub, MetricsSink(out / "s2"))
    wall[2] = time.time() - t
    ddm_losses = [r["loss"] for r in read_metrics(out / "s2")]

    t = time.time()
    train_stage3_finetune(model, train_pairs, tcfg, hub, MetricsSink(out / "s3"))
    wall[3] = time.time() - t
    acc3 = {d: evaluate_translation(model, dev, d) for d in ("fwd", "rev")}

    return {
        "model": model, "dev": dev, "mcfg": mcfg, "tcfg": tcfg,
        "acc1": acc1, "acc3": acc3, "ddm_losses": ddm_losses,
        "wall": wall, "total_wall": time.time() - t0, "out": out,
    }


# copy task: both directions are the identity map, so it trains fast and
# is the recorded baseline for loss-floor, symmetry, and round-trip checks
COPY_MODEL = dict(vocab=8, width=32, heads=4, kernel=7, upsample_kernel=4,
                  max_len=10, layers=2)
COPY_TRAIN = dict(k1=1500, lr=1.2e-3, warmup=200, batch_tokens=512, seed=1,
                  log_interval=1)
COPY_DATA = dict(n_pairs=20_000, v=8, max_len=10, difficulty="copy", seed=21)
COPY_DEV = 200


@pytest.fixture(scope="session")
def copy_run(tmp_path_factory):
    """Stage-1 training on the copy task plus its logged loss curves."""
    sp = split_corpus(generate_corpus(**COPY_DATA))
    train_pairs, dev = sp["train"], sp["dev"][:COPY_DEV]
    mcfg = ModelConfig(**COPY_MODEL)
    tcfg = TrainConfig(weights=LossWeights(), **COPY_TRAIN)
    hub = RngHub(tcfg.seed)
    model = build_model(mcfg, hub)
    out = tmp_path_factory.mktemp("copy")
    train_stage1_rdc(model, train_pairs, tcfg, hub, MetricsSink(out / "s1"))
    return {
        "model": model, "dev": dev, "mcfg": mcfg, "tcfg": tcfg,
        "rows": read_metrics(out / "s1"), "out": out,
    }
