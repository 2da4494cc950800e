"""Three-stage training: transduction pretraining, duplex denoising, and
a final fine-tune with the denoising machinery fixed.

Every stage gets a fresh Adam instance and step counter (linear warmup
then inverse-sqrt decay).  Batches for epoch e are a pure function of
(corpus, e, seed), the stochastic pieces draw from named, checkpointable
generator streams, and metric rows carry no wallclock, so a run can be
stopped, resumed, and compared bit for bit.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import Batch, ParallelPair, epoch_batches
from .diffusion import DiffusionSchedule, schedule_from_spec
from .errors import CheckpointError, ConfigError, TrainingDivergedError
from .losses import LossWeights, composite_loss
from .model import DuplexModel, ModelConfig, build_model, encode_units
from .rng import RngHub
from .tensor import Tensor
from .tensorfile import load_tensors, save_tensors

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    k1: int = 3000
    k2: int = 3000
    k3: int = 1000
    lr: float = 3e-4
    warmup: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    batch_tokens: int = 512
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: str = "desk"
    lam1: float = 0.5
    lam2: float = 0.5
    mode: str = "unit"
    stage2_add_composite: bool = False
    log_interval: int = 50
    eval_interval: int = 500

    def __post_init__(self):
        if min(self.k1, self.k2, self.k3) < 0:
            raise ConfigError("stage budgets must be >= 0")
        if self.lr <= 0 or self.warmup < 1:
            raise ConfigError("need lr > 0 and warmup >= 1")
        if self.mode not in ("unit", "mel"):
            raise ConfigError(f"mode must be 'unit' or 'mel', got {self.mode!r}")
        if self.log_interval < 1 or self.eval_interval < 1:
            raise ConfigError("intervals must be >= 1")


def config_fingerprint(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    """Stable hash of the resolved configuration pair; checked on resume
    so a checkpoint cannot silently continue under different settings."""
    blob = json.dumps(
        {"model": dataclasses.asdict(model_cfg), "train": dataclasses.asdict(train_cfg)},
        sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def lr_at(step: int, base: float, warmup: int) -> float:
    """Linear warmup to `base` over `warmup` steps, then inverse-sqrt."""
    if step < 1:
        raise ConfigError(f"lr schedule is 1-based, got step {step}")
    return base * min(step / warmup, (warmup / step) ** 0.5)


class Adam:
    """Adam with global-norm clipping and a freeze list.  Parameters
    whose gradient is absent are left untouched (their moments too)."""

    def __init__(self, params: dict[str, Tensor], lr: float = 3e-4,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float = 1.0, frozen: Sequence[str] = ()):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.frozen = frozenset(frozen)
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def active_grads(self) -> dict[str, np.ndarray]:
        return {n: p.grad for n, p in self.params.items()
                if n not in self.frozen and p.grad is not None}

    def step(self, lr: Optional[float] = None) -> float:
        """One update; returns the pre-clip global gradient norm."""
        lr = self.lr if lr is None else lr
        grads = self.active_grads()
        sq = sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())
        norm = float(np.sqrt(sq))
        scale = 1.0 if norm <= self.clip_norm or norm == 0.0 else self.clip_norm / norm
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            p = self.params[name]
            g = (g * scale).astype(p.dtype)
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            self.m[name], self.v[name] = m, v
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - lr * update).astype(p.dtype)
        return norm

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.asarray([self.t], dtype=np.int64)}
        for n, a in self.m.items():
            out[f"adam.m.{n}"] = a
        for n, a in self.v.items():
            out[f"adam.v.{n}"] = a
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["adam.t"][0])
        self.m = {k[len("adam.m."):]: v for k, v in arrays.items()
                  if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: v for k, v in arrays.items()
                  if k.startswith("adam.v.")}
        for n in list(self.m) + list(self.v):
            if n not in self.params:
                raise CheckpointError(f"optimizer state for unknown parameter {n!r}")


# ----------------------------------------------------------------------
# metrics


class MetricsSink:
    """Append-only metric stream.  The JSONL file holds only
    deterministic fields; the CSV mirror adds wallclock for plotting."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.jsonl = self.dir / "metrics.jsonl"
        self.csv = self.dir / "metrics.csv"
        if not self.csv.exists():
            self.csv.write_text("stage,step,loss,lr,wallclock\n")

    def log(self, stage: int, step: int, lr: float, parts: dict) -> None:
        row = {"stage": stage, "step": step, "lr": lr}
        row.update({k: v for k, v in sorted(parts.items())})
        with open(self.jsonl, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
        with open(self.csv, "a", encoding="utf-8") as fh:
            fh.write(f"{stage},{step},{parts.get('loss', float('nan'))},"
                     f"{lr},{time.time():.3f}\n")


class NullSink:
    def log(self, *args, **kwargs) -> None:
        pass


# ----------------------------------------------------------------------
# checkpointing


def save_checkpoint(path, model: DuplexModel, optimizer: Optional[Adam],
                    hub: RngHub, fingerprint: str, stage: int, step: int) -> None:
    """Write parameters, buffers, optimizer moments, and stream states.
    `step` is the number of completed steps within `stage`."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = {f"param.{n}": p.data for n, p in model.named_params().items()}
    arrays.update({f"buffer.{n}": b for n, b in model.named_buffers().items()})
    save_tensors(path / "weights.dplx", arrays)
    if optimizer is not None:
        save_tensors(path / "optim.dplx", optimizer.state_arrays())
    state = {
        "version": CHECKPOINT_VERSION,
        "fingerprint": fingerprint,
        "stage": stage,
        "step": step,
        "param_count": int(sum(p.size for p in model.named_params().values())),
        "rng": hub.state(),
    }
    (path / "state.json").write_text(json.dumps(state, sort_keys=True, indent=1))


def load_checkpoint(path, model: DuplexModel, optimizer: Optional[Adam],
                    hub: RngHub, fingerprint: str) -> dict:
    """Restore a checkpoint in place; refuses version, fingerprint, or
    parameter-count mismatches.  Returns the saved state dict."""
    path = Path(path)
    state_file = path / "state.json"
    if not state_file.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    state = json.loads(state_file.read_text())
    if state.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {state.get('version')} != {CHECKPOINT_VERSION}")
    if state.get("fingerprint") != fingerprint:
        raise CheckpointError(
            "checkpoint was written under a different configuration "
            f"({state.get('fingerprint')} != {fingerprint})")
    params = model.named_params()
    count = int(sum(p.size for p in params.values()))
    if state.get("param_count") != count:
        raise CheckpointError(
            f"parameter count mismatch: checkpoint {state.get('param_count')}, "
            f"model {count}")
    arrays = load_tensors(path / "weights.dplx")
    for name, p in params.items():
        key = f"param.{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint missing parameter {name!r}")
        if arrays[key].shape != p.shape:
            raise CheckpointError(
                f"parameter {name!r}: checkpoint shape {arrays[key].shape} "
                f"!= model shape {p.shape}")
        p.data = arrays[key].astype(p.dtype)
    for name in model.named_buffers():
        key = f"buffer.{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint missing buffer {name!r}")
        model.set_buffer(name, arrays[key])
    if optimizer is not None and (path / "optim.dplx").exists():
        optimizer.load_state_arrays(load_tensors(path / "optim.dplx"))
    hub.set_state(state["rng"])
    return state


# ----------------------------------------------------------------------
# stage loops


def _check_finite(value: float, stage: int, step: int, parts: dict) -> None:
    if not np.isfinite(value):
        raise TrainingDivergedError(
            f"stage {stage} step {step}: loss became {value} (parts: "
            + ", ".join(f"{k}={v}" for k, v in sorted(parts.items())) + ")")


class _BatchCursor:
    """Deterministic step -> batch mapping with per-epoch reshuffles."""

    def __init__(self, pairs: Sequence[ParallelPair], seed: int, batch_tokens: int):
        if not pairs:
            raise ConfigError("cannot train on an empty corpus")
        self.pairs = pairs
        self.seed = seed
        self.batch_tokens = batch_tokens
        self.epoch = -1
        self.batches: list[Batch] = []

    def at_step(self, step: int) -> Batch:
        """step is 1-based within the stage."""
        if self.epoch < 0:
            self.batches = epoch_batches(self.pairs, 0, self.seed, self.batch_tokens)
            self.epoch = 0
        per_epoch = len(self.batches)
        epoch, index = divmod(step - 1, per_epoch)
        if epoch != self.epoch:
            self.batches = epoch_batches(self.pairs, epoch, self.seed, self.batch_tokens)
            self.epoch = epoch
        return self.batches[index]


def _make_optimizer(model: DuplexModel, cfg: TrainConfig,
                    frozen: Sequence[str]) -> Adam:
    return Adam(model.named_params(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                eps=cfg.adam_eps, clip_norm=cfg.clip_norm, frozen=frozen)


def _frozen_names(model: DuplexModel, stage: int) -> list[str]:
    if stage == 2:
        # the clean encodings are the diffusion endpoints; optimizing
        # them lets the objective collapse the space instead of learning
        # to denoise, so the stand-in encoders stay fixed here
        return model.encoder_param_names()
    if stage == 3:
        return model.denoiser_param_names()
    return []


def run_stage(stage: int, model: DuplexModel, pairs: Sequence[ParallelPair],
              cfg: TrainConfig, hub: RngHub, sink=None, steps: Optional[int] = None,
              start_step: int = 0, optimizer: Optional[Adam] = None,
              checkpoint_dir=None, fingerprint: str = "") -> Adam:
    """Run one stage for its budget, returning the optimizer (so a
    caller that checkpointed mid-stage can hand it back in)."""
    if stage not in (1, 2, 3):
        raise ConfigError(f"stage must be 1, 2, or 3, got {stage}")
    sink = sink or NullSink()
    budget = {1: cfg.k1, 2: cfg.k2, 3: cfg.k3}[stage] if steps is None else steps
    optimizer = optimizer or _make_optimizer(model, cfg, _frozen_names(model, stage))
    cursor = _BatchCursor(pairs, cfg.seed, cfg.batch_tokens)
    if stage == 2:
        sched_x = schedule_from_spec(cfg.schedule)
        sched_y = schedule_from_spec(cfg.schedule)
    for step in range(start_step + 1, budget + 1):
        batch = cursor.at_step(step)
        optimizer.zero_grad()
        if stage == 2:
            loss, parts = _ddm_step(model, batch, cfg, hub, sched_x, sched_y)
        else:
            loss, parts = composite_loss(
                model, batch.src_ids, batch.src_mask, batch.tgt_ids, batch.tgt_mask,
                cfg.weights, hub.stream("dropout"), mode=cfg.mode)
        _check_finite(parts["loss"], stage, step, parts)
        T.backward(loss)
        lr = lr_at(step, cfg.lr, cfg.warmup)
        parts["grad_norm"] = optimizer.step(lr)
        if step % cfg.log_interval == 0 or step == budget:
            sink.log(stage, step, lr, parts)
        if checkpoint_dir is not None and (step % cfg.eval_interval == 0 or step == budget):
            save_checkpoint(checkpoint_dir, model, optimizer, hub,
                            fingerprint, stage, step)
    return optimizer


def _ddm_step(model: DuplexModel, batch: Batch, cfg: TrainConfig, hub: RngHub,
              sched_x: DiffusionSchedule, sched_y: DiffusionSchedule):
    from .blocks import Mode
    from .diffusion import ddm_train_step

    with T.no_grad():
        x0 = encode_units(model, batch.src_ids, batch.src_mask, "x")
        y0 = encode_units(model, batch.tgt_ids, batch.tgt_mask, "y")
    mode = Mode(training=True, update_bn=True, rng=hub.stream("dropout"))
    loss, parts = ddm_train_step(
        x0, y0, model, sched_x, sched_y, cfg.lam1, cfg.lam2,
        hub.stream("diffusion-noise"), x_mask=batch.src_mask,
        y_mask=batch.tgt_mask, mode=mode)
    if cfg.stage2_add_composite:
        comp, comp_parts = composite_loss(
            model, batch.src_ids, batch.src_mask, batch.tgt_ids, batch.tgt_mask,
            cfg.weights, hub.stream("dropout"), mode=cfg.mode)
        loss = T.add(loss, comp)
        parts.update({f"comp_{k}": v for k, v in comp_parts.items()})
    parts["loss"] = loss.item()
    return loss, parts


def train_stage1_rdc(model: DuplexModel, pairs: Sequence[ParallelPair],
                     cfg: TrainConfig, hub: RngHub, sink=None, **kw) -> DuplexModel:
    run_stage(1, model, pairs, cfg, hub, sink, **kw)
    return model


def train_stage2_ddm(model: DuplexModel, pairs: Sequence[ParallelPair],
                     cfg: TrainConfig, hub: RngHub, sink=None, **kw) -> DuplexModel:
    run_stage(2, model, pairs, cfg, hub, sink, **kw)
    return model


def train_stage3_finetune(model: DuplexModel, pairs: Sequence[ParallelPair],
                          cfg: TrainConfig, hub: RngHub, sink=None, **kw) -> DuplexModel:
    run_stage(3, model, pairs, cfg, hub, sink, **kw)
    return model


def train(model_cfg: ModelConfig, train_cfg: TrainConfig,
          pairs: Sequence[ParallelPair], out_dir, stages: Sequence[int] = (1, 2, 3),
          resume: Optional[str] = None,
          model: Optional[DuplexModel] = None) -> DuplexModel:
    """Full driver: builds (or resumes) the model and runs the requested
    stages in order, streaming metrics and rolling checkpoints."""
    out_dir = Path(out_dir)
    sink = MetricsSink(out_dir)
    hub = RngHub(train_cfg.seed)
    if model is None:
        model = build_model(model_cfg, hub)
    fingerprint = config_fingerprint(model_cfg, train_cfg)
    ckpt_dir = out_dir / "checkpoint"
    start = {"stage": 0, "step": 0}
    optimizer = None
    if resume is not None:
        optimizer = _make_optimizer(model, train_cfg, [])
        start = load_checkpoint(resume, model, optimizer, hub, fingerprint)
        optimizer.frozen = frozenset(_frozen_names(model, start["stage"]))
    for stage in stages:
        if stage < start["stage"]:
            continue
        resumed_here = stage == start["stage"] and start["step"] > 0
        opt = optimizer if resumed_here else None
        run_stage(stage, model, pairs, train_cfg, hub, sink,
                  start_step=start["step"] if resumed_here else 0,
                  optimizer=opt, checkpoint_dir=ckpt_dir, fingerprint=fingerprint)
        optimizer = None
    save_checkpoint(out_dir / "final", model, None, hub, fingerprint,
                    stages[-1] if stages else 0,
                    {1: train_cfg.k1, 2: train_cfg.k2, 3: train_cfg.k3}.get(
                        stages[-1] if stages else 0, 0))
    return model
