"""Twin denoising diffusion processes over the encoded sequence space.

Forward process (per direction, with its own variance schedule):

    q(x_t | x_{t-1}) = N(sqrt(1-beta_t) x_{t-1}, beta_t I)
    x_t = sqrt(abar_t) x_0 + sqrt(1-abar_t) eps,   abar_t = prod alpha_i

Reverse step uses the epsilon parameterization of the posterior mean

    mu_t = (x_t - (1-alpha_t)/sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t)

with variance btilde_t = (1-abar_{t-1})/(1-abar_t) * beta_t (zero at t=1,
since abar_0 is defined as 1).

One training step noises both directions with a single shared t and
scores the two epsilon predictions:

    loss = lam1 * mse(eps_x, eps_hat_x) + lam2 * mse(eps_y, eps_hat_y)

where eps_hat_x comes from the stack run target-to-source conditioned on
the clean y encoding, and eps_hat_y from the source-to-target run
conditioned on the clean x encoding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .blocks import EVAL, Mode, SplitState, stack_forward, stack_reverse
from .errors import ConfigError, ShapeError, StepError
from .model import DuplexModel, position_features
from .tensor import Tensor


@dataclass
class DiffusionSchedule:
    kind: str
    steps: int
    beta: np.ndarray        # [T], float64
    alpha: np.ndarray       # 1 - beta
    alpha_bar: np.ndarray   # cumulative product
    beta_tilde: np.ndarray  # posterior variance, beta_tilde[0] == 0

    def check_step(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.steps:
            raise StepError(f"step t={t} outside 1..{self.steps}")
        return t

    def alpha_bar_prev(self, t: int) -> float:
        """abar_{t-1} with abar_0 defined as 1."""
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])


def build_schedule(kind: str, steps: int, beta_start: float, beta_end: float) -> DiffusionSchedule:
    if steps < 1:
        raise ConfigError(f"schedule needs steps >= 1, got {steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(
            f"betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]")
    if kind == "linear":
        beta = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    elif kind == "scaled_linear":
        beta = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end), steps, dtype=np.float64) ** 2
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    abar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    beta_tilde = (1.0 - abar_prev) / (1.0 - alpha_bar) * beta
    return DiffusionSchedule(kind, steps, beta, alpha, alpha_bar, beta_tilde)


# Named presets. "sd1000" mirrors the common latent-diffusion settings;
# "desk" is a short schedule with a comparably small terminal abar.
PRESETS = {
    "sd1000": ("scaled_linear", 1000, 8.5e-4, 1.2e-2),
    "desk": ("scaled_linear", 50, 1.0e-2, 2.5e-1),
    "linear1000": ("linear", 1000, 1.0e-4, 2.0e-2),
}


def preset(name: str) -> DiffusionSchedule:
    if name not in PRESETS:
        raise ConfigError(f"unknown schedule preset {name!r}; have {sorted(PRESETS)}")
    return build_schedule(*PRESETS[name])


def schedule_from_spec(spec: str) -> DiffusionSchedule:
    """Parse either a preset name or 'kind:steps:beta_start:beta_end'."""
    if spec in PRESETS:
        return preset(spec)
    parts = spec.split(":")
    if len(parts) != 4:
        raise ConfigError(f"bad schedule spec {spec!r}")
    return build_schedule(parts[0], int(parts[1]), float(parts[2]), float(parts[3]))


# ----------------------------------------------------------------------
# forward process


def q_sample(x0, t: int, eps, sched: DiffusionSchedule):
    """Closed-form draw of x_t given x_0 and the noise realization."""
    t = sched.check_step(t)
    x0t = x0 if isinstance(x0, Tensor) else Tensor(np.asarray(x0))
    eps_d = eps.data if isinstance(eps, Tensor) else np.asarray(eps, dtype=x0t.dtype)
    if eps_d.shape != x0t.shape:
        raise ShapeError(f"q_sample: eps shape {eps_d.shape} != x0 shape {x0t.shape}")
    abar = float(sched.alpha_bar[t - 1])
    c0 = np.asarray(np.sqrt(abar), dtype=x0t.dtype)
    c1 = np.asarray(np.sqrt(1.0 - abar), dtype=x0t.dtype)
    return T.add(T.mul(x0t, c0), Tensor(c1 * eps_d, dtype=x0t.dtype))


def posterior_mean(xt: np.ndarray, eps_hat: np.ndarray, t: int,
                   sched: DiffusionSchedule) -> np.ndarray:
    t = sched.check_step(t)
    alpha = float(sched.alpha[t - 1])
    abar = float(sched.alpha_bar[t - 1])
    return (xt - (1.0 - alpha) / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)


def posterior_step(xt, eps_hat, t: int, sched: DiffusionSchedule,
                   rng: Optional[np.random.Generator]) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1}; deterministic at t=1 (btilde_1=0)."""
    xt = xt.data if isinstance(xt, Tensor) else np.asarray(xt)
    eps_hat = eps_hat.data if isinstance(eps_hat, Tensor) else np.asarray(eps_hat)
    t = sched.check_step(t)
    mu = posterior_mean(xt, eps_hat, t, sched)
    if t == 1 or rng is None:
        return mu
    std = np.sqrt(float(sched.beta_tilde[t - 1]))
    return mu + std * rng.standard_normal(xt.shape).astype(xt.dtype)


# ----------------------------------------------------------------------
# denoiser


def sinusoidal_time_embedding(t: int, width: int, dtype) -> np.ndarray:
    half = width // 2
    i = np.arange(half, dtype=np.float64)
    angle = float(t) / np.power(10000.0, i / max(half - 1, 1))
    out = np.zeros(width, dtype=np.float64)
    out[0::2] = np.sin(angle)
    out[1::2] = np.cos(angle[: width - half])
    return out.astype(dtype)


def denoise(noisy: Tensor, t: int, memory: Tensor, model: DuplexModel,
            direction: str, noisy_mask: Optional[np.ndarray] = None,
            memory_mask: Optional[np.ndarray] = None, mode: Mode = EVAL) -> Tensor:
    """Predict the noise component of `noisy` given the clean opposite side.

    direction 'fwd' denoises the y side (conditioned on clean x memory),
    'rev' denoises the x side (conditioned on clean y memory).  The stack
    runs in the matching orientation with attention reading the memory.
    """
    if direction not in ("fwd", "rev"):
        raise ConfigError(f"direction must be 'fwd' or 'rev', got {direction!r}")
    if noisy.ndim == 2:
        noisy = T.reshape(noisy, (1,) + noisy.shape)
    if memory.ndim == 2:
        memory = T.reshape(memory, (1,) + memory.shape)
    if noisy.shape[-1] != model.cfg.width or memory.shape[-1] != model.cfg.width:
        raise ShapeError(
            f"denoise: widths {noisy.shape[-1]}/{memory.shape[-1]} "
            f"do not match model width {model.cfg.width}")
    temb = T.linear(Tensor(sinusoidal_time_embedding(t, model.cfg.width, noisy.dtype)
                           .reshape(1, model.cfg.width), dtype=noisy.dtype),
                    model.time_w, model.time_b)
    feat = T.add(noisy, T.reshape(temb, (model.cfg.width,)))
    pf = position_features(model, feat.shape[1], noisy_mask)
    if pf is not None:
        feat = T.add(feat, Tensor(pf.astype(feat.dtype), dtype=feat.dtype))
        pm = position_features(model, memory.shape[1], memory_mask)
        memory = T.add(memory, Tensor(pm.astype(memory.dtype), dtype=memory.dtype))
    s = SplitState.split(feat, noisy_mask)
    if direction == "fwd":
        s, _ = stack_forward(s, model.layers, model.rdc, mode,
                             cross_list=model.cross_fwd, memory=memory,
                             memory_mask=memory_mask)
        w, b = model.eps_fwd_w, model.eps_fwd_b
    else:
        s, _ = stack_reverse(s, model.layers, model.rdc, mode,
                             cross_list=model.cross_rev, memory=memory,
                             memory_mask=memory_mask)
        w, b = model.eps_rev_w, model.eps_rev_b
    return T.linear(s.merged(), w, b)


# ----------------------------------------------------------------------
# training step


def _masked_mse(err: Tensor, mask: Optional[np.ndarray]) -> Tensor:
    sq = T.square(err)
    if mask is None:
        return sq.mean()
    m = np.asarray(mask, dtype=bool)
    weights = Tensor(m[..., None].astype(err.dtype), dtype=err.dtype)
    n = float(m.sum()) * err.shape[-1]
    if n == 0:
        raise ShapeError("ddm loss: no valid positions")
    return T.mul(T.mul(sq, weights).sum(), 1.0 / n)


def ddm_train_step(x0: Tensor, y0: Tensor, model: DuplexModel,
                   sched_x: DiffusionSchedule, sched_y: DiffusionSchedule,
                   lam1: float, lam2: float, rng: Optional[np.random.Generator],
                   x_mask: Optional[np.ndarray] = None,
                   y_mask: Optional[np.ndarray] = None,
                   mode: Mode = EVAL, noise=None):
    """One duplex diffusion objective evaluation (single shared t).

    noise, if given, is a (t, eps_x, eps_y) triple for deterministic
    replay; otherwise all three are drawn from rng.  Returns
    (loss, parts) with parts holding the per-direction float terms.
    """
    if sched_x.steps != sched_y.steps:
        raise ConfigError(
            f"schedules disagree on step count: {sched_x.steps} vs {sched_y.steps}")
    if lam1 < 0 or lam2 < 0 or (lam1 == 0 and lam2 == 0):
        raise ConfigError(f"need nonnegative weights with lam1+lam2 > 0, got {lam1}, {lam2}")
    if noise is not None:
        t, eps_x, eps_y = noise
        t = int(t)
    else:
        if rng is None:
            raise ConfigError("ddm_train_step needs an rng when noise is not supplied")
        t = int(rng.integers(1, sched_x.steps + 1))
        eps_x = rng.standard_normal(x0.shape).astype(x0.dtype)
        eps_y = rng.standard_normal(y0.shape).astype(y0.dtype)
    if x_mask is not None:
        eps_x = eps_x * np.asarray(x_mask, dtype=bool)[..., None]
    if y_mask is not None:
        eps_y = eps_y * np.asarray(y_mask, dtype=bool)[..., None]

    xt = q_sample(x0, t, eps_x, sched_x)
    yt = q_sample(y0, t, eps_y, sched_y)
    eps_hat_x = denoise(xt, t, y0, model, "rev",
                        noisy_mask=x_mask, memory_mask=y_mask, mode=mode)
    eps_hat_y = denoise(yt, t, x0, model, "fwd",
                        noisy_mask=y_mask, memory_mask=x_mask, mode=mode)
    term_x = _masked_mse(T.sub(Tensor(eps_x, dtype=x0.dtype), eps_hat_x), x_mask)
    term_y = _masked_mse(T.sub(Tensor(eps_y, dtype=y0.dtype), eps_hat_y), y_mask)
    loss = T.add(T.mul(term_x, float(lam1)), T.mul(term_y, float(lam2)))
    parts = {"ddm_x": term_x.item(), "ddm_y": term_y.item(), "t": t}
    return loss, parts


# ----------------------------------------------------------------------
# sampling


def ancestral_sample(memory: Tensor, target_len: int, model: DuplexModel,
                     sched: DiffusionSchedule, rng: np.random.Generator,
                     direction: str, memory_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Draw one denoised sequence [target_len, width] by running the
    reverse chain from pure noise."""
    if target_len < 1:
        raise ShapeError(f"target_len must be >= 1, got {target_len}")
    h = model.cfg.width
    dtype = model.time_w.dtype
    x = rng.standard_normal((1, target_len, h)).astype(dtype)
    with T.no_grad():
        for t in range(sched.steps, 0, -1):
            eps_hat = denoise(Tensor(x, dtype=dtype), t, memory, model, direction,
                              memory_mask=memory_mask, mode=EVAL)
            x = posterior_step(x, eps_hat.data, t, sched, rng if t > 1 else None)
    return x[0]


def nearest_units(rep: np.ndarray, table: np.ndarray) -> list[int]:
    """Decode a denoised encoding by nearest embedding row (L2)."""
    rep = np.asarray(rep)
    d2 = (rep * rep).sum(-1)[:, None] - 2.0 * rep @ table.T + (table * table).sum(-1)[None, :]
    return [int(i) for i in d2.argmin(axis=1)]
