"""Built-in verification suites: stack invertibility, schedule
identities, and CTC dynamic programming against exhaustive enumeration.

These run from the command line on any installed copy (no test harness
needed) and print one pass/fail row per check.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import EVAL, SplitState, palindrome_trace, stack_forward, stack_reverse
from .diffusion import PRESETS, preset
from .losses import ctc_forward_backward, required_frames
from .model import ModelConfig, build_model
from .rng import RngHub


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _roundtrip_error(layers: int, width: int, time_steps: int, seed: int,
                     dtype) -> float:
    with T.use_dtype(dtype):
        cfg = ModelConfig(vocab=7, width=width, layers=layers,
                          heads=max(2, width // 16), kernel=3,
                          max_len=max(2, time_steps))
        model = build_model(cfg, RngHub(seed), dtype=dtype)
        rng = np.random.default_rng(seed + 1)
        x = rng.standard_normal((2, time_steps, width)).astype(dtype)
        s = SplitState.split(T.Tensor(x, dtype=np.dtype(dtype)), None)
        with T.no_grad():
            mid, _ = stack_forward(s, model.layers, model.rdc, EVAL)
            back, _ = stack_reverse(mid, model.layers, model.rdc, EVAL)
        return float(np.abs(back.merged().data - x).max())


def invertibility_suite(draws_per_case: int = 1) -> list[CheckResult]:
    results = []
    cases = list(itertools.product((2, 4), (32, 64), (8, 16)))
    for dtype, tol in ((np.float64, 1e-8), (np.float32, 1e-4)):
        worst = 0.0
        start = time.time()
        for i, (layers, width, steps) in enumerate(cases):
            for d in range(draws_per_case):
                err = _roundtrip_error(layers, width, steps, 1000 * i + d, dtype)
                worst = max(worst, err)
        results.append(CheckResult(
            f"invertibility[{np.dtype(dtype).name}]", worst <= tol,
            f"max|err|={worst:.3e} tol={tol:.0e} ({time.time() - start:.1f}s)"))
    traces = {n: palindrome_trace(n) for n in (2, 4, 8)}
    trace_ok = all(t == t[::-1] for t in traces.values())
    results.append(CheckResult(
        "palindrome-trace", trace_ok, f"L=4 trace {traces[4]}"))
    return results


def schedule_suite() -> list[CheckResult]:
    results = []
    for name in sorted(PRESETS):
        s = preset(name)
        abar_prev = np.concatenate([[1.0], s.alpha_bar[:-1]])
        gap = np.abs((1.0 - s.alpha_bar) - (s.alpha * (1.0 - abar_prev) + s.beta)).max()
        ok = gap <= 1e-12 and s.beta_tilde[0] == 0.0 and np.all(np.diff(s.alpha_bar) < 0)
        results.append(CheckResult(
            f"schedule[{name}]", bool(ok),
            f"identity gap={gap:.2e}, btilde1={s.beta_tilde[0]:.1e}"))
    return results


def _ctc_enumerate(lp: np.ndarray, labels: list[int], blank: int) -> float:
    """Total log probability of `labels` by summing every alignment path
    explicitly (exponential; only for tiny shapes)."""

    def collapse(path):
        out, prev = [], None
        for p in path:
            if p != prev and p != blank:
                out.append(p)
            prev = p
        return out

    t_total, n_sym = lp.shape
    total = -np.inf
    for path in itertools.product(range(n_sym), repeat=t_total):
        if collapse(path) == labels:
            total = np.logaddexp(total, sum(lp[t, k] for t, k in enumerate(path)))
    return total


def ctc_suite() -> list[CheckResult]:
    results = []
    # two hand-derived anchor values on uniform scores
    lp1 = np.full((1, 2), np.log(0.5))
    *_, logz1, _, _ = ctc_forward_backward(lp1, [0], blank=1)
    ok1 = abs(-logz1 - np.log(2.0)) < 1e-12
    results.append(CheckResult("ctc-single-frame", ok1,
                               f"loss={-logz1:.6f} expect {np.log(2.0):.6f}"))
    lp2 = np.full((2, 2), np.log(0.5))
    *_, logz2, _, _ = ctc_forward_backward(lp2, [0], blank=1)
    ok2 = abs(-logz2 - (-np.log(0.75))) < 1e-12
    results.append(CheckResult("ctc-two-frame", ok2,
                               f"loss={-logz2:.6f} expect {-np.log(0.75):.6f}"))

    rng = np.random.default_rng(7)
    worst = 0.0
    checked = 0
    for t_total in (1, 2, 3, 4):
        for v in (1, 2):
            lp = rng.standard_normal((t_total, v + 1))
            lp = lp - np.log(np.exp(lp).sum(-1, keepdims=True))
            for u in range(0, 3):
                for labels in itertools.product(range(v), repeat=u):
                    labels = list(labels)
                    if required_frames(labels) > t_total:
                        continue
                    ref = _ctc_enumerate(lp, labels, blank=v)
                    *_, logz, logz_b, _ = ctc_forward_backward(lp, labels, blank=v)
                    worst = max(worst, abs(logz - ref), abs(logz - logz_b))
                    checked += 1
    results.append(CheckResult(
        "ctc-enumeration", worst <= 1e-10,
        f"{checked} instances, max gap {worst:.2e}"))
    return results


def run_selftest(print_fn=print) -> bool:
    checks = invertibility_suite() + schedule_suite() + ctc_suite()
    width = max(len(c.name) for c in checks) + 2
    ok = True
    for c in checks:
        ok &= c.passed
        print_fn(f"{'PASS' if c.passed else 'FAIL'}  {c.name:<{width}} {c.detail}")
    print_fn(f"{'OK' if ok else 'FAILED'}: {sum(c.passed for c in checks)}"
             f"/{len(checks)} checks passed")
    return ok
