"""Central finite-difference verification of analytic gradients.

This is the independent oracle for the autodiff engine: every primitive
and composite (up to the full training losses) is certified against it
in float64 before being trusted.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def numeric_grad(f: Callable[[], Tensor], leaf: Tensor, coords: Sequence[tuple],
                 eps: float = 1e-6) -> dict:
    """Central differences of the scalar f() wrt selected coordinates of leaf."""
    out = {}
    flat = leaf.data.reshape(-1)
    for c in coords:
        i = np.ravel_multi_index(c, leaf.shape) if leaf.ndim else 0
        orig = flat[i]
        step = eps * max(1.0, abs(float(orig)))
        flat[i] = orig + step
        fp = f().item()
        flat[i] = orig - step
        fm = f().item()
        flat[i] = orig
        out[c] = (fp - fm) / (2.0 * step)
    return out


def check_gradients(f: Callable[[], Tensor], leaves: Sequence[Tensor],
                    rng: np.random.Generator, n_coords: int = 20,
                    eps: float = 1e-6) -> float:
    """Max relative error between autodiff and finite differences.

    f must rebuild its graph from the leaves on every call (so that the
    central-difference probes see perturbed data).  Relative error uses
    max(|analytic|, |numeric|, 1) as the denominator, which degrades to
    absolute error for near-zero gradients.
    """
    for leaf in leaves:
        leaf.grad = None
    loss = f()
    T.backward(loss)
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        if leaf.ndim == 0:
            coords = [()]
        else:
            total = leaf.size
            k = min(n_coords, total)
            picks = rng.choice(total, size=k, replace=False)
            coords = [np.unravel_index(int(p), leaf.shape) for p in picks]
        numeric = numeric_grad(f, leaf, coords, eps=eps)
        for c, nval in numeric.items():
            aval = float(analytic[c]) if leaf.ndim else float(analytic)
            denom = max(abs(aval), abs(nval), 1.0)
            worst = max(worst, abs(aval - nval) / denom)
    return worst
