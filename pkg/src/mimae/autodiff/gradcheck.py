"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from mimae.autodiff.tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_err: float
    checked: int
    worst: tuple  # (input index, flat coordinate, analytic, numeric)
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def rel_err(analytic: float, numeric: float, atol: float) -> float:
    """|a - n| / max(|a|, |n|, atol); pairs that are both tiny compare absolutely."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), atol)


def grad_check(f: Callable[[list], Tensor], point: Sequence, h: float = 1e-5, tol: float = 1e-3,
               *, dtype=np.float64, atol: float = 1e-6, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare ``backward()`` of ``f`` against central differences at ``point``.

    ``f`` maps a list of tensors to a scalar tensor. Every entry of ``point``
    becomes a leaf tensor of ``dtype`` requiring grad. When ``max_coords`` is
    set, that many coordinates are sampled (per input) instead of checking
    all of them.
    """
    leaves = [Tensor(np.array(np.asarray(getattr(p, "data", p)), dtype=dtype), requires_grad=True)
              for p in point]
    out = f(leaves)
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in leaves]

    rng = rng or np.random.default_rng(0)
    worst = (-1, -1, 0.0, 0.0)
    max_err = 0.0
    checked = 0
    with no_grad():
        for i, t in enumerate(leaves):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for c in coords:
                orig = flat[c]
                flat[c] = orig + h
                fp = float(f(leaves).data)
                flat[c] = orig - h
                fm = float(f(leaves).data)
                flat[c] = orig
                numeric = (fp - fm) / (2.0 * h)
                a = float(analytic[i].reshape(-1)[c])
                err = rel_err(a, numeric, atol)
                checked += 1
                if err > max_err or worst[0] < 0:
                    max_err = max(max_err, err)
                    worst = (i, int(c), a, numeric)
    return GradCheckReport(max_err, checked, worst, tol)


def directional_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                      tol: float = 1e-3, rng: np.random.Generator | None = None,
                      atol: float = 1e-6) -> GradCheckReport:
    """Check grad . v against (f(p + h v) - f(p - h v)) / 2h for a random unit direction v.

    ``v`` is normalized over all parameters jointly, so ``h`` is the actual
    step length; this keeps the probe from straddling ReLU kinks in wide
    networks.

    ``params`` are existing leaf tensors (typically model parameters) read
    by ``f``; their ``.grad`` is overwritten.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    out = f()
    out.backward()
    dirs = [rng.standard_normal(p.shape) for p in params]
    norm = math.sqrt(sum(float((d * d).sum()) for d in dirs))
    dirs = [(d / norm).astype(p.dtype) for p, d in zip(params, dirs)]
    analytic = sum(float((p.grad * d).sum()) if p.grad is not None else 0.0
                   for p, d in zip(params, dirs))
    originals = [p.data.copy() for p in params]
    with no_grad():
        for p, d, o in zip(params, dirs, originals):
            p.data = o + h * d
        fp = float(f().data)
        for p, d, o in zip(params, dirs, originals):
            p.data = o - h * d
        fm = float(f().data)
        for p, o in zip(params, originals):
            p.data = o
    numeric = (fp - fm) / (2.0 * h)
    err = rel_err(analytic, numeric, atol)
    return GradCheckReport(err, 1, (-1, -1, analytic, numeric), tol)
