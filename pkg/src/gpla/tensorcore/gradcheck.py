"""Central finite-difference gradient oracle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Module
from .tensor import Tensor


@dataclass
class GradCheckResult:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        denom = max(abs(self.analytic), abs(self.numeric), 1e-8)
        return abs(self.analytic - self.numeric) / denom


def numeric_grad(loss_fn, tensor: Tensor, index, h: float = 1e-3) -> float:
    """(f(x+h) - f(x-h)) / 2h for one coordinate of ``tensor``; data restored afterwards."""
    orig = tensor.data[index].copy()
    tensor.data[index] = orig + h
    fp = float(loss_fn().data)
    tensor.data[index] = orig - h
    fm = float(loss_fn().data)
    tensor.data[index] = orig
    return (fp - fm) / (2 * h)


def check_module(loss_fn, module: Module, n_coords: int = 20, rng=None, h: float = 1e-3,
                 min_abs: float = 0.0) -> list[GradCheckResult]:
    """Compare autodiff grads of ``loss_fn(module)`` against finite differences.

    Autodiff runs on ``module`` as-is (normally f32). The finite differences
    run on a float64 clone so the oracle's own rounding stays far below the
    tolerance being tested. Coordinates are drawn uniformly over all
    parameters; those with both |grads| below ``min_abs`` are skipped.
    """
    rng = rng or np.random.default_rng(0)
    module.zero_grad()
    loss_fn(module).backward()
    named = module.named_parameters()
    ref = module.clone(np.float64)
    ref_named = dict(ref.named_parameters())
    sizes = np.array([p.size for _, p in named])
    results: list[GradCheckResult] = []
    attempts = 0
    while len(results) < n_coords and attempts < 50 * n_coords:
        attempts += 1
        k = int(rng.choice(len(named), p=sizes / sizes.sum()))
        name, p = named[k]
        idx = tuple(int(rng.integers(n)) for n in p.shape)
        analytic = float(p.grad[idx]) if p.grad is not None else 0.0
        numeric = numeric_grad(lambda: loss_fn(ref), ref_named[name], idx, h)
        if max(abs(analytic), abs(numeric)) < min_abs:
            continue
        results.append(GradCheckResult(name, idx, analytic, numeric))
    module.zero_grad()
    return results


def check_inputs(fn, inputs: list[Tensor], h: float = 1e-3, n_coords: int | None = None,
                 rng=None) -> float:
    """Max relative error between autodiff and finite-difference grads w.r.t. ``inputs``.

    ``fn(*inputs)`` must return a scalar Tensor. Finite differences are taken
    on float64 copies.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.grad = None
    fn(*inputs).backward()
    worst = 0.0
    copies = [Tensor(t.data.astype(np.float64), requires_grad=False) for t in inputs]
    for t, c in zip(inputs, copies):
        coords = list(np.ndindex(t.shape))
        if n_coords is not None and len(coords) > n_coords:
            coords = [coords[i] for i in rng.choice(len(coords), n_coords, replace=False)]
        for idx in coords:
            num = numeric_grad(lambda: fn(*copies), c, idx, h)
            ana = float(t.grad[idx])
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
    return worst
