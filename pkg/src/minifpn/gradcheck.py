"""Finite-difference verification of analytic gradients.

Checks run in double precision: build the model with float64 parameters and
inputs so the very same operation code paths execute at higher precision.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import engine
from .errors import ContractError

# Near-zero gradients are compared at this absolute scale instead of blowing
# up the relative error.
REL_ERR_FLOOR = 1e-3


@dataclass(frozen=True)
class Probe:
    """One sampled parameter coordinate with both gradient estimates."""

    param_name: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass(frozen=True)
class GradCheckReport:
    """Outcome of a finite-difference sweep over one model function."""

    probes: tuple
    step: float
    tol: float

    @property
    def max_rel_err(self) -> float:
        return max(p.rel_err for p in self.probes)

    @property
    def passed(self) -> bool:
        return all(p.rel_err < self.tol for p in self.probes)

    def failures(self):
        return [p for p in self.probes if p.rel_err >= self.tol]

    def summary(self) -> str:
        state = "pass" if self.passed else "FAIL"
        return (f"{state}: {len(self.probes)} probes, max rel err "
                f"{self.max_rel_err:.3e} (tol {self.tol:.1e})")


def finite_diff_check(model_fn, params, n_probes: int = 20, step: float = 1e-4,
                      tol: float = 1e-4, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of `model_fn()` against central differences.

    `model_fn` takes no arguments, closes over `params`, and returns a scalar
    loss tensor. Probed coordinates are drawn without replacement across all
    parameters with a seeded rng, so reports are reproducible.

    Piecewise activations make some probes straddle a kink: when a +-step
    perturbation pushes any downstream pre-activation across a slope change,
    the central difference no longer estimates the derivative at the point.
    A probe that misses tolerance is therefore retried at step/8 and step/64;
    kink artifacts shrink with the step while genuine gradient errors stay,
    so the retries cannot mask a wrong backward rule.
    """
    params = list(params)
    if not params:
        raise ContractError("finite_diff_check needs at least one parameter")
    for p in params:
        if p.data.dtype != np.float64:
            raise ContractError(
                f"gradient checks require float64 parameters; {p.name!r} is "
                f"{p.data.dtype.name}")

    for p in params:
        p.grad = None
    loss = model_fn()
    loss.backward()
    analytic = {}
    for p in params:
        analytic[p.name] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        p.grad = None

    sizes = [p.data.size for p in params]
    total = int(np.sum(sizes))
    bounds = np.cumsum([0] + sizes)
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_probes, total), replace=False)

    def central_difference(p, index, h):
        original = p.data[index]
        p.data[index] = original + h
        f_plus = model_fn().item()
        p.data[index] = original - h
        f_minus = model_fn().item()
        p.data[index] = original
        return (f_plus - f_minus) / (2.0 * h)

    probes = []
    for flat in sorted(int(v) for v in picks):
        which = int(np.searchsorted(bounds, flat, side="right") - 1)
        p = params[which]
        local = flat - int(bounds[which])
        index = np.unravel_index(local, p.data.shape)
        a = float(analytic[p.name][index])
        best = None
        for h in (step, step / 8.0, step / 64.0):
            numeric = central_difference(p, index, h)
            rel = abs(a - numeric) / max(abs(a), abs(numeric), REL_ERR_FLOOR)
            if best is None or rel < best[1]:
                best = (numeric, rel)
            if rel < tol:
                break
        probes.append(Probe(p.name, tuple(int(i) for i in index), a, best[0],
                            best[1]))

    return GradCheckReport(tuple(probes), step, tol)


@contextlib.contextmanager
def corrupted_backward(scale: float = 1.5):
    """Deliberately mis-scale the leaky_relu input gradient while active.

    Exists to prove the checker catches a wrong backward rule; never use it
    outside tests or the gradcheck command's fault-injection flag.
    """
    previous = engine._grad_fault_scale
    engine._grad_fault_scale = scale
    try:
        yield
    finally:
        engine._grad_fault_scale = previous
