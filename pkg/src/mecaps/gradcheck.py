"""Finite-difference gradient checking.

Central differences with eps = 1e-5 against the analytic reverse-mode
gradients, compared by relative error |a - n| / max(|a|, |n|, 1e-8).
Checks run in float64; stochastic ops must rebuild their Rng inside the
checked callable so repeated evaluations see identical samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .rng import Rng, STREAM_CHECK
from .tensor import Tensor, backward

EPS = 1e-5
REL_FLOOR = 1e-8


@dataclass
class WorstCoord:
    input_index: int
    coord: tuple
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    name: str
    tol: float
    max_rel_err: float
    passed: bool
    worst: Optional[WorstCoord] = None

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        extra = ""
        if self.worst is not None and not self.passed:
            extra = (f"  worst input[{self.worst.input_index}]{self.worst.coord}"
                     f" analytic={self.worst.analytic:.6e} numeric={self.worst.numeric:.6e}")
        return f"{self.name:<28s} max_rel_err={self.max_rel_err:.3e} tol={self.tol:.0e} {status}{extra}"


def rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), REL_FLOOR)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
               tol: float = 1e-4, eps: float = EPS, max_coords: int = 100,
               rng: Optional[Rng] = None, name: str = "op") -> GradCheckReport:
    """Compare analytic and numeric gradients of `fn` at `inputs`.

    `fn` maps Tensors (one per input array) to a scalar Tensor and must
    be pure: two calls with the same inputs return the same value. At
    most `max_coords` coordinates per input are probed, sampled with
    `rng` (all coordinates when the tensor is small enough).

    Disagreement is reported, never raised.
    """
    rng = rng or Rng(0, STREAM_CHECK)
    arrays = [np.asarray(a, dtype=np.float64) for a in inputs]

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    backward(out)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def value_at(pert_idx: int, flat_coord: int, delta: float) -> float:
        probe = [a.copy() for a in arrays]
        probe[pert_idx].reshape(-1)[flat_coord] += delta
        return fn(*[Tensor(p) for p in probe]).item()

    worst: Optional[WorstCoord] = None
    max_err = 0.0
    for i, a in enumerate(arrays):
        size = a.size
        if size == 0:
            continue
        if size <= max_coords:
            coords = np.arange(size)
        else:
            coords = rng.choice_without_replacement(size, max_coords)
        for c in coords:
            n = (value_at(i, int(c), eps) - value_at(i, int(c), -eps)) / (2.0 * eps)
            an = float(analytic[i].reshape(-1)[int(c)])
            e = rel_err(an, n)
            if e > max_err:
                max_err = e
                worst = WorstCoord(i, np.unravel_index(int(c), a.shape), an, n)
    return GradCheckReport(name=name, tol=tol, max_rel_err=max_err,
                           passed=max_err <= tol, worst=worst)


# Registered checks, grouped by the module they validate. The CLI
# `gradcheck` subcommand and the acceptance suite both run these.

@dataclass
class CheckSpec:
    name: str
    scope: str
    tol: float
    builder: Callable[[Rng], tuple]  # -> (fn, inputs)


REGISTRY: List[CheckSpec] = []


def register(name: str, scope: str, tol: float = 1e-4):
    def deco(builder):
        REGISTRY.append(CheckSpec(name=name, scope=scope, tol=tol, builder=builder))
        return builder

    return deco


def scopes() -> List[str]:
    out = []
    for spec in REGISTRY:
        if spec.scope not in out:
            out.append(spec.scope)
    return out


def run_suite(scope: str = "all", corrupt: Optional[str] = None,
              rng: Optional[Rng] = None) -> List[GradCheckReport]:
    """Run every registered check in `scope` ('all' for everything).

    `corrupt` is a test hook: the named op's analytic gradients are
    scaled by 1.5 before comparison, which must make the check fail.
    """
    from . import checks  # noqa: F401  (populates REGISTRY on first use)

    rng = rng or Rng(0, STREAM_CHECK)
    reports = []
    for spec in REGISTRY:
        if scope not in ("all", spec.scope):
            continue
        fn, inputs = spec.builder(rng)
        run_fn = _corrupted(fn) if corrupt == spec.name else fn
        reports.append(grad_check(run_fn, inputs, tol=spec.tol, rng=rng, name=spec.name))
    return reports


def _corrupted(fn):
    def wrapper(*tensors):
        out = fn(*tensors)
        node = out.node
        if node is not None:
            orig = node.backward_fn
            node.backward_fn = lambda g: [None if x is None else 1.5 * x for x in orig(g)]
        return out

    return wrapper
