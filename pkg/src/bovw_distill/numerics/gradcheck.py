"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


class NonFiniteError(ArithmeticError):
    pass


@dataclass
class GradcheckReport:
    name: str
    max_rel_error: float
    max_abs_error: float
    n_coords: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err {self.max_rel_error:.3e} over {self.n_coords} coords (tol {self.tol:g})"


def _scalar(f: Callable[[], Tensor]) -> float:
    val = f()
    v = float(np.asarray(val.data).reshape(-1)[0]) if val.size == 1 else float("nan")
    if val.size != 1:
        raise ValueError(f"gradcheck needs a scalar function, got shape {val.shape}")
    if not np.isfinite(v):
        raise NonFiniteError(f"function value is not finite: {v}")
    return v


def analytic_gradients(f: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    out = f()
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError("function value is not finite")
    out.backward()
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def gradcheck(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-6,
    tol: float = 1e-4,
    name: str = "f",
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradcheckReport:
    """Compare backward() against (f(x+h) - f(x-h)) / 2h coordinate by coordinate.

    The relative error of a coordinate is |a - n| / max(|a|, |n|, 1), so
    near-zero gradients are judged on an absolute scale.
    """
    if not 1e-7 <= h <= 1e-5:
        raise ValueError(f"step h={h} outside [1e-7, 1e-5]")
    analytic = analytic_gradients(f, params)

    coords = [(pi, idx) for pi, p in enumerate(params) for idx in np.ndindex(p.shape)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    max_rel = max_abs = 0.0
    with no_grad():
        for pi, idx in coords:
            arr = params[pi].data
            x0 = arr[idx]
            xp, xm = x0 + h, x0 - h
            arr[idx] = xp
            fp = _scalar(f)
            arr[idx] = xm
            fm = _scalar(f)
            arr[idx] = x0
            numeric = (fp - fm) / (xp - xm)
            a = analytic[pi][idx]
            err = abs(a - numeric)
            max_abs = max(max_abs, err)
            max_rel = max(max_rel, err / max(abs(a), abs(numeric), 1.0))
    return GradcheckReport(name, max_rel, max_abs, len(coords), tol)
