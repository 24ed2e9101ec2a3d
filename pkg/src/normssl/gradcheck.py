"""Central finite-difference checking of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, track_kinks


class NonDeterministicError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    checked: int
    excluded: list[tuple[int, ...]] = field(default_factory=list)
    worst_index: tuple[int, ...] | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"{verdict} max_rel_err={self.max_rel_error:.3e} tol={self.tol:.0e} "
            f"checked={self.checked} excluded={len(self.excluded)}"
        )


def rel_error(
    analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6, scale_floor: float = 1e-5
) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor, scale_floor * max|g|)``.

    Central differences at step 1e-5 carry roundoff near 1e-9 of the gradient
    scale, so components far below the largest one are judged against that
    scale instead of their own magnitude.
    """
    mag = np.maximum(np.abs(analytic), np.abs(numeric))
    denom = max(floor, scale_floor * float(mag.max())) if mag.size else floor
    return np.abs(analytic - numeric) / np.maximum(mag, denom)


def _eval(f: Callable[[Tensor], Tensor], x: np.ndarray) -> tuple[float, list[np.ndarray]]:
    with track_kinks() as kinks:
        val = f(Tensor(x.copy())).item()
    return val, kinks


def _same_kinks(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(p, q) for p, q in zip(a, b))


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: np.ndarray | Tensor,
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare the autodiff gradient of scalar ``f`` at ``x`` with central
    differences.

    Coordinates whose +/- step perturbation flips the sign pattern of any relu
    input straddle a kink and are excluded from the error (reported in
    ``excluded``); relu inputs at exactly 0 count as such a kink.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    base_val, base_kinks = _eval(f, x0)
    again, _ = _eval(f, x0)
    if base_val != again:
        raise NonDeterministicError(f"two forward passes disagree: {base_val!r} vs {again!r}")

    xt = Tensor(x0.copy(), requires_grad=True)
    with track_kinks():
        out = f(xt)
    out.backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    mask = np.ones(x0.shape, dtype=bool)
    excluded: list[tuple[int, ...]] = []
    flat = x0.reshape(-1)
    for i in range(flat.size):
        idx = np.unravel_index(i, x0.shape)
        xp = x0.copy()
        xp[idx] += step
        xm = x0.copy()
        xm[idx] -= step
        fp, kp = _eval(f, xp)
        fm, km = _eval(f, xm)
        if not (_same_kinks(kp, base_kinks) and _same_kinks(km, base_kinks)):
            excluded.append(tuple(int(j) for j in idx))
            mask[idx] = False
            continue
        numeric[idx] = (fp - fm) / (2 * step)

    errs = rel_error(np.where(mask, analytic, 0.0), numeric, floor)
    errs = np.where(mask, errs, 0.0)
    worst = np.unravel_index(int(np.argmax(errs)), errs.shape) if errs.size else None
    return GradCheckReport(
        max_rel_error=float(errs.max()) if errs.size else 0.0,
        tol=tol,
        checked=int(mask.sum()),
        excluded=excluded,
        worst_index=tuple(int(j) for j in worst) if worst is not None else None,
    )


def check_many(
    f: Callable[[Tensor], Tensor],
    inputs: Sequence[np.ndarray],
    step: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Run ``grad_check`` on each input and merge into one worst-case report."""
    worst = 0.0
    checked = 0
    excluded: list[tuple[int, ...]] = []
    for x in inputs:
        rep = grad_check(f, x, step, tol)
        worst = max(worst, rep.max_rel_error)
        checked += rep.checked
        excluded.extend(rep.excluded)
    return GradCheckReport(max_rel_error=worst, tol=tol, checked=checked, excluded=excluded)
