"""Central-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NonFiniteError, RejectedInput
from .tensor import Tensor, check_finite, no_grad


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str | None
    worst_index: tuple | None
    analytic: float
    numeric: float
    per_param: dict = field(default_factory=dict)
    n_coords: int = 0

    def passed(self, tol):
        return self.max_rel_err <= tol


def _named(params):
    if hasattr(params, "learnable_items"):
        return list(params.learnable_items())
    if isinstance(params, dict):
        return list(params.items())
    return [(f"p{i}", t) for i, t in enumerate(params)]


def _scalar(f):
    out = f()
    val = float(np.asarray(out.data).reshape(-1)[0]) if out.data.size == 1 else None
    if val is None:
        raise RejectedInput("grad_check needs a scalar-valued function")
    return out, val


def _evaluate(f):
    with no_grad():
        _, val = _scalar(f)
    if not np.isfinite(val):
        # rerun with per-primitive checks to name the culprit
        with no_grad(), check_finite(True):
            f()
        raise NonFiniteError("loss", "non-finite value without a non-finite primitive")
    return val


def grad_check(f, params, h=1e-5, max_coords=None, seed=0):
    """Compare reverse-mode gradients of ``f()`` with central differences.

    ``params`` is a ParamStore (its learnable partition is checked), a dict
    of name -> Tensor, or a list of Tensors. ``max_coords`` caps the number
    of sampled coordinates per parameter (all coordinates when None).
    Error per coordinate is |a - n| / max(1, |a|, |n|).
    """
    named = _named(params)
    for name, t in named:
        if t.data.dtype != np.float64:
            raise RejectedInput(f"grad_check needs 64-bit parameters; {name} is {t.data.dtype}")

    for _, t in named:
        t.grad = None
    out, val = _scalar(f)
    if not np.isfinite(val):
        _evaluate(f)
    out.backward()

    rng = np.random.default_rng(seed)
    report = GradCheckReport(0.0, None, None, 0.0, 0.0)
    for name, t in named:
        analytic_all = np.zeros_like(t.data) if t.grad is None else t.grad
        flat_ids = np.arange(t.data.size)
        if max_coords is not None and t.data.size > max_coords:
            flat_ids = rng.choice(t.data.size, size=max_coords, replace=False)
        worst = 0.0
        for fid in flat_ids:
            idx = np.unravel_index(int(fid), t.data.shape)
            orig = t.data[idx].copy()
            t.data[idx] = orig + h
            fp = _evaluate(f)
            t.data[idx] = orig - h
            fm = _evaluate(f)
            t.data[idx] = orig
            numeric = (fp - fm) / (2 * h)
            analytic = float(analytic_all[idx])
            err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            worst = max(worst, err)
            report.n_coords += 1
            if err >= report.max_rel_err:
                report.max_rel_err = err
                report.worst_param, report.worst_index = name, tuple(int(i) for i in idx)
                report.analytic, report.numeric = analytic, numeric
        report.per_param[name] = worst
    return report


def scalar_param(value):
    return Tensor(np.asarray(value, dtype=np.float64), requires_grad=True, dtype=np.float64)
