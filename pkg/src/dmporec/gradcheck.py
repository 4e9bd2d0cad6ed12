"""Central finite differences against analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class GradCheckResult:
    worst_rel_err: float
    worst_param: str
    per_param: dict[str, float] = field(default_factory=dict)
    n_checked: int = 0

    def passed(self, tol: float = 1e-3) -> bool:
        return self.worst_rel_err < tol


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max over entries of ``|a - n| / max(|a| + |n|, floor)``.

    The floor keeps entries whose true gradient is ~0 from blowing up the
    ratio; below it the absolute difference is compared instead.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)))


def numeric_grad(f: Callable[[], float], arr: np.ndarray, step: float = 1e-4,
                 index=None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. entries of ``arr`` (modified in place, then restored).

    ``index`` restricts the check to a list of flat indices; other entries are
    left as NaN.
    """
    flat = arr.reshape(-1)
    out = np.full(flat.shape, np.nan)
    idx = range(flat.size) if index is None else index
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * step)
    return out.reshape(arr.shape)


def check_gradients(f: Callable[[], float], params: dict[str, np.ndarray],
                    analytic: dict[str, np.ndarray], names=None, step: float = 1e-4,
                    max_entries: int | None = None, rng=None) -> GradCheckResult:
    """Compare ``analytic[name]`` with central differences of ``f`` for each name.

    With ``max_entries`` set, a random subset of entries per tensor is checked.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    names = list(analytic) if names is None else list(names)
    res = GradCheckResult(0.0, "")
    for name in names:
        arr = params[name]
        if max_entries is not None and arr.size > max_entries:
            index = rng.choice(arr.size, size=max_entries, replace=False)
        else:
            index = np.arange(arr.size)
        num = numeric_grad(f, arr, step, index)
        err = rel_error(analytic[name].reshape(-1)[index], num.reshape(-1)[index])
        res.per_param[name] = err
        res.n_checked += len(index)
        if err >= res.worst_rel_err:
            res.worst_rel_err, res.worst_param = err, name
    return res
