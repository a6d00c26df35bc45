"""Shared oracles and comparison helpers for the test suite."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from gcrl.numcore import finite_diff_grad, flatten, unflatten_into

# one "PASS/FAIL Cn ..." line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []

# entries smaller than this are compared on an absolute scale
REL_FLOOR = 1e-6


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_grads(f: Callable[[], float], arrays: Sequence[np.ndarray], eps: float = 1e-6) -> np.ndarray:
    """Central differences of ``f()`` with respect to arrays that ``f`` reads in place."""
    x0 = flatten(arrays).astype(np.float64)

    def g(x):
        unflatten_into(x, arrays)
        return f()

    try:
        return finite_diff_grad(g, x0, eps)
    finally:
        unflatten_into(x0, arrays)


def naive_matmul(a, b):
    n, k = len(a), len(a[0])
    m = len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += float(a[i][t]) * float(b[t][j])
            out[i][j] = s
    return np.array(out)


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} C{number} {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
