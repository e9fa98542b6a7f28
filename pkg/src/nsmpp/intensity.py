"""Conditional intensity ``lambda(x) = mu + sum_{x' in H_t(x)} k(x', x)``."""

from __future__ import annotations

import numpy as np

from .core import DataError, EventPoint, EventSequence
from .kernel import KernelModel


def intensity(model: KernelModel, seq: EventSequence, qt, qm=None) -> np.ndarray:
    """Vectorized intensity at query times ``qt`` (and marks ``qm``), conditioned on ``seq``.

    History is every event with time strictly below the query time.
    """
    qt = np.atleast_1d(np.asarray(qt, dtype=float))
    d = seq.domain.mark_dim
    qm = np.empty((len(qt), d)) if qm is None else np.asarray(qm, dtype=float).reshape(len(qt), d)
    lam, _ = model.excitation_vjp(seq.times, seq.marks, qt, qm)
    model.check_bounds(lam)
    return lam


def lambda_at(model: KernelModel, seq: EventSequence, x) -> float:
    if not isinstance(x, EventPoint):
        x = EventPoint(x[0], tuple(x[1:]))
    if not seq.domain.contains(x.t, x.m) or len(x.m) != seq.domain.mark_dim:
        raise DataError(f"query point {x} lies outside the domain")
    return float(intensity(model, seq, [x.t], np.reshape(x.m, (1, -1)))[0])


def lambda_trace(model: KernelModel, seq: EventSequence, time_grid, mark_grid=None) -> np.ndarray:
    """Intensity on the tensor grid ``time_grid x mark_grid``.

    ``mark_grid`` is a list of 1-D node arrays, one per mark axis. The result
    has shape ``(len(time_grid), *map(len, mark_grid))``.
    """
    time_grid = np.asarray(time_grid, dtype=float)
    dom = seq.domain
    if np.any(time_grid < 0) or np.any(time_grid >= dom.horizon_T):
        raise DataError("time grid leaves [0, T)")
    mark_grid = [np.asarray(g, dtype=float) for g in (mark_grid or [])]
    if len(mark_grid) != dom.mark_dim:
        raise DataError(f"need {dom.mark_dim} mark axes, got {len(mark_grid)}")
    for i, g in enumerate(mark_grid):
        if np.any(g < dom.mark_lo[i]) or np.any(g > dom.mark_hi[i]):
            raise DataError(f"mark grid axis {i} leaves the mark box")
    qt, qm = grid_points(time_grid, mark_grid)
    lam = intensity(model, seq, qt, qm)
    return lam.reshape((len(time_grid),) + tuple(len(g) for g in mark_grid))


def grid_points(time_grid, mark_grid):
    """Flatten a tensor grid into query arrays ``(t, m)`` in row-major order."""
    axes = [np.asarray(time_grid, dtype=float)] + [np.asarray(g, dtype=float) for g in mark_grid]
    mesh = np.meshgrid(*axes, indexing="ij")
    flat = np.column_stack([a.ravel() for a in mesh])
    return flat[:, 0], flat[:, 1:]


def write_trace_csv(path, time_grid, mark_grid, values: np.ndarray) -> None:
    """CSV ``t,m...,lambda`` with one row per grid node."""
    mark_grid = list(mark_grid or [])
    qt, qm = grid_points(time_grid, mark_grid)
    head = ["t"] + [f"m{i + 1}" for i in range(len(mark_grid))] + ["lambda"]
    lines = [",".join(head)]
    for t, m, v in zip(qt, qm, np.asarray(values).ravel()):
        lines.append(",".join([repr(float(t))] + [repr(float(x)) for x in m] + [repr(float(v))]))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
