"""Intensity MAE, predictive log-likelihood and figure-data export."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import DataError, Domain, EventSequence
from .intensity import grid_points, intensity, lambda_trace, write_trace_csv
from .kernel import KernelModel, kernel_grid, write_kernel_grid_csv
from .likelihood import MCIntegralConfig, log_likelihood


@dataclass(frozen=True)
class EvalGrid:
    """Cell-centred tensor grid: ``n_time`` cells over ``[0, T)``, ``n_mark`` per mark axis.

    Nodes sit at cell midpoints (half a step away from the edges), so the
    weights ``cell volume`` integrate constants exactly.
    """

    n_time: int = 1000
    n_mark: int = 50

    def __post_init__(self):
        if self.n_time < 2 or self.n_mark < 2:
            raise ValueError("need at least 2 nodes per axis")

    def axes(self, domain: Domain):
        h = domain.horizon_T / self.n_time
        tg = (np.arange(self.n_time) + 0.5) * h
        mg = [lo + (np.arange(self.n_mark) + 0.5) * (hi - lo) / self.n_mark
              for lo, hi in zip(domain.mark_lo, domain.mark_hi)]
        return tg, mg

    def cell_volume(self, domain: Domain) -> float:
        return domain.volume / (self.n_time * self.n_mark ** domain.mark_dim)


def intensity_mae(true_model: KernelModel, fitted_model: KernelModel, test_sequences,
                  grid: EvalGrid = EvalGrid(), per_sequence: bool = False):
    """Average over sequences of ``integral |lambda_true - lambda_fitted| dx`` on ``grid``.

    Both intensities condition on the same test history.
    """
    seqs = list(getattr(test_sequences, "sequences", test_sequences))
    if not seqs:
        raise DataError("no test sequences")
    dom = seqs[0].domain
    for model in (true_model, fitted_model):
        basis = getattr(model.kernel, "basis", None)
        if basis is not None and basis.domain != dom:
            raise DataError("model and test sequences live on different domains")
    tg, mg = grid.axes(dom)
    qt, qm = grid_points(tg, mg)
    w = grid.cell_volume(dom)
    vals = np.array([w * np.sum(np.abs(intensity(true_model, s, qt, qm) - intensity(fitted_model, s, qt, qm)))
                     for s in seqs])
    return vals if per_sequence else float(np.mean(vals))


def predictive_loglik(fitted_model: KernelModel, test_dataset, cfg: MCIntegralConfig = MCIntegralConfig(),
                      indices=None) -> float:
    return log_likelihood(fitted_model, test_dataset, cfg, indices=indices).mean


@dataclass
class EvalReport:
    predictive_ll: float
    ll_per_sequence: list
    mae: Optional[float] = None
    mae_per_sequence: Optional[list] = None
    n_floored: int = 0
    files: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {"predictive_ll": self.predictive_ll, "ll_per_sequence": self.ll_per_sequence,
             "n_floored": self.n_floored}
        if self.mae is not None:
            d["mae"] = self.mae
            d["mae_per_sequence"] = self.mae_per_sequence
        if self.files:
            d["files"] = self.files
        return d


def evaluate(fitted_model: KernelModel, test_dataset, cfg: MCIntegralConfig = MCIntegralConfig(),
             true_model: Optional[KernelModel] = None, grid: EvalGrid = EvalGrid(),
             indices=None) -> EvalReport:
    res = log_likelihood(fitted_model, test_dataset, cfg, indices=indices)
    rep = EvalReport(res.mean, res.per_sequence.tolist(), n_floored=res.n_floored)
    if true_model is not None:
        per = intensity_mae(true_model, fitted_model, test_dataset, grid, per_sequence=True)
        rep.mae, rep.mae_per_sequence = float(np.mean(per)), per.tolist()
    return rep


def kernel_axes(domain: Domain, n: int = 100):
    """Cell-centred node vectors for the time axis and every mark axis."""
    return EvalGrid(max(n, 2), max(n, 2)).axes(domain)


def kernel_slice(model: KernelModel, domain: Domain, fixed: dict, n: int = 50):
    """Kernel on a 2-D slice of ``(t_prev, m_prev..., t, m...)``.

    ``fixed`` maps every coordinate name except two to a value; the two free
    coordinates are swept over ``n`` cell-centred nodes. Returns
    ``(prev_points, points, grid, free_names)`` in the shape used by
    :func:`kernel_grid` with one row per ``(free_0)`` node.
    """
    d = domain.mark_dim
    names = ["t_prev"] + [f"m_prev{i + 1}" for i in range(d)] + ["t"] + [f"m{i + 1}" for i in range(d)]
    free = [c for c in names if c not in fixed]
    unknown = set(fixed) - set(names)
    if unknown or len(free) != 2:
        raise ValueError(f"slice must fix all but two of {names}")
    tg, mg = kernel_axes(domain, n)
    ax = {"t_prev": tg, "t": tg}
    for i in range(d):
        ax[f"m_prev{i + 1}"] = mg[i]
        ax[f"m{i + 1}"] = mg[i]
    a_nodes, b_nodes = ax[free[0]], ax[free[1]]
    grid = np.full((len(a_nodes), len(b_nodes)), np.nan)
    rows_p, rows_q = [], []
    for i, a in enumerate(a_nodes):
        for j, b in enumerate(b_nodes):
            c = dict(fixed, **{free[0]: a, free[1]: b})
            p = [c["t_prev"]] + [c[f"m_prev{k + 1}"] for k in range(d)]
            q = [c["t"]] + [c[f"m{k + 1}"] for k in range(d)]
            rows_p.append(p)
            rows_q.append(q)
    P, Q = np.array(rows_p), np.array(rows_q)
    causal = P[:, 0] < Q[:, 0]
    flat = np.full(len(P), np.nan)
    if causal.any():
        if model.kernel is None:
            flat[causal] = 0.0
        else:
            flat[causal] = model.kernel.pair_values(P[causal, 0], P[causal, 1:], Q[causal, 0], Q[causal, 1:])
    return P, Q, flat.reshape(len(a_nodes), len(b_nodes)), free


def _write_slice_csv(path, P, Q, flat, d):
    head = ["t_prev"] + [f"m_prev{i + 1}" for i in range(d)] + ["t"] + [f"m{i + 1}" for i in range(d)] + ["k"]
    lines = [",".join(head)]
    for p, q, k in zip(P, Q, flat.ravel()):
        lines.append(",".join([repr(float(v)) for v in p] + [repr(float(v)) for v in q] +
                              ["" if np.isnan(k) else repr(float(k))]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def export_figure_data(models: dict, sequences, out_dir, grid: EvalGrid = EvalGrid(200, 50),
                       kernel_n: int = 100, seq_indices=(0,), slices=(), config: Optional[dict] = None) -> dict:
    """Write kernel grids, intensity traces and (for marked data) kernel slices.

    ``models`` maps a label (``"true"``, ``"fitted"``, ...) to a model.
    For ``mark_dim == 0`` each model gets a full ``t_prev x t`` kernel grid;
    otherwise each entry of ``slices`` (a dict of fixed coordinates, see
    :func:`kernel_slice`) produces one file per model. Returns the manifest,
    which is also written to ``manifest.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seqs = list(getattr(sequences, "sequences", sequences))
    if not seqs:
        raise DataError("no sequences to export")
    dom = seqs[0].domain
    d = dom.mark_dim
    files = []

    def record(path, kind, **meta):
        files.append(dict(path=path.name, kind=kind, **meta))

    tg, mg = grid.axes(dom)
    for label, model in models.items():
        if d == 0:
            kt, _ = kernel_axes(dom, kernel_n)
            pts = kt.reshape(-1, 1)
            K = kernel_grid(model, pts, pts, mark_dim=0)
            path = out / f"kernel_{label}.csv"
            try:
                write_kernel_grid_csv(path, pts, pts, K, 0)
            except OSError as e:
                raise OSError(f"cannot write {path}: {e}") from e
            record(path, "kernel_grid", model=label, n=kernel_n)
        for s_i, fixed in enumerate(slices):
            P, Q, flat, free = kernel_slice(model, dom, fixed, kernel_n)
            path = out / f"kernel_{label}_slice{s_i}.csv"
            _write_slice_csv(path, P, Q, flat, d)
            record(path, "kernel_slice", model=label, fixed=fixed, free=free)
        for j in seq_indices:
            lam = lambda_trace(model, seqs[j], tg, mg)
            path = out / f"intensity_{label}_seq{j}.csv"
            write_trace_csv(path, tg, mg, lam)
            record(path, "intensity_trace", model=label, sequence=int(j))
    for j in seq_indices:
        path = out / f"events_seq{j}.csv"
        s = seqs[j]
        lines = [",".join(["t"] + [f"m{i + 1}" for i in range(d)])]
        lines += [",".join([repr(float(t))] + [repr(float(v)) for v in m]) for t, m in zip(s.times, s.marks)]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        record(path, "events", sequence=int(j))
    manifest = {"files": files, "config": config or {},
                "grid": {"n_time": grid.n_time, "n_mark": grid.n_mark, "kernel_n": kernel_n}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest
