"""Thinning simulation of a kernel-driven point process.

The dominating rate after ``n`` accepted events is ``mu + B * n`` where
``B`` is the certified pointwise kernel bound from
:func:`~nsmpp.kernel.kernel_sup_bound`. Between acceptances the bound is
constant, candidates arrive as a Poisson stream of rate ``bound * |M|``
with uniform marks, and a candidate at ``x`` is kept with probability
``lambda(x) / bound``. This is exact for box mark spaces and does not
assume the kernel decays in time.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import Dataset, Domain, EventSequence, rng_for
from .kernel import KernelModel, kernel_sup_bound


class BoundViolation(RuntimeError):
    """The intensity exceeded the dominating rate; the kernel bound is wrong."""


@dataclass(frozen=True)
class SimConfig:
    model: KernelModel
    domain: Domain
    seed: int = 0
    max_events: int = 100_000
    bound_mode: str = "global"

    def __post_init__(self):
        if self.max_events < 1:
            raise ValueError("max_events must be >= 1")
        if self.bound_mode != "global":
            raise ValueError(f"unsupported bound_mode {self.bound_mode!r}")


class _NoKernel:
    def excitation(self, t, m):
        return np.zeros(len(t))

    def add(self, t, m):
        pass


def simulate(cfg: SimConfig, index: Optional[int] = None, trace: Optional[list] = None,
             block: int = 64) -> EventSequence:
    """One sequence. ``index`` selects the derived stream ``(seed, index)``.

    Candidates are drawn ``block`` at a time: the bound only changes on
    acceptance, so everything up to the first accepted candidate of a block
    is an ordinary thinning step and the rest of the block is discarded.
    ``trace``, when given, receives ``(t, lambda, bound, accepted)`` for each
    candidate that was examined. A run that hits ``max_events`` comes back
    with ``exploded=True``.
    """
    rng = rng_for(cfg.seed, "sim", index) if index is not None else np.random.default_rng(cfg.seed)
    model, dom = cfg.model, cfg.domain
    state = _NoKernel() if model.kernel is None else model.kernel.sim_state()
    B = kernel_sup_bound(model)
    vol = dom.mark_volume
    lo, hi, d = np.asarray(dom.mark_lo), np.asarray(dom.mark_hi), dom.mark_dim
    T = dom.horizon_T
    times, marks = [], []
    t = 0.0
    exploded = False
    while True:
        bound = model.mu + B * len(times)
        if bound <= 0:
            break
        ts = t + np.cumsum(rng.exponential(1.0 / (bound * vol), block))
        ms = rng.uniform(lo, hi, (block, d)) if d else np.empty((block, 0))
        us = rng.uniform(size=block)
        n_in = int(np.searchsorted(ts, T))
        if n_in == 0:
            break
        lam = model.mu + state.excitation(ts[:n_in], ms[:n_in])
        hits = np.flatnonzero(us[:n_in] * bound < lam)
        stop = int(hits[0]) if hits.size else n_in - 1
        worst = int(np.argmax(lam[:stop + 1]))
        if lam[worst] > bound * (1 + 1e-9):
            raise BoundViolation(f"intensity {lam[worst]} exceeds bound {bound} at t={ts[worst]} "
                                 f"with {len(times)} events in history")
        if trace is not None:
            trace.extend((float(ts[i]), float(lam[i]), bound, i == stop and hits.size > 0)
                         for i in range(stop + 1))
        t = float(ts[stop])
        if not hits.size:
            if n_in < block:
                break
            continue
        state.add(t, ms[stop])
        times.append(t)
        marks.append(ms[stop])
        if len(times) >= cfg.max_events:
            exploded = True
            break
    return EventSequence(times, np.array(marks).reshape(len(times), d), dom, exploded=exploded)


def simulate_dataset(cfg: SimConfig, n_sequences: int, threads: int = 1) -> Dataset:
    """``n_sequences`` independent runs; run ``j`` uses the stream ``(seed, j)``."""
    if n_sequences < 1:
        raise ValueError("n_sequences must be >= 1")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            seqs = list(pool.map(lambda j: simulate(cfg, j), range(n_sequences)))
    else:
        seqs = [simulate(cfg, j) for j in range(n_sequences)]
    return Dataset(seqs, cfg.domain)
