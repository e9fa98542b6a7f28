"""Log-likelihood of a kernel model over a set of sequences, with a Monte-Carlo compensator.

For one sequence with events ``x_1..x_N``::

    l_j = sum_i log lambda_j(x_i) - integral_X lambda_j(x) dx

and the integral is estimated by averaging the intensity at ``n_samples``
points drawn uniformly on ``[0, T) x M`` and multiplying by ``|X|``. The
same draws serve the value and the gradient of one evaluation.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import Dataset, EventSequence, rng_for
from .kernel import BasisKernel, KernelModel

LOG_FLOOR = 1e-8


@dataclass(frozen=True)
class MCIntegralConfig:
    n_samples: int = 1000
    seed: int = 0
    resample_each_step: bool = True

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


def draw_samples(domain, cfg: MCIntegralConfig, seq_index: int = 0, step: int = 0):
    """Uniform draws for sequence ``seq_index`` at optimizer step ``step``.

    With ``resample_each_step`` off the step is ignored, so repeated calls
    see the same points.
    """
    rng = rng_for(cfg.seed, "mc", seq_index, step if cfg.resample_each_step else 0)
    return domain.sample_uniform(rng, cfg.n_samples)


def mc_integral(model: KernelModel, seq: EventSequence, cfg: MCIntegralConfig,
                seq_index: int = 0, step: int = 0, return_stderr: bool = False):
    """Unbiased estimate of the compensator ``integral_X lambda(x) dx``."""
    t, m = draw_samples(seq.domain, cfg, seq_index, step)
    lam, _ = model.excitation_vjp(seq.times, seq.marks, t, m)
    vol = seq.domain.volume
    est = vol * float(np.mean(lam))
    if not return_stderr:
        return est
    se = vol * float(np.std(lam, ddof=1)) / np.sqrt(len(lam)) if len(lam) > 1 else float("nan")
    return est, se


@dataclass
class LogLikResult:
    per_sequence: np.ndarray
    event_terms: np.ndarray
    integral_terms: np.ndarray
    n_floored: int = 0

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_sequence))

    def to_dict(self) -> dict:
        return {
            "loglik": self.mean,
            "per_sequence": self.per_sequence.tolist(),
            "event_terms": self.event_terms.tolist(),
            "integral_terms": self.integral_terms.tolist(),
            "n_floored": int(self.n_floored),
        }


def _sequence_terms(model, seq, cfg, seq_index, step, want_grad):
    n = len(seq)
    mt, mm = draw_samples(seq.domain, cfg, seq_index, step)
    qt = np.concatenate([seq.times, mt])
    qm = np.vstack([seq.marks, mm])
    lam, vjp = model.excitation_vjp(seq.times, seq.marks, qt, qm)
    lam_ev = lam[:n]
    floored = lam_ev < LOG_FLOOR
    ev = float(np.sum(np.log(np.where(floored, LOG_FLOOR, lam_ev))))
    vol = seq.domain.volume
    integral = vol * float(np.mean(lam[n:]))
    grad = None
    if want_grad:
        w = np.empty(len(qt))
        w[:n] = np.where(floored, 0.0, 1.0 / np.where(floored, 1.0, lam_ev))
        w[n:] = -vol / cfg.n_samples
        grad = vjp(w)
    return ev, integral, int(floored.sum()), grad


def _map(fn, items, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _evaluate(model, sequences, cfg, step, indices, want_grad, threads):
    sequences = list(sequences)
    if not sequences:
        raise ValueError("need at least one sequence")
    if indices is None:
        indices = range(len(sequences))
    items = list(zip(sequences, indices))
    out = _map(lambda it: _sequence_terms(model, it[0], cfg, it[1], step, want_grad), items, threads)
    ev = np.array([o[0] for o in out])
    integ = np.array([o[1] for o in out])
    res = LogLikResult(ev - integ, ev, integ, sum(o[2] for o in out))
    if not want_grad:
        return res, None
    grad = np.zeros(model.n_params)
    for o in out:                     # fixed order keeps the reduction reproducible
        grad += o[3]
    return res, grad / len(out)


def log_likelihood(model: KernelModel, data, cfg: MCIntegralConfig = MCIntegralConfig(),
                   step: int = 0, indices: Optional[Sequence[int]] = None,
                   threads: int = 1) -> LogLikResult:
    """Dataset-average log-likelihood.

    ``indices`` label each sequence for MC seeding (defaults to position),
    so a sequence sees the same draws whichever batch it lands in.
    """
    seqs = data.sequences if isinstance(data, Dataset) else data
    return _evaluate(model, seqs, cfg, step, indices, False, threads)[0]


def log_likelihood_and_grad(model: KernelModel, data, cfg: MCIntegralConfig = MCIntegralConfig(),
                            step: int = 0, indices=None, threads: int = 1):
    seqs = data.sequences if isinstance(data, Dataset) else data
    return _evaluate(model, seqs, cfg, step, indices, True, threads)


def log_likelihood_grad(model: KernelModel, data, cfg: MCIntegralConfig = MCIntegralConfig(),
                        step: int = 0, indices=None, threads: int = 1) -> np.ndarray:
    return log_likelihood_and_grad(model, data, cfg, step, indices, threads)[1]


def basis_hessian(model: KernelModel, data) -> np.ndarray:
    """Hessian of the log-likelihood over ``vec(A)`` for a basis-kernel model.

    ``-(1/M) sum_j sum_i eta(x_i) eta(x_i)^T / lambda(x_i)^2``; the
    compensator is linear in ``A`` and drops out.
    """
    k = model.kernel
    if not isinstance(k, BasisKernel):
        raise TypeError("basis_hessian needs a BasisKernel model")
    seqs = data.sequences if isinstance(data, Dataset) else list(data)
    S = k.basis.size
    H = np.zeros((S * S, S * S))
    for seq in seqs:
        if not len(seq):
            continue
        c, b = k.history_features(seq.times, seq.marks, seq.times, seq.marks)
        eta = (c[:, :, None] * b[:, None, :]).reshape(len(seq), -1)
        lam = model.mu + eta @ k.A.ravel()
        H -= (eta / lam[:, None] ** 2).T @ eta
    return H / len(seqs)
