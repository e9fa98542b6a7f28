"""Influence kernels ``k(x', x)`` and the :class:`KernelModel` that wraps them.

Three families share one interface:

* :class:`SpectralKernel` -- ``sum_r nu_r psi_r(x') phi_r(x)`` with neural
  feature maps and ``nu_r = softplus(rho_r)``.
* :class:`ExpHawkesKernel` -- the stationary ``alpha*beta*exp(-beta*(t - t'))``.
* :class:`BasisKernel` -- ``b(x')^T A b(x)`` on a tensor cosine basis.

Besides per-pair evaluation, every family implements ``excitation_vjp``:
the summed influence of a sequence's history at a batch of query points,
plus a closure for its parameter gradient. The spectral and basis
families factor over the history, so a prefix sum over events replaces
the pairwise double loop.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from . import net as _net
from .core import Domain, EventPoint, as_points
from .net import NetSpec, softplus, softplus_inv, sigmoid


class CausalityError(ValueError):
    pass


def _gather_prefix(values: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Row ``q`` is the sum of ``values[:counts[q]]``."""
    csum = np.zeros((values.shape[0] + 1, values.shape[1]))
    np.cumsum(values, axis=0, out=csum[1:])
    return csum[counts]


def _scatter_suffix(contrib: np.ndarray, counts: np.ndarray, n: int) -> np.ndarray:
    """Adjoint of :func:`_gather_prefix`: row ``i`` sums ``contrib[q]`` over ``counts[q] > i``."""
    D = np.zeros((n + 1, contrib.shape[1]))
    np.add.at(D, counts, contrib)
    suffix = np.cumsum(D[::-1], axis=0)[::-1]
    return suffix[1:]


# --------------------------------------------------------------------- spectral


class SpectralKernel:
    family = "spectral"

    def __init__(self, net: NetSpec, params, spectrum_raw):
        self.net = net
        self.params = np.array(params, dtype=np.float64)
        self.spectrum_raw = np.array(spectrum_raw, dtype=np.float64).reshape(-1)
        if self.params.size != _net.n_params(net):
            raise ValueError("network parameter vector does not match its NetSpec")
        if self.spectrum_raw.size != net.rank:
            raise ValueError(f"spectrum has {self.spectrum_raw.size} entries, rank is {net.rank}")

    @classmethod
    def init(cls, mark_dim: int, rank: int = 5, trunk=(128, 128, 10), branch_hidden=(32, 32),
             output_scale: float = 100.0, input_scale: float = 1.0, seed=0,
             spectrum: Optional[float] = None) -> "SpectralKernel":
        """Fresh kernel; every ``nu_r`` starts at ``spectrum`` (default ``1/R``)."""
        spec = NetSpec(1 + mark_dim, tuple(trunk), 2 * rank, tuple(branch_hidden),
                       output_scale, input_scale)
        nu = 1.0 / rank if spectrum is None else spectrum
        return cls(spec, _net.init_params(spec, seed), np.full(rank, softplus_inv(nu)))

    @property
    def rank(self) -> int:
        return self.net.rank

    @property
    def nu(self) -> np.ndarray:
        return softplus(self.spectrum_raw)

    @property
    def n_params(self) -> int:
        return self.params.size + self.rank

    def get_params(self) -> np.ndarray:
        return np.concatenate([self.params, self.spectrum_raw])

    def with_params(self, theta) -> "SpectralKernel":
        n = self.params.size
        return SpectralKernel(self.net, theta[:n], theta[n:n + self.rank])

    def sup_bound(self) -> float:
        return float(np.sum(self.nu) * self.net.output_scale ** 2)

    def pair_values(self, tp, mp, t, m) -> np.ndarray:
        fp = _net.features(self.net, self.params, np.column_stack([tp, mp]))
        f = _net.features(self.net, self.params, np.column_stack([t, m]))
        return (fp.psi * f.phi) @ self.nu

    def pair_grad(self, tp, mp, t, m, upstream) -> np.ndarray:
        n = len(tp)
        X = np.vstack([np.column_stack([tp, mp]), np.column_stack([t, m])])
        feats, vjp = _net.features_vjp(self.net, self.params, X)
        psi, phi = feats.psi[:n], feats.phi[n:]
        u = np.asarray(upstream, dtype=float).reshape(-1, 1) * np.ones((n, 1))
        nu = self.nu
        dpsi = np.zeros_like(feats.psi)
        dphi = np.zeros_like(feats.phi)
        dpsi[:n] = u * nu * phi
        dphi[n:] = u * nu * psi
        dnu = np.sum(u * psi * phi, axis=0)
        return np.concatenate([vjp(dpsi, dphi), dnu * sigmoid(self.spectrum_raw)])

    def excitation_vjp(self, times, marks, qt, qm):
        n = len(times)
        X = np.vstack([np.column_stack([times, marks]), np.column_stack([qt, qm])])
        feats, vjp = _net.features_vjp(self.net, self.params, X)
        psi_ev, phi_q = feats.psi[:n], feats.phi[n:]
        counts = np.searchsorted(times, qt, side="left")
        cq = _gather_prefix(psi_ev, counts)
        nu = self.nu
        exc = (cq * phi_q) @ nu

        def grad(w):
            w = np.asarray(w, dtype=float)[:, None]
            dnu = np.sum(w * cq * phi_q, axis=0)
            dpsi = np.zeros_like(feats.psi)
            dphi = np.zeros_like(feats.phi)
            dphi[n:] = w * nu * cq
            dpsi[:n] = _scatter_suffix(w * nu * phi_q, counts, n)
            return np.concatenate([vjp(dpsi, dphi), dnu * sigmoid(self.spectrum_raw)])

        return exc, grad

    def sim_state(self):
        return _SpectralState(self)


class _SpectralState:
    def __init__(self, k: SpectralKernel):
        self.k = k
        self.nu = k.nu
        self.cum_psi = np.zeros(k.rank)
        self._last = (None, None)

    def _features(self, t, m):
        X = np.column_stack([np.atleast_1d(t), np.reshape(m, (np.size(t), -1))])
        return _net.features(self.k.net, self.k.params, X)

    def excitation(self, t, m) -> np.ndarray:
        """Excitation at a batch of candidates ``t`` (n,), ``m`` (n, d) given the history so far."""
        f = self._features(t, m)
        self._last = (np.atleast_1d(t), f.psi)
        return f.phi @ (self.nu * self.cum_psi)

    def add(self, t, m):
        # usually one of the candidates just evaluated, so its features are cached
        ts, psi = self._last
        hit = np.flatnonzero(ts == t) if ts is not None else ()
        row = psi[hit[0]] if len(hit) else self._features(t, m).psi[0]
        self.cum_psi = self.cum_psi + row


# ------------------------------------------------------------------ exponential


class ExpHawkesKernel:
    family = "exp"
    n_params = 2

    def __init__(self, alpha: float, beta: float):
        self.alpha = float(alpha)
        self.beta = float(beta)
        if self.alpha < 0 or not self.beta > 0:
            raise ValueError(f"need alpha >= 0 and beta > 0, got ({alpha}, {beta})")

    def get_params(self) -> np.ndarray:
        return np.array([self.alpha, self.beta])

    def with_params(self, theta) -> "ExpHawkesKernel":
        return ExpHawkesKernel(theta[0], theta[1])

    def sup_bound(self) -> float:
        return self.alpha * self.beta

    def pair_values(self, tp, mp, t, m) -> np.ndarray:
        return self.alpha * self.beta * np.exp(-self.beta * (np.asarray(t) - np.asarray(tp)))

    def pair_grad(self, tp, mp, t, m, upstream) -> np.ndarray:
        dt = np.asarray(t) - np.asarray(tp)
        e = np.exp(-self.beta * dt)
        u = np.asarray(upstream, dtype=float)
        return np.array([np.sum(u * self.beta * e),
                         np.sum(u * self.alpha * e * (1.0 - self.beta * dt))])

    def _running_sums(self, times):
        # R[k] = sum_{i<=k} exp(-beta (t_k - t_i)),  G[k] = sum_{i<=k} (t_k - t_i) exp(...)
        n = len(times)
        R = np.empty(n)
        G = np.empty(n)
        r = g = 0.0
        prev = None
        b = self.beta
        for k, t in enumerate(times.tolist()):
            if prev is not None:
                d = t - prev
                e = np.exp(-b * d)
                r, g = e * r, e * (g + d * r)
            r += 1.0
            R[k], G[k] = r, g
            prev = t
        return R, G

    def excitation_vjp(self, times, marks, qt, qm):
        times = np.asarray(times, dtype=float)
        qt = np.asarray(qt, dtype=float)
        counts = np.searchsorted(times, qt, side="left")
        E = np.zeros(len(qt))
        Gq = np.zeros(len(qt))
        if len(times):
            R, G = self._running_sums(times)
            has = counts > 0
            last = counts[has] - 1
            d = qt[has] - times[last]
            e = np.exp(-self.beta * d)
            E[has] = e * R[last]
            Gq[has] = e * (G[last] + d * R[last])
        a, b = self.alpha, self.beta

        def grad(w):
            w = np.asarray(w, dtype=float)
            return np.array([np.dot(w, b * E), np.dot(w, a * E - a * b * Gq)])

        return a * b * E, grad

    def sim_state(self):
        return _ExpState(self)


class _ExpState:
    def __init__(self, k: ExpHawkesKernel):
        self.k = k
        self.t_last = None
        self.r = 0.0

    def excitation(self, t, m) -> np.ndarray:
        t = np.atleast_1d(t)
        if self.t_last is None:
            return np.zeros(len(t))
        return self.k.alpha * self.k.beta * np.exp(-self.k.beta * (t - self.t_last)) * self.r

    def add(self, t, m):
        if self.t_last is not None:
            self.r *= math.exp(-self.k.beta * (t - self.t_last))
        self.r += 1.0
        self.t_last = t


# ------------------------------------------------------------------------ basis


class CosineBasis:
    """Tensor cosine basis ``prod_a cos(j_a * pi * u_a)`` on coordinates rescaled to ``[0, 1]``.

    Multi-indices are enumerated by total degree, time axis first, and the
    first ``size`` are kept. Index 0 is the constant function. Every member
    is bounded by 1 in absolute value.
    """

    def __init__(self, domain: Domain, size: int):
        if size < 1:
            raise ValueError("basis size must be >= 1")
        self.domain = domain
        self.size = int(size)
        dims = 1 + domain.mark_dim
        idx = []
        for deg in itertools.count():
            layer = [j for j in itertools.product(range(deg + 1), repeat=dims) if sum(j) == deg]
            layer.sort(key=lambda j: tuple(-v for v in j))
            idx.extend(layer)
            if len(idx) >= size:
                break
        self.indices = np.array(idx[:size], dtype=float).reshape(size, dims)
        self.lo = np.array((0.0,) + domain.mark_lo)
        self.span = np.array((domain.horizon_T,) + tuple(np.subtract(domain.mark_hi, domain.mark_lo)))

    def __call__(self, t, m) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        m = np.asarray(m if m is not None else (), dtype=float).reshape(t.size, self.domain.mark_dim)
        coords = np.column_stack([t, m])
        u = (coords - self.lo) / self.span
        return np.prod(np.cos(np.pi * u[:, None, :] * self.indices[None]), axis=2)

    sup = 1.0


class BasisKernel:
    family = "basis"

    def __init__(self, basis: CosineBasis, A, factors: Optional[tuple] = None):
        self.basis = basis
        S = basis.size
        self.A = np.array(A, dtype=np.float64).reshape(S, S)
        self.factors = factors

    @classmethod
    def from_factors(cls, basis: CosineBasis, Psi, nu, Phi) -> "BasisKernel":
        """``A = Psi^T diag(nu) Phi`` with ``Psi, Phi`` of shape ``(R, S)``."""
        Psi, Phi, nu = np.asarray(Psi, float), np.asarray(Phi, float), np.asarray(nu, float)
        A = np.einsum("r,rp,rq->pq", nu, Psi, Phi)
        return cls(basis, A, (Psi, nu, Phi))

    @property
    def n_params(self) -> int:
        return self.A.size

    def get_params(self) -> np.ndarray:
        return self.A.ravel().copy()

    def with_params(self, theta) -> "BasisKernel":
        return BasisKernel(self.basis, theta)

    def sup_bound(self) -> float:
        return float(np.abs(self.A).sum() * self.basis.sup ** 2)

    def pair_values(self, tp, mp, t, m) -> np.ndarray:
        bp, b = self.basis(tp, mp), self.basis(t, m)
        return np.einsum("np,pq,nq->n", bp, self.A, b)

    def pair_grad(self, tp, mp, t, m, upstream) -> np.ndarray:
        bp, b = self.basis(tp, mp), self.basis(t, m)
        u = np.asarray(upstream, dtype=float).reshape(-1, 1) * np.ones((len(bp), 1))
        return ((u * bp).T @ b).ravel()

    def history_features(self, times, marks, qt, qm):
        """``c(x) = sum_{x' < x} b(x')`` and ``b(x)`` for each query point."""
        counts = np.searchsorted(times, qt, side="left")
        c = _gather_prefix(self.basis(times, marks), counts) if len(times) \
            else np.zeros((len(qt), self.basis.size))
        return c, self.basis(qt, qm)

    def excitation_vjp(self, times, marks, qt, qm):
        c, b = self.history_features(times, marks, qt, qm)
        exc = np.einsum("np,pq,nq->n", c, self.A, b)

        def grad(w):
            return (c.T @ (np.asarray(w, dtype=float)[:, None] * b)).ravel()

        return exc, grad

    def sim_state(self):
        return _BasisState(self)


class _BasisState:
    def __init__(self, k: BasisKernel):
        self.k = k
        self.c = np.zeros(k.basis.size)

    def excitation(self, t, m) -> np.ndarray:
        return self.k.basis(t, m) @ (self.c @ self.k.A)

    def add(self, t, m):
        self.c = self.c + self.k.basis(t, np.asarray(m).reshape(1, -1))[0]


Kernel = Union[SpectralKernel, ExpHawkesKernel, BasisKernel]


# ------------------------------------------------------------------------ model


@dataclass(frozen=True)
class KernelModel:
    """A kernel plus background rate ``mu``.

    With ``train_mu`` the background rate becomes a trainable parameter
    (stored as ``softplus^-1(mu)`` at the end of the parameter vector).
    ``bounds = (c1, c2)`` turns on a warning whenever an evaluated
    intensity falls outside ``[c1, c2]``.
    """

    kernel: Optional[Kernel]
    mu: float = 1.0
    train_mu: bool = False
    bounds: Optional[tuple] = None

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError("background rate must be nonnegative")
        if self.bounds is not None and not 0 < self.bounds[0] <= self.bounds[1]:
            raise ValueError("intensity bounds need 0 < c1 <= c2")

    @property
    def family(self) -> str:
        return "none" if self.kernel is None else self.kernel.family

    @property
    def n_params(self) -> int:
        return (0 if self.kernel is None else self.kernel.n_params) + int(self.train_mu)

    def get_params(self) -> np.ndarray:
        kp = np.zeros(0) if self.kernel is None else self.kernel.get_params()
        return np.concatenate([kp, [float(softplus_inv(self.mu))]]) if self.train_mu else kp

    def with_params(self, theta) -> "KernelModel":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {theta.size}")
        k = None if self.kernel is None else self.kernel.with_params(theta[:self.kernel.n_params])
        mu = float(softplus(theta[-1])) if self.train_mu else self.mu
        return replace(self, kernel=k, mu=mu)

    def excitation_vjp(self, times, marks, qt, qm):
        """Intensity at the query points plus a closure for its parameter VJP."""
        if self.kernel is None:
            exc, kgrad = np.zeros(len(qt)), (lambda w: np.zeros(0))
        else:
            exc, kgrad = self.kernel.excitation_vjp(times, marks, qt, qm)
        lam = self.mu + exc
        mu_raw = float(softplus_inv(self.mu)) if self.train_mu else 0.0

        def grad(w):
            g = kgrad(w)
            if self.train_mu:
                g = np.concatenate([g, [np.sum(w) * float(sigmoid(mu_raw))]])
            return g

        return lam, grad

    def check_bounds(self, lam) -> None:
        if self.bounds is None:
            return
        lam = np.asarray(lam)
        c1, c2 = self.bounds
        bad = np.count_nonzero((lam < c1) | (lam > c2))
        if bad:
            warnings.warn(f"{bad} intensity values outside [{c1}, {c2}]", RuntimeWarning, stacklevel=3)


# ------------------------------------------------------------------- operations


def _check_causal(tp, t):
    if np.any(np.asarray(tp) >= np.asarray(t)):
        raise CausalityError("kernel needs t(x') < t(x)")


def _pt(x):
    return (x.t, np.asarray(x.m, dtype=float).reshape(1, -1)) if isinstance(x, EventPoint) else \
        (float(x[0]), np.asarray(x[1:], dtype=float).reshape(1, -1))


def kernel_eval(model: KernelModel, x_prev, x) -> float:
    tp, mp = _pt(x_prev)
    t, m = _pt(x)
    _check_causal(tp, t)
    if model.kernel is None:
        return 0.0
    return float(model.kernel.pair_values(np.array([tp]), mp, np.array([t]), m)[0])


def kernel_sup_bound(model: KernelModel) -> float:
    return 0.0 if model.kernel is None else model.kernel.sup_bound()


def kernel_grad(model: KernelModel, x_prev, x, upstream: float = 1.0) -> np.ndarray:
    """Gradient of ``upstream * k(x', x)`` over every trainable parameter of ``model``."""
    tp, mp = _pt(x_prev)
    t, m = _pt(x)
    _check_causal(tp, t)
    g = np.zeros(0) if model.kernel is None else \
        model.kernel.pair_grad(np.array([tp]), mp, np.array([t]), m, upstream)
    return np.concatenate([g, [0.0]]) if model.train_mu else g


def kernel_grid(model: KernelModel, prev_points, points, mark_dim: Optional[int] = None) -> np.ndarray:
    """Matrix ``K[i, j] = k(prev_points[i], points[j])``; NaN where ``t' >= t``."""
    if mark_dim is None:
        first = prev_points[0]
        mark_dim = len(first.m) if isinstance(first, EventPoint) else len(first) - 1
    tp, mp = as_points(prev_points, mark_dim)
    t, m = as_points(points, mark_dim)
    P, Q = len(tp), len(t)
    ii, jj = np.meshgrid(np.arange(P), np.arange(Q), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    causal = tp[ii] < t[jj]
    out = np.full(P * Q, np.nan)
    if model.kernel is None:
        out[causal] = 0.0
    elif causal.any():
        a, b = ii[causal], jj[causal]
        out[causal] = model.kernel.pair_values(tp[a], mp[a], t[b], m[b])
    return out.reshape(P, Q)


def write_kernel_grid_csv(path, prev_points, points, grid: np.ndarray, mark_dim: int) -> None:
    """CSV ``t_prev,m_prev...,t,m...,k``; non-causal cells have an empty ``k``."""
    tp, mp = as_points(prev_points, mark_dim)
    t, m = as_points(points, mark_dim)
    head = ["t_prev"] + [f"m_prev{i + 1}" for i in range(mark_dim)] + \
        ["t"] + [f"m{i + 1}" for i in range(mark_dim)] + ["k"]
    lines = [",".join(head)]
    for i in range(len(tp)):
        left = [repr(float(tp[i]))] + [repr(float(v)) for v in mp[i]]
        for j in range(len(t)):
            k = grid[i, j]
            right = [repr(float(t[j]))] + [repr(float(v)) for v in m[j]]
            lines.append(",".join(left + right + ["" if np.isnan(k) else repr(float(k))]))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
