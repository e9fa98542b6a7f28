"""Shared-trunk, multi-branch feedforward network with a hand-written backward pass.

The trunk maps an event ``x = (t, m)`` to a hidden embedding; ``2R``
branch heads map the embedding to the feature values ``psi_1..psi_R`` and
``phi_1..phi_R``. Hidden layers use softplus, branch outputs use a scaled
sigmoid ``s / (1 + exp(-z))`` so every feature lies in ``(0, s)``.

All parameters live in one flat float64 vector; :func:`param_layout` gives
the offsets. Branch parameters are stored layer-major (all branches of one
layer are contiguous) so a layer can be applied to every branch with one
batched matmul.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import NamedTuple

import numpy as np
from scipy.special import expit

_SP_CUT = 30.0


def softplus(z):
    z = np.asarray(z, dtype=float)
    out = np.log1p(np.exp(np.minimum(z, _SP_CUT)))
    out = np.where(z > _SP_CUT, z, out)
    return np.where(z < -_SP_CUT, np.exp(np.clip(z, -745.0, -_SP_CUT)), out)


def softplus_inv(y):
    """Inverse of softplus for ``y > 0``."""
    y = np.asarray(y, dtype=float)
    return np.where(y > _SP_CUT, y, np.log(np.expm1(np.minimum(y, _SP_CUT))))


sigmoid = expit


@dataclass(frozen=True)
class NetSpec:
    input_dim: int
    trunk_layers: tuple = (128, 128, 10)
    branch_count: int = 10
    branch_hidden: tuple = (32, 32)
    output_scale: float = 100.0
    # multiplies raw coordinates before the first layer
    input_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "trunk_layers", tuple(int(w) for w in self.trunk_layers))
        object.__setattr__(self, "branch_hidden", tuple(int(w) for w in self.branch_hidden))
        if self.input_dim < 1 or not self.trunk_layers:
            raise ValueError("input_dim >= 1 and at least one trunk layer required")
        if any(w < 1 for w in self.trunk_layers + self.branch_hidden):
            raise ValueError("all layer widths must be >= 1")
        if self.branch_count < 2 or self.branch_count % 2:
            raise ValueError("branch_count must be even and >= 2")
        if not self.output_scale > 0 or not self.input_scale > 0:
            raise ValueError("output_scale and input_scale must be positive")

    @property
    def rank(self) -> int:
        return self.branch_count // 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trunk_layers"] = list(self.trunk_layers)
        d["branch_hidden"] = list(self.branch_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        return cls(**d)


class Slot(NamedTuple):
    name: str
    offset: int
    shape: tuple

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def param_layout(spec: NetSpec) -> list:
    slots = []
    off = 0

    def add(name, shape):
        nonlocal off
        s = Slot(name, off, tuple(shape))
        slots.append(s)
        off += s.size

    widths = [spec.input_dim, *spec.trunk_layers]
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        add(f"trunk{i}.W", (a, b))
        add(f"trunk{i}.b", (b,))
    B = spec.branch_count
    bw = [spec.trunk_layers[-1], *spec.branch_hidden, 1]
    for i, (a, b) in enumerate(zip(bw[:-1], bw[1:])):
        add(f"branch{i}.W", (B, a, b))
        add(f"branch{i}.b", (B, b))
    return slots


def n_params(spec: NetSpec) -> int:
    last = param_layout(spec)[-1]
    return last.offset + last.size


def _unpack(spec: NetSpec, params: np.ndarray):
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.size != n_params(spec):
        raise ValueError(f"parameter vector has {params.size} entries, spec needs {n_params(spec)}")
    return [params[s.offset:s.offset + s.size].reshape(s.shape) for s in param_layout(spec)]


def init_params(spec: NetSpec, seed) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    theta = np.zeros(n_params(spec))
    for s in param_layout(spec):
        if s.name.endswith(".W"):
            fan_in, fan_out = s.shape[-2], s.shape[-1]
            a = np.sqrt(6.0 / (fan_in + fan_out))
            theta[s.offset:s.offset + s.size] = rng.uniform(-a, a, size=s.size)
    return theta


class FeatureOutput(NamedTuple):
    psi: np.ndarray
    phi: np.ndarray


def _as_inputs(spec: NetSpec, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[1] != spec.input_dim:
        raise ValueError(f"input has {X.shape[1]} coordinates, spec expects {spec.input_dim}")
    return X


def _forward(spec: NetSpec, params, X):
    parts = _unpack(spec, params)
    nt = len(spec.trunk_layers)
    cache = []
    a = X * spec.input_scale
    for i in range(nt):
        W, b = parts[2 * i], parts[2 * i + 1]
        z = a @ W + b
        cache.append((a, z))
        a = softplus(z)
    emb = a
    h = emb[None]
    branch = parts[2 * nt:]
    nb = len(branch) // 2
    for i in range(nb):
        W, b = branch[2 * i], branch[2 * i + 1]
        z = np.matmul(h, W) + b[:, None, :]
        cache.append((h, z))
        h = softplus(z) if i < nb - 1 else spec.output_scale * sigmoid(z)
    out = h[:, :, 0]                       # (2R, n)
    return out, parts, cache, emb


def features(spec: NetSpec, params, X) -> FeatureOutput:
    """Batched forward pass; ``X`` is ``(n, input_dim)``, outputs are ``(n, R)``."""
    X = _as_inputs(spec, X)
    out, *_ = _forward(spec, params, X)
    R = spec.rank
    return FeatureOutput(out[:R].T, out[R:].T)


def features_vjp(spec: NetSpec, params, X):
    """Forward pass plus a closure mapping upstream ``(dpsi, dphi)`` to a parameter gradient.

    The closure returns ``d/dparams of sum_n sum_r dpsi[n,r]*psi[n,r] + dphi[n,r]*phi[n,r]``.
    """
    X = _as_inputs(spec, X)
    out, parts, cache, emb = _forward(spec, params, X)
    R = spec.rank
    nt = len(spec.trunk_layers)
    s = spec.output_scale

    def vjp(dpsi, dphi) -> np.ndarray:
        grads = [None] * len(parts)
        dout = np.concatenate([np.asarray(dpsi, float).T, np.asarray(dphi, float).T])  # (2R, n)
        nb = (len(parts) - 2 * nt) // 2
        g = None
        for i in reversed(range(nb)):
            h, z = cache[nt + i]
            if i == nb - 1:
                sg = out / s
                dz = (dout * s * sg * (1.0 - sg))[:, :, None]
            else:
                dz = g * sigmoid(z)
            W = parts[2 * nt + 2 * i]
            k = 2 * nt + 2 * i
            if i == 0:
                grads[k] = np.einsum("np,bnh->bph", emb, dz)
                g = np.einsum("bnh,bph->np", dz, W)
            else:
                grads[k] = np.matmul(h.transpose(0, 2, 1), dz)
                g = np.matmul(dz, W.transpose(0, 2, 1))
            grads[k + 1] = dz.sum(axis=1)
        for i in reversed(range(nt)):
            a, z = cache[i]
            dz = g * sigmoid(z)
            grads[2 * i] = a.T @ dz
            grads[2 * i + 1] = dz.sum(axis=0)
            if i:
                g = dz @ parts[2 * i].T
        return np.concatenate([gr.ravel() for gr in grads])

    return FeatureOutput(out[:R].T, out[R:].T), vjp


def forward(spec: NetSpec, params, x) -> FeatureOutput:
    """Features of one event; ``x`` is an :class:`EventPoint` or a coordinate vector."""
    coords = x.coords if hasattr(x, "coords") else np.asarray(x, dtype=float)
    f = features(spec, params, coords.reshape(1, -1))
    return FeatureOutput(f.psi[0], f.phi[0])


def backward(spec: NetSpec, params, x, upstream) -> np.ndarray:
    """Gradient of ``sum_r u_psi[r] psi_r(x) + u_phi[r] phi_r(x)``; ``upstream`` is ``(u_psi, u_phi)``
    or one length-2R vector."""
    coords = x.coords if hasattr(x, "coords") else np.asarray(x, dtype=float)
    u = np.asarray(upstream, dtype=float).reshape(-1)
    R = spec.rank
    if u.size != 2 * R:
        raise ValueError(f"upstream needs {2 * R} entries, got {u.size}")
    _, vjp = features_vjp(spec, params, coords.reshape(1, -1))
    return vjp(u[:R].reshape(1, R), u[R:].reshape(1, R))
