"""Minibatch stochastic-gradient ascent on the log-likelihood, with Adam steps.

Also holds the binary checkpoint format::

    b"NSMP" | u32 version | u32 family | model fields ... | optimizer block

all little-endian, followed on disk by a ``.json`` sidecar describing the
same model for humans.
"""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .core import Dataset, Domain, rng_for
from .kernel import BasisKernel, CosineBasis, ExpHawkesKernel, KernelModel, SpectralKernel
from .likelihood import MCIntegralConfig, log_likelihood, log_likelihood_and_grad
from .net import NetSpec

log = logging.getLogger(__name__)

MAGIC = b"NSMP"
VERSION = 1
_FAMILIES = {"none": 0, "spectral": 1, "exp": 2, "basis": 3}


class TrainingError(RuntimeError):
    def __init__(self, msg, iteration, last_model, checkpoint=None):
        super().__init__(msg)
        self.iteration = iteration
        self.last_model = last_model
        self.checkpoint = checkpoint


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    batch_size: int = 32
    iterations: int = 1000
    mc: MCIntegralConfig = MCIntegralConfig()
    seed: int = 0
    eval_every: int = 50
    checkpoint_every: int = 0
    checkpoint_dir: Optional[str] = None
    eval_holdout_fraction: float = 0.2
    clip_norm: float = 100.0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    threads: int = 1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.iterations < 1:
            raise ValueError("batch_size and iterations must be >= 1")
        if not 0 <= self.eval_holdout_fraction < 1:
            raise ValueError("eval_holdout_fraction must lie in [0, 1)")


class Adam:
    """Adam for maximization: ``theta += lr * m_hat / (sqrt(v_hat) + eps)``."""

    def __init__(self, n, lr=1e-2, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad ** 2
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        return theta + self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainTrace:
    iteration: list = field(default_factory=list)
    batch_ll: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    nu: list = field(default_factory=list)
    holdout_ll: list = field(default_factory=list)
    secs: list = field(default_factory=list)
    train_indices: list = field(default_factory=list)
    holdout_indices: list = field(default_factory=list)
    best_iteration: Optional[int] = None
    best_holdout_ll: Optional[float] = None

    def __len__(self):
        return len(self.iteration)

    def to_csv(self, path, include_secs: bool = True) -> None:
        cols = ["iter", "batch_ll", "grad_norm", "holdout_ll"] + (["secs"] if include_secs else [])
        lines = [",".join(cols)]
        for i in range(len(self)):
            row = [str(self.iteration[i]), repr(self.batch_ll[i]), repr(self.grad_norm[i]),
                   "" if np.isnan(self.holdout_ll[i]) else repr(self.holdout_ll[i])]
            if include_secs:
                row.append(f"{self.secs[i]:.6f}")
            lines.append(",".join(row))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def split_indices(n: int, holdout_fraction: float, seed: int):
    """Seeded random split into ``(train, holdout)`` index arrays, each sorted."""
    perm = rng_for(seed, "split").permutation(n)
    n_hold = int(round(n * holdout_fraction))
    if holdout_fraction > 0 and n > 1:
        n_hold = min(max(n_hold, 1), n - 1)
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def _project(model: KernelModel, theta: np.ndarray) -> np.ndarray:
    if isinstance(model.kernel, ExpHawkesKernel):
        theta = theta.copy()
        theta[0] = max(theta[0], 0.0)
        theta[1] = max(theta[1], 1e-6)
    return theta


def _batches(train_idx, batch_size, seed):
    n = len(train_idx)
    epoch = 0
    while True:
        perm = train_idx[rng_for(seed, "batch", epoch).permutation(n)]
        if batch_size >= n:
            yield perm
        else:
            for s in range(0, n - batch_size + 1, batch_size):
                yield perm[s:s + batch_size]
        epoch += 1


def train(model: KernelModel, dataset: Dataset, cfg: TrainConfig,
          holdout: Optional[Dataset] = None):
    """Fit ``model`` to ``dataset``; returns ``(fitted_model, TrainTrace)``.

    Without an explicit ``holdout``, ``eval_holdout_fraction`` of the
    sequences are held out. Holdout log-likelihood is evaluated every
    ``eval_every`` iterations (and at the last one) with frozen MC draws, and
    the model with the best holdout value is returned. With no holdout at
    all the last iterate is returned.
    """
    trace = TrainTrace()
    if holdout is None:
        train_idx, hold_idx = split_indices(len(dataset), cfg.eval_holdout_fraction, cfg.seed)
        hold_seqs = [dataset[i] for i in hold_idx]
    else:
        train_idx, hold_idx = np.arange(len(dataset)), np.arange(len(holdout)) + len(dataset)
        hold_seqs = list(holdout.sequences)
    if len(train_idx) == 0:
        raise ValueError("training split is empty")
    assert not set(train_idx.tolist()) & set(hold_idx.tolist())
    trace.train_indices = train_idx.tolist()
    trace.holdout_indices = hold_idx.tolist()
    hold_mc = replace(cfg.mc, resample_each_step=False)

    theta = model.get_params()
    opt = Adam(theta.size, cfg.learning_rate, cfg.adam_betas, cfg.adam_eps)
    best = (model, -np.inf)
    batches = _batches(train_idx, cfg.batch_size, cfg.seed)
    t0 = time.perf_counter()
    current = model
    for it in range(1, cfg.iterations + 1):
        idx = next(batches)
        res, grad = log_likelihood_and_grad(current, [dataset[i] for i in idx], cfg.mc, step=it,
                                            indices=idx, threads=cfg.threads)
        gnorm = float(np.linalg.norm(grad))
        if not (np.isfinite(res.mean) and np.all(np.isfinite(grad))):
            ck = _emergency_checkpoint(current, cfg, it)
            raise TrainingError(f"non-finite log-likelihood or gradient at iteration {it}",
                                it, current, ck)
        if gnorm > cfg.clip_norm:
            grad = grad * (cfg.clip_norm / gnorm)
        new_theta = _project(current, opt.step(theta, grad))
        if not np.all(np.isfinite(new_theta)):
            ck = _emergency_checkpoint(current, cfg, it)
            raise TrainingError(f"non-finite parameters at iteration {it}", it, current, ck)
        theta = new_theta
        current = current.with_params(theta)

        hll = np.nan
        if hold_seqs and (it % cfg.eval_every == 0 or it == cfg.iterations):
            hll = log_likelihood(current, hold_seqs, hold_mc, indices=hold_idx,
                                 threads=cfg.threads).mean
            if hll > best[1]:
                best = (current, hll)
                trace.best_iteration, trace.best_holdout_ll = it, hll
        trace.iteration.append(it)
        trace.batch_ll.append(res.mean)
        trace.grad_norm.append(gnorm)
        trace.nu.append(current.kernel.nu.tolist() if isinstance(current.kernel, SpectralKernel) else None)
        trace.holdout_ll.append(hll)
        trace.secs.append(time.perf_counter() - t0)
        if cfg.checkpoint_every and cfg.checkpoint_dir and it % cfg.checkpoint_every == 0:
            save_checkpoint(current, Path(cfg.checkpoint_dir) / f"iter{it:06d}.nsmp", opt)
        if it % max(1, cfg.iterations // 10) == 0:
            log.info("iter %d  batch ll %.4f  |g| %.3g  holdout %s", it, res.mean, gnorm, hll)
    fitted = best[0] if hold_seqs else current
    return fitted, trace


def _emergency_checkpoint(model, cfg, it):
    if not cfg.checkpoint_dir:
        return None
    path = Path(cfg.checkpoint_dir) / f"last_finite_iter{it:06d}.nsmp"
    save_checkpoint(model, path)
    return path


# ------------------------------------------------------------------ checkpoints


def _u32(*v):
    return struct.pack(f"<{len(v)}I", *v)


def _f64(*v):
    return struct.pack(f"<{len(v)}d", *v)


def _arr(a):
    a = np.ascontiguousarray(a, dtype="<f8").ravel()
    return struct.pack("<Q", a.size) + a.tobytes()


def _encode(model: KernelModel) -> bytes:
    out = [MAGIC, _u32(VERSION, _FAMILIES[model.family])]
    b = model.bounds or (0.0, 0.0)
    out += [_f64(model.mu), struct.pack("<BB", int(model.train_mu), int(model.bounds is not None)),
            _f64(*b)]
    k = model.kernel
    if isinstance(k, SpectralKernel):
        s = k.net
        out += [_u32(s.input_dim, len(s.trunk_layers), *s.trunk_layers, s.branch_count,
                     len(s.branch_hidden), *s.branch_hidden), _f64(s.output_scale, s.input_scale),
                _arr(k.params), _arr(k.spectrum_raw)]
    elif isinstance(k, ExpHawkesKernel):
        out.append(_f64(k.alpha, k.beta))
    elif isinstance(k, BasisKernel):
        d = k.basis.domain
        out += [_f64(d.horizon_T), _u32(d.mark_dim), _f64(*d.mark_lo), _f64(*d.mark_hi),
                _u32(k.basis.size), _arr(k.A)]
    return b"".join(out)


def model_to_dict(model: KernelModel) -> dict:
    d = {"format_version": VERSION, "family": model.family, "mu": model.mu,
         "train_mu": model.train_mu, "bounds": list(model.bounds) if model.bounds else None}
    k = model.kernel
    if isinstance(k, SpectralKernel):
        d.update(net=k.net.to_dict(), rank=k.rank, nu=k.nu.tolist(), n_params=k.n_params)
    elif isinstance(k, ExpHawkesKernel):
        d.update(alpha=k.alpha, beta=k.beta)
    elif isinstance(k, BasisKernel):
        d.update(basis_size=k.basis.size, domain=k.basis.domain.to_dict(), A=k.A.tolist())
    return d


def save_checkpoint(model: KernelModel, path, optimizer: Optional[Adam] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = _encode(model)
    if optimizer is None:
        blob += struct.pack("<B", 0)
    else:
        blob += struct.pack("<BQ", 1, optimizer.t) + _arr(optimizer.m) + _arr(optimizer.v)
    path.write_bytes(blob)
    path.with_suffix(".json").write_text(json.dumps(model_to_dict(model), indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    return path


class _Reader:
    def __init__(self, blob):
        self.blob, self.pos = blob, 0

    def take(self, fmt):
        vals = struct.unpack_from("<" + fmt, self.blob, self.pos)
        self.pos += struct.calcsize("<" + fmt)
        return vals

    def arr(self):
        (n,) = self.take("Q")
        a = np.frombuffer(self.blob, dtype="<f8", count=n, offset=self.pos).astype(np.float64)
        self.pos += 8 * n
        return a


def read_checkpoint(path, template: Optional[KernelModel] = None):
    """Returns ``(model, optimizer_state)``; the latter is ``None`` or ``(step, m, v)``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    r = _Reader(path.read_bytes())
    if r.blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an NSMP checkpoint")
    r.pos = 4
    version, fam = r.take("2I")
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads version {VERSION}")
    (mu,) = r.take("d")
    train_mu, has_bounds = r.take("BB")
    c1, c2 = r.take("2d")
    family = {v: k for k, v in _FAMILIES.items()}[fam]
    if family == "spectral":
        input_dim, nt = r.take("2I")
        trunk = r.take(f"{nt}I")
        bc, nb = r.take("2I")
        bh = r.take(f"{nb}I")
        os_, is_ = r.take("2d")
        spec = NetSpec(input_dim, trunk, bc, bh, os_, is_)
        kernel = SpectralKernel(spec, r.arr(), r.arr())
    elif family == "exp":
        kernel = ExpHawkesKernel(*r.take("2d"))
    elif family == "basis":
        (T,) = r.take("d")
        (d,) = r.take("I")
        lo, hi = r.take(f"{d}d"), r.take(f"{d}d")
        (S,) = r.take("I")
        kernel = BasisKernel(CosineBasis(Domain(T, lo, hi), S), r.arr())
    else:
        kernel = None
    model = KernelModel(kernel, mu, bool(train_mu), (c1, c2) if has_bounds else None)
    opt = None
    (has_opt,) = r.take("B")
    if has_opt:
        (step,) = r.take("Q")
        opt = (step, r.arr(), r.arr())
    if template is not None:
        _check_compatible(template, model, path)
    return model, opt


def load_checkpoint(path, template: Optional[KernelModel] = None) -> KernelModel:
    return read_checkpoint(path, template)[0]


def _describe(model: KernelModel) -> str:
    k = model.kernel
    if isinstance(k, SpectralKernel):
        s = k.net
        return (f"spectral(R={k.rank}, input_dim={s.input_dim}, trunk={list(s.trunk_layers)}, "
                f"branch_hidden={list(s.branch_hidden)})")
    if isinstance(k, BasisKernel):
        return f"basis(S={k.basis.size}, mark_dim={k.basis.domain.mark_dim})"
    return model.family


def _check_compatible(expected: KernelModel, got: KernelModel, path) -> None:
    a, b = _describe(expected), _describe(got)
    if a != b or expected.train_mu != got.train_mu:
        raise CheckpointError(f"{path}: checkpoint holds {b}, expected {a}")
