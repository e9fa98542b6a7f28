"""Events, sequences, observation windows and datasets.

Sequences store their times as a 1-D float array and their marks as an
``(n, mark_dim)`` array; both are made read-only on construction so a
sequence can be shared freely between threads.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np


class DataError(ValueError):
    """Raised for malformed event data or inconsistent domains."""


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Domain:
    """Observation window ``[0, T) x M`` with a box mark space ``M``."""

    horizon_T: float
    mark_lo: tuple = ()
    mark_hi: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "horizon_T", float(self.horizon_T))
        object.__setattr__(self, "mark_lo", tuple(float(v) for v in self.mark_lo))
        object.__setattr__(self, "mark_hi", tuple(float(v) for v in self.mark_hi))
        if not self.horizon_T > 0:
            raise DataError(f"horizon_T must be positive, got {self.horizon_T}")
        if len(self.mark_lo) != len(self.mark_hi):
            raise DataError("mark_lo and mark_hi differ in length")
        for i, (lo, hi) in enumerate(zip(self.mark_lo, self.mark_hi)):
            if not lo < hi:
                raise DataError(f"mark axis {i}: lo={lo} is not below hi={hi}")

    @property
    def mark_dim(self) -> int:
        return len(self.mark_lo)

    @property
    def mark_volume(self) -> float:
        return float(np.prod(np.subtract(self.mark_hi, self.mark_lo))) if self.mark_dim else 1.0

    @property
    def volume(self) -> float:
        """``|X| = T * |M|``."""
        return self.horizon_T * self.mark_volume

    def contains(self, t: float, m=()) -> bool:
        if not 0.0 <= t < self.horizon_T:
            return False
        m = np.atleast_1d(np.asarray(m, dtype=float)) if self.mark_dim else ()
        return all(lo <= v <= hi for v, lo, hi in zip(m, self.mark_lo, self.mark_hi))

    def sample_uniform(self, rng: np.random.Generator, n: int):
        """Draw ``n`` points uniformly on ``[0, T) x M``; returns ``(t, m)`` arrays."""
        t = rng.uniform(0.0, self.horizon_T, size=n)
        m = rng.uniform(self.mark_lo, self.mark_hi, size=(n, self.mark_dim)) if self.mark_dim \
            else np.empty((n, 0))
        return t, m

    def to_dict(self) -> dict:
        return {"T": self.horizon_T, "mark_lo": list(self.mark_lo), "mark_hi": list(self.mark_hi)}

    @classmethod
    def from_dict(cls, d: dict) -> "Domain":
        return cls(d["T"], tuple(d.get("mark_lo", ())), tuple(d.get("mark_hi", ())))


@dataclass(frozen=True)
class EventPoint:
    t: float
    m: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "m", tuple(float(v) for v in np.atleast_1d(self.m)))

    @property
    def coords(self) -> np.ndarray:
        return np.array((self.t,) + self.m)


class EventSequence:
    """A time-ordered event trajectory on a :class:`Domain`.

    The constructor does not validate; call :func:`validate_sequence`
    or :meth:`checked` when the data comes from outside.
    ``exploded`` is set by the simulator when it hit its event cap.
    """

    __slots__ = ("times", "marks", "domain", "exploded")

    def __init__(self, times, marks=None, domain: Domain = None, exploded: bool = False):
        if domain is None:
            raise DataError("an EventSequence needs a domain")
        times = _frozen(times).reshape(-1)
        if marks is None:
            marks = np.empty((len(times), domain.mark_dim))
        marks = _frozen(marks).reshape(len(times), domain.mark_dim)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "domain", domain)
        object.__setattr__(self, "exploded", bool(exploded))

    def __setattr__(self, name, value):
        raise AttributeError("EventSequence is immutable")

    @classmethod
    def from_events(cls, events: Iterable[EventPoint], domain: Domain) -> "EventSequence":
        events = list(events)
        times = [e.t for e in events]
        marks = [e.m for e in events] if events else None
        return cls(times, marks, domain)

    @classmethod
    def checked(cls, times, marks=None, domain: Domain = None) -> "EventSequence":
        seq = cls(times, marks, domain)
        bad = validate_sequence(seq)
        if bad is not None:
            raise DataError(str(bad))
        return seq

    @property
    def events(self) -> list:
        return [EventPoint(t, m) for t, m in zip(self.times, self.marks)]

    def __len__(self) -> int:
        return len(self.times)

    def __iter__(self) -> Iterator[EventPoint]:
        return iter(self.events)

    def __getitem__(self, i) -> EventPoint:
        return EventPoint(self.times[i], self.marks[i])

    def __eq__(self, other) -> bool:
        return (isinstance(other, EventSequence) and self.domain == other.domain
                and np.array_equal(self.times, other.times)
                and np.array_equal(self.marks, other.marks))

    def __repr__(self) -> str:
        return f"EventSequence(n={len(self)}, T={self.domain.horizon_T}, d={self.domain.mark_dim})"

    def history_count(self, t) -> np.ndarray:
        """Number of events strictly before each query time."""
        return np.searchsorted(self.times, t, side="left")

    def integrate_counting(self, f, select=None) -> float:
        """Integral of ``f(t, m)`` against the counting measure: a sum over events.

        ``select`` is an optional boolean predicate on ``(t, m)`` restricting
        the region of integration.
        """
        total = 0.0
        for t, m in zip(self.times, self.marks):
            if select is None or select(t, m):
                total += f(t, m)
        return total


@dataclass(frozen=True)
class Violation:
    index: int
    reason: str

    def __str__(self) -> str:
        return f"{self.reason} at index {self.index}"


def validate_sequence(seq: EventSequence) -> Optional[Violation]:
    """Return ``None`` if ``seq`` satisfies its invariants, else the first violation."""
    dom = seq.domain
    lo = np.asarray(dom.mark_lo)
    hi = np.asarray(dom.mark_hi)
    prev = None
    for i, (t, m) in enumerate(zip(seq.times, seq.marks)):
        if not np.isfinite(t) or not 0.0 <= t < dom.horizon_T:
            return Violation(i, "time outside [0, T)")
        if prev is not None and not t > prev:
            return Violation(i, "non-increasing time")
        if dom.mark_dim and not (np.all(np.isfinite(m)) and np.all(m >= lo) and np.all(m <= hi)):
            return Violation(i, "mark out of box")
        prev = t
    return None


@dataclass(frozen=True)
class Affine:
    """Per-axis map ``normalized = raw * scale + offset``; axis 0 is time."""

    scale: tuple
    offset: tuple

    def __post_init__(self):
        if any(s == 0 or not np.isfinite(s) for s in self.scale):
            raise DataError("affine record has a zero or non-finite scale")

    def forward(self, coords: np.ndarray) -> np.ndarray:
        return coords * np.asarray(self.scale) + np.asarray(self.offset)

    def inverse(self, coords: np.ndarray) -> np.ndarray:
        return (coords - np.asarray(self.offset)) / np.asarray(self.scale)

    def to_dict(self) -> dict:
        return {"scale": list(self.scale), "offset": list(self.offset)}


@dataclass
class Dataset:
    sequences: list
    domain: Domain
    normalization: Optional[Affine] = None

    def __post_init__(self):
        for j, s in enumerate(self.sequences):
            if s.domain != self.domain:
                raise DataError(f"sequence {j} has a different domain")

    def __len__(self) -> int:
        return len(self.sequences)

    def __getitem__(self, j):
        return self.sequences[j]

    def __iter__(self):
        return iter(self.sequences)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.sequences[i] for i in indices], self.domain, self.normalization)

    @property
    def n_events(self) -> int:
        return sum(len(s) for s in self.sequences)


def normalize_dataset(ds: Dataset, target_hi: float = 100.0) -> Dataset:
    """Rescale time and every mark axis of ``ds`` onto ``[0, target_hi]``.

    Raw ranges are taken from the dataset's domain: ``[0, T]`` for time and
    ``[mark_lo, mark_hi]`` per mark axis. The resulting affine record is
    composed with any record already present, so ``inverse`` always maps
    back to the original raw coordinates.
    """
    if not target_hi > 0:
        raise DataError("target_hi must be positive")
    if len(ds) == 0:
        raise DataError("cannot normalize an empty dataset")
    dom = ds.domain
    lo = np.array((0.0,) + dom.mark_lo)
    hi = np.array((dom.horizon_T,) + dom.mark_hi)
    names = ["time"] + [f"mark {i}" for i in range(dom.mark_dim)]
    for name, a, b in zip(names, lo, hi):
        if not b - a > 0:
            raise DataError(f"degenerate {name} axis: zero raw range")
    scale = target_hi / (hi - lo)
    offset = -lo * scale
    new_dom = Domain(target_hi, (0.0,) * dom.mark_dim, (target_hi,) * dom.mark_dim)
    seqs = []
    for s in ds.sequences:
        t = s.times * scale[0] + offset[0]
        t = np.minimum(t, np.nextafter(target_hi, 0.0))
        m = np.clip(s.marks * scale[1:] + offset[1:], 0.0, target_hi)
        seqs.append(EventSequence(t, m, new_dom))
    if ds.normalization is not None:
        prev_s = np.asarray(ds.normalization.scale)
        prev_o = np.asarray(ds.normalization.offset)
        scale, offset = prev_s * scale, prev_o * scale + offset
    return Dataset(seqs, new_dom, Affine(tuple(scale), tuple(offset)))


def denormalize_sequence(seq: EventSequence, affine: Affine, raw_domain: Domain) -> EventSequence:
    coords = np.column_stack([seq.times, seq.marks])
    raw = affine.inverse(coords)
    return EventSequence(raw[:, 0], raw[:, 1:], raw_domain)


def rng_for(master_seed: int, component: str, *index: int) -> np.random.Generator:
    """Independent generator derived from ``(master_seed, component, index...)``."""
    tag = int.from_bytes(hashlib.sha256(component.encode()).digest()[:4], "little")
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), tag, *map(int, index)]))


# --------------------------------------------------------------------------- I/O


def write_csv(ds: Dataset, path, meta: Optional[dict] = None) -> Path:
    """Write ``seq_id,t,m1..md`` rows plus a ``<stem>.meta.json`` sidecar.

    The sidecar carries the domain (the CSV itself cannot) and any extra
    provenance in ``meta``.
    """
    path = Path(path)
    d = ds.domain.mark_dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seq_id", "t"] + [f"m{i + 1}" for i in range(d)])
        for j, s in enumerate(ds.sequences):
            for t, m in zip(s.times, s.marks):
                w.writerow([j, repr(float(t))] + [repr(float(v)) for v in m])
    side = {"domain": ds.domain.to_dict(), "n_sequences": len(ds)}
    if ds.normalization is not None:
        side["normalization"] = ds.normalization.to_dict()
    if meta:
        side.update(meta)
    sidecar_path(path).write_text(json.dumps(side, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def _infer_domain(times: np.ndarray, marks: np.ndarray) -> Domain:
    if len(times) == 0:
        raise DataError("cannot infer a domain from an empty file")
    t_max = float(times.max())
    if not t_max > 0:
        raise DataError("degenerate time axis: zero raw range")
    lo, hi = [], []
    for i in range(marks.shape[1]):
        a, b = float(marks[:, i].min()), float(marks[:, i].max())
        if not b > a:
            raise DataError(f"degenerate mark axis {i}: zero raw range")
        lo.append(a)
        hi.append(b)
    # half-open window: the last event must lie strictly inside
    return Domain(t_max * (1 + 1e-9), tuple(lo), tuple(hi))


def read_csv(path, domain: Optional[Domain] = None) -> Dataset:
    """Read the CSV event format.

    The domain comes from ``domain``, else from the ``.meta.json`` sidecar,
    else it is inferred as the bounding box of the data.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such data file: {path}")
    side = {}
    if sidecar_path(path).exists():
        side = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["seq_id", "t"]:
        raise DataError(f"{path}: header must start with seq_id,t")
    d = len(rows[0]) - 2
    body = [r for r in rows[1:] if r]
    ids = np.array([int(r[0]) for r in body], dtype=int)
    vals = np.array([[float(v) for v in r[1:]] for r in body], dtype=float).reshape(len(body), d + 1)
    if domain is None and "domain" in side:
        domain = Domain.from_dict(side["domain"])
    if domain is None:
        domain = _infer_domain(vals[:, 0], vals[:, 1:])
    if domain.mark_dim != d:
        raise DataError(f"{path}: file has {d} mark columns, domain expects {domain.mark_dim}")
    n_seq = int(side.get("n_sequences", ids.max() + 1 if len(ids) else 0))
    if len(ids) and (ids.min() < 0 or np.any(np.diff(ids) < 0)):
        raise DataError(f"{path}: rows must be sorted by seq_id")
    seqs = []
    for j in range(max(n_seq, ids.max() + 1 if len(ids) else 0)):
        rows_j = vals[ids == j]
        seqs.append(_checked(rows_j[:, 0], rows_j[:, 1:], domain, f"{path}: sequence {j}"))
    norm = side.get("normalization")
    return Dataset(seqs, domain, Affine(tuple(norm["scale"]), tuple(norm["offset"])) if norm else None)


def _checked(times, marks, domain, where) -> EventSequence:
    seq = EventSequence(times, marks, domain)
    bad = validate_sequence(seq)
    if bad is not None:
        raise DataError(f"{where}: {bad}")
    return seq


def write_json(ds: Dataset, path) -> Path:
    path = Path(path)
    doc = {
        "domain": ds.domain.to_dict(),
        "sequences": [[[float(t), *map(float, m)] for t, m in zip(s.times, s.marks)]
                      for s in ds.sequences],
    }
    if ds.normalization is not None:
        doc["normalization"] = ds.normalization.to_dict()
    path.write_text(json.dumps(doc) + "\n", encoding="utf-8")
    return path


def read_json(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such data file: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    domain = Domain.from_dict(doc["domain"])
    d = domain.mark_dim
    seqs = []
    for j, rows in enumerate(doc["sequences"]):
        a = np.array(rows, dtype=float).reshape(len(rows), d + 1)
        seqs.append(_checked(a[:, 0], a[:, 1:], domain, f"{path}: sequence {j}"))
    norm = doc.get("normalization")
    return Dataset(seqs, domain, Affine(tuple(norm["scale"]), tuple(norm["offset"])) if norm else None)


def read_dataset(path, domain: Optional[Domain] = None) -> Dataset:
    path = Path(path)
    if path.suffix.lower() == ".json":
        return read_json(path)
    return read_csv(path, domain)


def as_points(points: Sequence, mark_dim: int):
    """Split a list of :class:`EventPoint` (or coordinate rows) into ``(t, m)`` arrays."""
    if isinstance(points, np.ndarray):
        arr = np.asarray(points, dtype=float).reshape(-1, 1 + mark_dim)
    else:
        arr = np.array([p.coords if isinstance(p, EventPoint) else p for p in points],
                       dtype=float).reshape(-1, 1 + mark_dim)
    return arr[:, 0], arr[:, 1:]
