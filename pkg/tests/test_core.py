import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nsmpp.core import (Affine, DataError, Dataset, Domain, EventPoint, EventSequence,
                        normalize_dataset, read_csv, read_dataset, read_json, rng_for,
                        validate_sequence, write_csv, write_json)

from conftest import random_sequence


def test_domain_volume_and_invariants():
    assert Domain(5.0).mark_volume == 1.0
    assert Domain(5.0).volume == 5.0
    assert Domain(10, (0, 1), (2, 4)).mark_volume == 6.0
    with pytest.raises(DataError):
        Domain(0.0)
    with pytest.raises(DataError):
        Domain(1.0, (1.0,), (1.0,))


def test_validate_empty_is_ok(dom1):
    assert validate_sequence(EventSequence([], None, dom1)) is None


def test_validate_non_increasing(dom1):
    v = validate_sequence(EventSequence([1.0, 0.5], None, dom1))
    assert v.index == 1 and "non-increasing time" in v.reason
    assert str(v) == "non-increasing time at index 1"


def test_validate_mark_box(dom2):
    v = validate_sequence(EventSequence([1.0], [[101.0]], dom2))
    assert str(v) == "mark out of box at index 0"


def test_validate_rejects_event_at_horizon_and_ties(dom1):
    assert validate_sequence(EventSequence([100.0], None, dom1)).reason == "time outside [0, T)"
    assert validate_sequence(EventSequence([1.0, 1.0], None, dom1)).index == 1
    with pytest.raises(DataError):
        EventSequence.checked([2.0, 1.0], None, dom1)


def test_sequence_is_immutable(dom1):
    s = EventSequence([1.0, 2.0], None, dom1)
    with pytest.raises(AttributeError):
        s.times = np.zeros(2)
    with pytest.raises(ValueError):
        s.times[0] = 5.0


def test_normalize_time_axis():
    dom = Domain(50.0)
    ds = Dataset([EventSequence([25.0, 49.0], None, dom)], dom)
    out = normalize_dataset(ds)
    assert out.normalization.scale[0] == 2.0 and out.normalization.offset[0] == 0.0
    assert out[0].times[0] == 50.0
    assert out.domain == Domain(100.0)


def test_normalize_mark_axis():
    dom = Domain(10.0, (10.0,), (20.0,))
    ds = Dataset([EventSequence([1.0], [[15.0]], dom)], dom)
    out = normalize_dataset(ds)
    assert out[0].marks[0, 0] == pytest.approx(50.0, abs=1e-12)
    assert out.domain.mark_lo == (0.0,) and out.domain.mark_hi == (100.0,)


def test_normalize_round_trip(rng):
    dom = Domain(37.0, (-3.0, 10.0), (5.0, 12.5))
    seqs = [random_sequence(rng, dom, 100) for _ in range(10)]
    ds = Dataset(seqs, dom)
    out = normalize_dataset(ds)
    raw = np.vstack([np.column_stack([s.times, s.marks]) for s in seqs])
    back = np.vstack([out.normalization.inverse(np.column_stack([s.times, s.marks])) for s in out])
    assert raw.shape == (1000, 3)
    assert np.max(np.abs(back - raw)) < 1e-9


def test_normalize_idempotent(rng, dom2):
    ds = Dataset([random_sequence(rng, dom2, 20)], dom2)
    out = normalize_dataset(ds)
    assert out.normalization.scale == (1.0, 1.0)
    assert out.normalization.offset == (0.0, 0.0)
    assert np.array_equal(out[0].times, ds[0].times)


def test_normalize_errors():
    with pytest.raises(DataError):
        normalize_dataset(Dataset([], Domain(1.0)))
    with pytest.raises(DataError):
        Affine((1.0, 0.0), (0.0, 0.0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 40), st.integers(0, 2**31 - 1))
def test_counting_integral_is_event_sum(n, seed):
    rng = np.random.default_rng(seed)
    dom = Domain(10.0, (0.0,), (1.0,))
    s = random_sequence(rng, dom, n)
    f = lambda t, m: np.sin(t) + m[0] ** 2
    sel = lambda t, m: t < 5.0 and m[0] > 0.3
    loop = 0.0
    for t, m in zip(s.times, s.marks):
        if t < 5.0 and m[0] > 0.3:
            loop += np.sin(t) + m[0] ** 2
    assert s.integrate_counting(f, sel) == pytest.approx(loop, abs=1e-12)


def test_csv_and_json_readers_agree(tmp_path, rng, dom2):
    ds = Dataset([random_sequence(rng, dom2, n) for n in (5, 0, 7)], dom2)
    write_csv(ds, tmp_path / "ev.csv")
    write_json(ds, tmp_path / "ev.json")
    a, b = read_csv(tmp_path / "ev.csv"), read_json(tmp_path / "ev.json")
    assert a.domain == b.domain == dom2
    assert len(a) == len(b) == 3
    assert all(x == y for x, y in zip(a, b))
    assert all(x == y for x, y in zip(a, ds))


def test_csv_header_and_rows(tmp_path, dom2):
    ds = Dataset([EventSequence([1.5, 2.5], [[3.0], [4.0]], dom2)], dom2)
    write_csv(ds, tmp_path / "x.csv")
    lines = (tmp_path / "x.csv").read_text().splitlines()
    assert lines[0] == "seq_id,t,m1"
    assert lines[1] == "0,1.5,3.0"


def test_csv_domain_inference_and_errors(tmp_path):
    p = tmp_path / "raw.csv"
    p.write_text("seq_id,t,m1\n0,1.0,2.0\n0,3.0,5.0\n1,2.0,4.0\n")
    ds = read_csv(p)
    assert ds.domain.mark_lo == (2.0,) and ds.domain.mark_hi == (5.0,)
    assert ds.domain.horizon_T > 3.0
    p.write_text("seq_id,t,m1\n0,1.0,2.0\n0,3.0,2.0\n")
    with pytest.raises(DataError, match="mark axis 0"):
        read_csv(p)
    p.write_text("seq_id,t\n0,3.0\n0,1.0\n")
    with pytest.raises(DataError, match="non-increasing"):
        read_csv(p, Domain(10.0))
    with pytest.raises(FileNotFoundError, match="nope.csv"):
        read_dataset(tmp_path / "nope.csv")


def test_rng_for_streams_are_named():
    a = rng_for(7, "mc", 0, 1).random(3)
    assert np.array_equal(a, rng_for(7, "mc", 0, 1).random(3))
    assert not np.array_equal(a, rng_for(7, "sim", 0, 1).random(3))
    assert not np.array_equal(a, rng_for(7, "mc", 1, 1).random(3))
