import numpy as np
import pytest

from nsmpp.core import DataError, Domain, EventPoint, EventSequence
from nsmpp.intensity import intensity, lambda_at, lambda_trace, write_trace_csv
from nsmpp.kernel import ExpHawkesKernel, KernelModel, SpectralKernel, kernel_eval

from conftest import random_sequence

EXP = KernelModel(ExpHawkesKernel(0.5, 1.0))


def spectral_model(seed=0):
    return KernelModel(SpectralKernel.init(1, 2, (6, 3), (4,), input_scale=0.02, seed=seed, spectrum=0.01))


def test_empty_history_gives_mu(dom1):
    seq = EventSequence([], None, dom1)
    assert lambda_at(EXP, seq, EventPoint(5.0)) == 1.0
    assert lambda_at(KernelModel(None), seq, EventPoint(5.0)) == 1.0


def test_single_event_closed_form(dom1):
    seq = EventSequence([0.0], None, dom1)
    assert lambda_at(EXP, seq, EventPoint(1.0)) == pytest.approx(1 + 0.5 * np.exp(-1), rel=1e-14)


def test_additivity(dom1):
    a = lambda_at(EXP, EventSequence([0.5], None, dom1), EventPoint(3.0))
    b = lambda_at(EXP, EventSequence([2.0], None, dom1), EventPoint(3.0))
    ab = lambda_at(EXP, EventSequence([0.5, 2.0], None, dom1), EventPoint(3.0))
    assert ab == pytest.approx(a + b - 1.0, rel=1e-14)


def test_query_at_event_time_excludes_it(dom1):
    seq = EventSequence([1.0, 4.0], None, dom1)
    assert lambda_at(EXP, seq, EventPoint(4.0)) == pytest.approx(1 + 0.5 * np.exp(-3), rel=1e-14)


def test_query_outside_domain(dom1, dom2):
    with pytest.raises(DataError):
        lambda_at(EXP, EventSequence([], None, dom1), EventPoint(100.0))
    with pytest.raises(DataError):
        lambda_at(spectral_model(), EventSequence([], None, dom2), EventPoint(1.0, (101.0,)))


def test_matches_direct_kernel_sum(rng, dom2):
    m = spectral_model(1)
    seq = random_sequence(rng, dom2, 30)
    for _ in range(10):
        x = EventPoint(rng.uniform(0, 100), (rng.uniform(0, 100),))
        direct = m.mu + sum(kernel_eval(m, e, x) for e in seq.events if e.t < x.t)
        assert lambda_at(m, seq, x) == pytest.approx(direct, rel=1e-12)


def test_causality_by_mutation(rng, dom2):
    m = spectral_model(2)
    seq = random_sequence(rng, dom2, 40)
    x = EventPoint(50.0, (30.0,))
    before = lambda_at(m, seq, x)
    times = seq.times.copy()
    marks = seq.marks.copy()
    late = times >= 50.0
    marks[late] = rng.uniform(0, 100, (late.sum(), 1))
    times[late] = np.sort(rng.uniform(50.0, 100.0, late.sum()))
    mutated = EventSequence(times, marks, dom2)
    assert lambda_at(m, mutated, x) == before


def test_monotone_history_growth(rng, dom2):
    m = spectral_model(3)
    seq = random_sequence(rng, dom2, 10)
    x = EventPoint(90.0, (10.0,))
    base = lambda_at(m, seq, x)
    for _ in range(10):
        t_new = rng.uniform(0, 90)
        if t_new in seq.times:
            continue
        order = np.argsort(np.append(seq.times, t_new))
        grown = EventSequence(np.append(seq.times, t_new)[order],
                              np.vstack([seq.marks, [[rng.uniform(0, 100)]]])[order], dom2)
        assert lambda_at(m, grown, x) >= base


def test_intensity_at_least_mu(rng, dom2):
    m = spectral_model(4)
    seq = random_sequence(rng, dom2, 50)
    lam = intensity(m, seq, rng.uniform(0, 100, 500), rng.uniform(0, 100, (500, 1)))
    assert np.all(lam >= m.mu)
    seq1 = random_sequence(rng, Domain(100.0), 50)
    assert np.all(intensity(EXP, seq1, rng.uniform(0, 100, 500)) >= 1.0)


def test_trace_constant_without_events(dom2):
    tr = lambda_trace(EXP, EventSequence([], None, Domain(100.0)), np.linspace(0, 99, 20))
    assert np.all(tr == 1.0)
    m = spectral_model()
    tr = lambda_trace(m, EventSequence([], np.zeros((0, 1)), dom2), np.linspace(0, 99, 5), [np.linspace(0, 100, 3)])
    assert tr.shape == (5, 3) and np.all(tr == m.mu)


def test_trace_node_equals_lambda_at(rng, dom2):
    m = spectral_model(5)
    seq = random_sequence(rng, dom2, 20)
    tg, mg = np.array([12.5, 60.0]), [np.array([0.0, 42.0])]
    tr = lambda_trace(m, seq, tg, mg)
    assert tr[1, 1] == pytest.approx(lambda_at(m, seq, EventPoint(60.0, (42.0,))), rel=1e-13)


def test_trace_jumps_by_alpha_beta(dom1):
    seq = EventSequence([10.0, 30.0], None, dom1)
    h = 1e-7
    for te in seq.times:
        left, right = lambda_trace(EXP, seq, [te, te + h])
        assert right - left == pytest.approx(0.5 * 1.0, abs=1e-6)


def test_trace_grid_checks(dom1):
    seq = EventSequence([], None, dom1)
    with pytest.raises(DataError):
        lambda_trace(EXP, seq, [0.0, 100.0])
    with pytest.raises(DataError):
        lambda_trace(EXP, seq, [1.0], [np.array([1.0])])


def test_write_trace_csv(tmp_path, dom1):
    seq = EventSequence([0.0], None, dom1)
    tg = [1.0, 2.0]
    write_trace_csv(tmp_path / "tr.csv", tg, [], lambda_trace(EXP, seq, tg))
    lines = (tmp_path / "tr.csv").read_text().splitlines()
    assert lines[0] == "t,lambda"
    assert lines[1].startswith("1.0,1.18393")
