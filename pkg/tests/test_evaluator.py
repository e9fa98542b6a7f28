import json

import numpy as np
import pytest

from nsmpp.core import DataError, Domain, EventSequence
from nsmpp.evaluator import (EvalGrid, evaluate, export_figure_data, intensity_mae, kernel_slice,
                             predictive_loglik)
from nsmpp.kernel import BasisKernel, CosineBasis, ExpHawkesKernel, KernelModel, SpectralKernel, kernel_grid
from nsmpp.likelihood import MCIntegralConfig, log_likelihood
from nsmpp.simulator import SimConfig, simulate_dataset

DOM = Domain(100.0)
DOM2 = Domain(100.0, (0.0,), (100.0,))
TRUE = KernelModel(ExpHawkesKernel(0.5, 1.0))


@pytest.fixture(scope="module")
def seqs():
    return simulate_dataset(SimConfig(TRUE, DOM, seed=21), 4)


def spectral(seed):
    return KernelModel(SpectralKernel.init(1, 2, (6, 3), (4,), input_scale=0.02, seed=seed, spectrum=1e-9),
                       mu=0.01)


def test_grid_axes_are_cell_centred():
    tg, mg = EvalGrid(4, 2).axes(DOM2)
    np.testing.assert_allclose(tg, [12.5, 37.5, 62.5, 87.5])
    np.testing.assert_allclose(mg[0], [25.0, 75.0])
    assert EvalGrid(4, 2).cell_volume(DOM2) == 100.0 * 100.0 / 8
    with pytest.raises(ValueError):
        EvalGrid(1)


def test_mae_zero_for_identical_models(seqs):
    assert intensity_mae(TRUE, KernelModel(ExpHawkesKernel(0.5, 1.0)), seqs) == 0.0


def test_mae_constant_difference():
    s = [EventSequence([], None, DOM)]
    assert intensity_mae(KernelModel(None, mu=1.0), KernelModel(None, mu=1.5), s) == pytest.approx(50.0, rel=1e-12)
    s2 = [EventSequence([], np.zeros((0, 1)), DOM2)]
    assert intensity_mae(KernelModel(None, mu=1.0), KernelModel(None, mu=1.5), s2, EvalGrid(10, 7)) == \
        pytest.approx(5000.0, rel=1e-12)


def test_mae_triangle_inequality(seqs):
    a, b, c = TRUE, KernelModel(ExpHawkesKernel(0.3, 2.0)), KernelModel(ExpHawkesKernel(0.7, 0.5), mu=1.2)
    g = EvalGrid(300)
    assert intensity_mae(a, c, seqs, g) <= intensity_mae(a, b, seqs, g) + intensity_mae(b, c, seqs, g) + 1e-12


def test_mae_refinement(seqs):
    fitted = KernelModel(ExpHawkesKernel(0.4, 1.3))
    coarse = intensity_mae(TRUE, fitted, seqs, EvalGrid(1000))
    fine = intensity_mae(TRUE, fitted, seqs, EvalGrid(2000))
    assert abs(coarse - fine) / fine < 0.01


def test_mae_per_sequence_averages_to_headline(seqs):
    fitted = KernelModel(ExpHawkesKernel(0.4, 1.3))
    per = intensity_mae(TRUE, fitted, seqs, per_sequence=True)
    assert per.shape == (4,) and np.all(per >= 0)
    assert np.mean(per) == intensity_mae(TRUE, fitted, seqs)


def test_mae_domain_mismatch():
    basis = CosineBasis(Domain(50.0), 2)
    with pytest.raises(DataError):
        intensity_mae(TRUE, KernelModel(BasisKernel(basis, np.eye(2) * 0.01)), [EventSequence([], None, DOM)])


def test_predictive_loglik_delegates(seqs):
    cfg = MCIntegralConfig(300, seed=4, resample_each_step=False)
    assert predictive_loglik(TRUE, seqs, cfg) == log_likelihood(TRUE, seqs, cfg).mean
    dom = Domain(10.0)
    s = [EventSequence([1.0, 2.0, 3.0, 4.0, 5.0], None, dom)]
    assert abs(predictive_loglik(KernelModel(None, mu=2.0), s) - (5 * np.log(2) - 20)) < 1e-12


def test_evaluate_report_modes(seqs):
    cfg = MCIntegralConfig(200, resample_each_step=False)
    fitted = KernelModel(ExpHawkesKernel(0.4, 1.3))
    with_truth = evaluate(fitted, seqs, cfg, TRUE, EvalGrid(200))
    d = with_truth.to_dict()
    assert d["mae"] >= 0 and np.mean(d["mae_per_sequence"]) == d["mae"]
    assert np.mean(d["ll_per_sequence"]) == d["predictive_ll"]
    real = evaluate(fitted, seqs, cfg).to_dict()
    assert "mae" not in real and real["predictive_ll"] == d["predictive_ll"]


def test_kernel_slice_reduces_to_grid():
    m = spectral(2)
    P, Q, K, free = kernel_slice(m, DOM2, {"t_prev": 20.0, "m_prev1": 40.0}, n=12)
    assert free == ["t", "m1"] and K.shape == (12, 12)
    pts = np.column_stack([P[:, 0], P[:, 1]])[:1]
    ref = kernel_grid(m, pts, Q, mark_dim=1).reshape(12, 12)
    np.testing.assert_array_equal(np.isnan(K), np.isnan(ref))
    np.testing.assert_allclose(K[~np.isnan(K)], ref[~np.isnan(ref)], rtol=1e-13)
    with pytest.raises(ValueError):
        kernel_slice(m, DOM2, {"t_prev": 1.0}, n=4)


def test_export_manifest_contract(tmp_path, seqs):
    models = {"true": TRUE, "fitted": KernelModel(ExpHawkesKernel(0.4, 1.3))}
    man = export_figure_data(models, seqs, tmp_path, EvalGrid(50, 5), kernel_n=20, seq_indices=(0, 2))
    written = sorted(p.name for p in tmp_path.iterdir() if p.name != "manifest.json")
    assert sorted(f["path"] for f in man["files"]) == written
    assert all((tmp_path / f["path"]).stat().st_size > 0 for f in man["files"])
    assert json.loads((tmp_path / "manifest.json").read_text()) == man
    assert "kernel_true.csv" in written and "intensity_fitted_seq2.csv" in written


def test_export_is_deterministic(tmp_path):
    ds = simulate_dataset(SimConfig(spectral(1), DOM2, seed=2), 2)
    models = {"true": spectral(1), "fitted": spectral(5)}
    kw = dict(grid=EvalGrid(20, 5), kernel_n=10, slices=({"t_prev": 10.0, "m_prev1": 50.0},), config={"seed": 2})
    export_figure_data(models, ds, tmp_path / "a", **kw)
    export_figure_data(models, ds, tmp_path / "b", **kw)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "kernel_fitted_slice0.csv" in names and "kernel_true.csv" not in names
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
