import numpy as np
import pytest
from scipy.special import expit

from nsmpp import net
from nsmpp.core import EventPoint
from nsmpp.net import NetSpec, backward, features, features_vjp, forward, init_params, n_params, param_layout

from conftest import central_diff, grad_rel_err


def straight_line_forward(spec, theta, x):
    """Independent re-implementation: one layer at a time, one branch at a time, plain loops."""
    slots = {s.name: theta[s.offset:s.offset + s.size].reshape(s.shape) for s in param_layout(spec)}
    sp = lambda z: np.array([np.log(1.0 + np.exp(v)) if abs(v) < 30 else (v if v > 0 else np.exp(v))
                             for v in z])
    a = np.asarray(x, float) * spec.input_scale
    for i in range(len(spec.trunk_layers)):
        a = sp(a @ slots[f"trunk{i}.W"] + slots[f"trunk{i}.b"])
    outs = []
    nb = len(spec.branch_hidden) + 1
    for b in range(spec.branch_count):
        h = a
        for i in range(nb):
            z = h @ slots[f"branch{i}.W"][b] + slots[f"branch{i}.b"][b]
            h = sp(z) if i < nb - 1 else spec.output_scale / (1.0 + np.exp(-z))
        outs.append(h[0])
    R = spec.rank
    return np.array(outs[:R]), np.array(outs[R:])


def test_layout_is_a_bijection():
    spec = NetSpec(2, (5, 4), 6, (3, 2))
    slots = param_layout(spec)
    covered = np.zeros(n_params(spec), int)
    for s in slots:
        covered[s.offset:s.offset + s.size] += 1
    assert np.all(covered == 1)


def test_zero_params_give_half_scale():
    spec = NetSpec(2, (4, 3), 4, (5,), 100.0)
    out = forward(spec, np.zeros(n_params(spec)), EventPoint(3.0, (7.0,)))
    assert np.all(out.psi == 50.0) and np.all(out.phi == 50.0)


def test_outputs_bounded(rng):
    spec = NetSpec(2, (8, 8, 4), 6, (8,), 100.0, 0.01)
    theta = init_params(spec, 3)
    f = features(spec, theta, rng.uniform(0, 100, (500, 2)))
    for arr in f:
        assert np.all(arr > 0) and np.all(arr < 100)
    # saturated heads round to the closed interval in floating point
    f = features(spec, theta * 50, rng.uniform(-100, 100, (500, 2)))
    for arr in f:
        assert np.all(arr >= 0) and np.all(arr <= 100)


def test_forward_matches_straight_line_oracle(rng):
    spec = NetSpec(3, (7, 6, 4), 6, (5, 3), 37.0, 0.3)
    theta = init_params(spec, 11) + 0.1 * rng.normal(size=n_params(spec))
    for _ in range(5):
        x = rng.uniform(-2, 2, 3)
        psi, phi = straight_line_forward(spec, theta, x)
        got = forward(spec, theta, x)
        np.testing.assert_allclose(got.psi, psi, rtol=1e-12)
        np.testing.assert_allclose(got.phi, phi, rtol=1e-12)


def test_forward_is_pure(rng):
    spec = NetSpec(2, (8, 4), 4, (6,))
    theta = init_params(spec, 0)
    X = rng.uniform(0, 100, (20, 2))
    before = theta.copy()
    a, b = features(spec, theta, X), features(spec, theta, X)
    assert np.array_equal(a.psi, b.psi) and np.array_equal(a.phi, b.phi)
    assert np.array_equal(theta, before)


def test_dimension_mismatch():
    spec = NetSpec(2, (4,), 2, (3,))
    with pytest.raises(ValueError):
        features(spec, np.zeros(3), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        features(spec, np.zeros(n_params(spec)), np.zeros((1, 3)))


def test_backward_linear_in_upstream(rng):
    spec = NetSpec(2, (8, 8, 4), 4, (8,))
    theta = init_params(spec, 1)
    x = rng.uniform(0, 1, 2)
    assert np.all(backward(spec, theta, x, np.zeros(4)) == 0)
    u1, u2 = rng.normal(size=4), rng.normal(size=4)
    np.testing.assert_allclose(backward(spec, theta, x, u1 + u2),
                               backward(spec, theta, x, u1) + backward(spec, theta, x, u2),
                               rtol=1e-10, atol=1e-13)


def test_backward_finite_differences_small_net(rng):
    spec = NetSpec(2, (8, 8, 4), 2, (8,))
    theta = init_params(spec, 5)
    x = rng.uniform(0, 1, 2)
    u = rng.normal(size=2)
    L = lambda th: float(np.dot(u, np.concatenate(forward(spec, th, x))))
    fd = central_diff(L, theta, h=1e-5)
    assert grad_rel_err(backward(spec, theta, x, u), fd) < 1e-5


def test_default_shapes_gradient_check():
    """Default-width layers against finite differences at many random parameter points."""
    spec = NetSpec(2, (128, 128, 10), 10, (32, 32))
    rng = np.random.default_rng(0)
    base = init_params(spec, 0)
    worst = 0.0
    for k in range(50):
        theta = base + 0.05 * rng.normal(size=base.size)
        X = rng.uniform(0, 1, (3, 2))
        up_psi, up_phi = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
        _, vjp = features_vjp(spec, theta, X)
        g = vjp(up_psi, up_phi)
        # a random subset of coordinates per point keeps this test fast
        idx = rng.choice(base.size, 12, replace=False)
        idx[0] = np.argmax(np.abs(g))

        def L(th):
            f = features(spec, th, X)
            return np.sum(f.psi * up_psi) + np.sum(f.phi * up_phi)

        fd = np.empty(len(idx))
        for j, i in enumerate(idx):
            e = np.zeros_like(theta)
            e[i] = 1e-5
            fd[j] = (L(theta + e) - L(theta - e)) / 2e-5
        scale = np.maximum(np.abs(fd), 1e-3 * np.max(np.abs(g)))
        worst = max(worst, float(np.max(np.abs(g[idx] - fd) / scale)))
    assert worst < 1e-4


def test_init_params():
    spec = NetSpec(1, (10,), 2, (32,))
    a, b = init_params(spec, 42), init_params(spec, 42)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, init_params(spec, 43))
    slot = next(s for s in param_layout(spec) if s.name == "branch0.W")
    w = a[slot.offset:slot.offset + slot.size]
    assert slot.shape[1:] == (10, 32)
    assert np.all(np.abs(w) <= np.sqrt(6 / 42))
    biases = np.concatenate([a[s.offset:s.offset + s.size] for s in param_layout(spec) if s.name.endswith(".b")])
    assert np.all(biases == 0)


def test_softplus_stable():
    z = np.array([-800.0, -31.0, -5.0, 0.0, 5.0, 31.0, 800.0])
    sp = net.softplus(z)
    assert np.all(np.isfinite(sp))
    np.testing.assert_allclose(sp[2:5], np.log1p(np.exp(z[2:5])), rtol=1e-15)
    assert abs(sp[5] - np.log1p(np.exp(31.0))) < 1e-13
    np.testing.assert_allclose(net.softplus_inv(net.softplus(np.array([-3.0, 0.2, 40.0]))),
                               [-3.0, 0.2, 40.0], rtol=1e-12)
