import numpy as np
import pytest

from hardedge import rng as _rng
from hardedge.env import (Environment, GridSpec, QuadratureError, build_scale_table, dyadic_brownian,
                          exact_logit, local_statistics, logit_expansion, sample_brownian, sample_environment)


def direct_cell_sums(env, k):
    """Loop oracle for G_k, G2_k and gamma_k straight from the increments."""
    n, sub = env.n, env.grid.sub
    dW = np.diff(env.W.values)
    u = np.arange(sub) / sub

    def nested(c):
        d = dW[c * sub:(c + 1) * sub]
        tot = 0.0
        for j in range(sub):
            for i in range(j):
                tot += u[i] * (1 - u[j]) * d[i] * d[j]
        return tot

    d0, d1 = dW[(k - 1) * sub:k * sub], dW[k * sub:(k + 1) * sub]
    G = np.sqrt(n) * (np.dot(u, d0) + np.dot(1 - u, d1))
    G2 = 2 * n * (nested(k - 1) - nested(k))
    gamma = 4 * np.sqrt(n) * np.dot(u * (1 - u), d1)
    return G, G2, gamma


def test_grid_validation():
    with pytest.raises(ValueError):
        GridSpec(1)
    with pytest.raises(ValueError):
        GridSpec(8, 0)


def test_cell_statistics_match_direct_sums(env8):
    for k in (1, 3, 7):
        G, G2, gamma = direct_cell_sums(env8, k)
        assert env8.G[k] == pytest.approx(G, abs=1e-12)
        assert env8.G2[k] == pytest.approx(G2, abs=1e-12)
        assert env8.gamma[k] == pytest.approx(gamma, abs=1e-12)


def test_frozen_regression_values(env8):
    # computed once with the loop oracle above and frozen
    assert env8.G[3] == pytest.approx(0.051753626018976095, abs=1e-12)
    assert env8.G2[3] == pytest.approx(-0.12924615439338535, abs=1e-12)
    assert env8.gamma[3] == pytest.approx(0.6353015061826096, abs=1e-12)


def test_flat_scale_is_log(flat32):
    x = np.arange(1, 34) / 32
    assert np.allclose(flat32.s[1:], np.log(x), atol=1e-9)
    assert np.all(flat32.Iexp[1:] == 1.0)


def test_flat_jump_probabilities_closed_form(flat32):
    k = np.arange(2, 33)
    p = np.log(k / (k - 1)) / np.log((k + 1) / (k - 1))
    assert np.allclose(flat32.p[k], p, atol=1e-9)
    assert flat32.p[2] == pytest.approx(np.log(2) / np.log(3), abs=1e-9)
    assert flat32.p[1] == 1.0
    assert np.allclose(flat32.p[1:33] + flat32.q[1:33], 1.0)


def test_stay_probability(env32):
    k = np.arange(1, 33)
    assert np.allclose(env32.r[k], 1 - k / 64)


def test_interval_endpoints_reproduce_stay_law(env32):
    n = env32.n
    k = np.arange(2, n + 1)
    x = k / n
    am, ap = env32.alpha_minus[k], env32.alpha_plus[k]
    assert np.all((x - 1 / n < am) & (am < x) & (x < ap) & (ap < x + 1 / n))
    y = np.arange(env32.fine_s.size) * env32.grid.h
    s_ap = np.interp(ap, y[1:], env32.fine_s[1:])
    s_am = np.interp(am, y[1:], env32.fine_s[1:])
    s = env32.s
    # leaving (alpha_-, alpha_+) returns to x_k with probability r_k
    assert np.allclose((s_ap - s[k]) / (s[k + 1] - s[k]), 1 - env32.r[k], atol=1e-6)
    assert np.allclose((s[k] - s_am) / (s[k] - s[k - 1]), 1 - env32.r[k], atol=1e-6)


def test_dyadic_coupling_across_resolutions():
    a = sample_brownian(GridSpec(64, 128, 3))
    b = sample_brownian(GridSpec(128, 64, 3))
    c = sample_brownian(GridSpec(32, 64, 3))
    assert np.array_equal(a.values[: b.values.size], b.values[: a.values.size])
    # the coarser path sits on every fourth node of the finer one
    m = min(c.values.size, a.values[::4].size)
    assert np.array_equal(c.values[:m], a.values[::4][:m])


def test_dyadic_prefix_matches_full_path():
    full = dyadic_brownian(5, _rng.DRIVER, 10, 1, 2)
    part = dyadic_brownian(5, _rng.DRIVER, 10, 1, 2, horizon=0.3)
    assert np.array_equal(full[: part.size], part)


def test_brownian_increment_variance():
    w = dyadic_brownian(0, _rng.AUX, 14, 4)
    h = 2.0 ** -14
    assert np.var(np.diff(w)) / h == pytest.approx(1.0, rel=0.02)


def test_determinism_and_roundtrip(tmp_path):
    e1 = sample_environment(GridSpec(16, 32, 9), 1.5)
    e2 = sample_environment(GridSpec(16, 32, 9), 1.5)
    assert e1.to_bytes() == e2.to_bytes()
    e1.save(tmp_path / "env.bin")
    back = Environment.load(tmp_path / "env.bin")
    for name in Environment._ARRAYS:
        assert np.array_equal(getattr(back, name), getattr(e1, name), equal_nan=True)
    assert back.to_bytes() == e1.to_bytes()


def test_load_rejects_foreign_file(tmp_path):
    f = tmp_path / "junk.bin"
    f.write_bytes(b"not an environment")
    with pytest.raises(ValueError):
        Environment.load(f)


def test_beta_must_be_positive():
    with pytest.raises(ValueError):
        sample_environment(GridSpec(8, 16, 0), 0.0)


def test_flat_logit_expansion():
    env = sample_environment(GridSpec(64, 256, 0), 2.0, zero_noise=True)
    k = np.arange(2, 65)
    assert np.all(np.abs(exact_logit(env, k) - 1 / k) <= 2 / k**2)
    assert logit_expansion(env, 10) == pytest.approx(0.1)
    with pytest.raises(IndexError):
        logit_expansion(env, 0)


def test_local_statistics_moments():
    G, G2, gamma = local_statistics(20000, np.random.default_rng(2))
    assert G.var() == pytest.approx(2 / 3, rel=0.05)
    assert gamma.var() == pytest.approx(8 / 15, rel=0.05)
    assert abs(G2.mean()) < 4 * G2.std() / np.sqrt(G2.size)


def test_scale_table(env32):
    tab = build_scale_table(env32, 0.1)
    assert np.all(np.diff(tab.s) > 0)
    x = np.array([0.2, 0.55, 0.93])
    assert np.allclose(tab.inverse(tab(x)), x, atol=1e-9)
    assert np.isnan(tab(0.01))
    with pytest.raises(ValueError):
        build_scale_table(env32, 1.5)
