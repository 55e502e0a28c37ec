import numpy as np
import pytest
from scipy import special

from hardedge.env import GridSpec, sample_environment
from hardedge.matrix import (ModelError, apply_power, build_model, eig_residual, gershgorin_M, inverse_entries,
                             kernel_matrix, kernel_operator, limiting_kernel, smallest_eigs,
                             top_singular_values)


@pytest.fixture(scope="module")
def model16():
    env = sample_environment(GridSpec(16, 64, 1), 2.0)
    return build_model(env, 0.7)


def test_rejects_small_parameter(env8):
    with pytest.raises(ValueError):
        build_model(env8, -1.0)


def test_entries_are_weighted_transition_probabilities(model16):
    _, op = model16
    assert np.allclose(op.m_sup, op.up[:-1] * np.exp(op.H[:-1]))
    assert np.allclose(op.m_sub, op.down[1:] * np.exp(op.H[1:]))
    assert np.allclose(op.m_diag, op.stay * np.exp(op.H0))


def test_operator_similar_to_gram(model16):
    model, op = model16
    B = model.dense()
    n = model.n
    lam_A = np.sort(np.linalg.eigvals(op.dense()).real)
    lam_B = np.sort(np.linalg.svd(B, compute_uv=False) ** 2 / n)
    assert np.allclose(lam_A, lam_B, rtol=1e-9)


def test_apply_power_matches_dense(model16):
    _, op = model16
    v = np.linspace(0.2, 1.0, op.n)
    for m in (0, 1, 7, 40):
        assert np.allclose(apply_power(op, m, v), np.linalg.matrix_power(op.dense_M(), m) @ v, rtol=1e-12)
    V = np.column_stack([v, v[::-1]])
    assert np.allclose(apply_power(op, 5, V)[:, 1], apply_power(op, 5, v[::-1]))
    with pytest.raises(ValueError):
        apply_power(op, 2, np.ones(3))
    with pytest.raises(ValueError):
        apply_power(op, -1, v)


def test_inverse_entries(model16):
    model, _ = model16
    assert np.allclose(inverse_entries(model), np.linalg.inv(model.dense()), rtol=1e-10, atol=1e-14)


def test_smallest_eigs_against_dense(model16):
    model, op = model16
    n = model.n
    dense = np.sort(np.linalg.eigvals(n * n * op.dense()).real)
    res = smallest_eigs(model, 3)
    assert np.allclose(res.values, dense[:3], rtol=1e-9)
    for lam, v in zip(res.values, res.vectors.T):
        assert eig_residual(op, lam, v) <= 1e-8 * lam


def test_smallest_eigs_count_validation(model16):
    with pytest.raises(ValueError):
        smallest_eigs(model16[0], 0)


def test_flat_environment_bessel_limit():
    # W = 0 and a = 0: the bottom of the spectrum tends to j_{0,1}^2 / 4
    target = special.jn_zeros(0, 1)[0] ** 2 / 4
    assert target == pytest.approx(1.44579649, abs=1e-8)
    gaps = []
    for n in (128, 512):
        env = sample_environment(GridSpec(n, 16, 0), 2.0, zero_noise=True)
        lam = smallest_eigs(build_model(env, 0.0)[0]).values[0]
        gaps.append(abs(lam - target))
    assert gaps[1] < gaps[0]
    assert gaps[1] / target < 0.01


def test_gershgorin_contains_spectrum(model16):
    _, op = model16
    lo, hi = gershgorin_M(op)
    ev = np.linalg.eigvals(op.dense_M()).real
    assert lo <= ev.min() and ev.max() <= hi


def test_kernel_reference_is_inverse_square_singular_value(env32):
    K = kernel_matrix(env32, 1.0, 256)
    top = np.linalg.svd(K, compute_uv=False)[0]
    assert limiting_kernel(env32, 1.0, 256)[0] == pytest.approx(1.0 / top**2, rel=1e-8)


def test_kernel_matrix_free_products(env32):
    op = kernel_operator(env32, 1.0, 2048)
    v = np.random.default_rng(0).standard_normal(2048)
    K = op.dense()
    assert np.allclose(op.matvec(v), K @ v)
    assert np.allclose(op.rmatvec(v), K.T @ v)
    assert top_singular_values(op)[0] == pytest.approx(np.linalg.svd(K, compute_uv=False)[0], rel=1e-9)
    with pytest.raises(ValueError):
        kernel_operator(env32, 1.0, 3000)
