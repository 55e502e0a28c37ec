import numpy as np
import pytest

from hardedge import fk
from hardedge.env import GridSpec, sample_environment


@pytest.fixture(scope="module")
def env6():
    return sample_environment(GridSpec(6, 64, 2), 2.0)


def brute_force(inst):
    """Recursive path sum, independent of the vectorised enumeration."""
    M = inst.op.dense_M()
    n = inst.op.n

    def walk(k, left):
        if left == 0:
            return inst.v[k - 1]
        return sum(M[k - 1, j - 1] * walk(j, left - 1) for j in (k - 1, k, k + 1) if 1 <= j <= n)

    return walk(inst.k, inst.m)


@pytest.mark.parametrize("m", [0, 1, 4, 7])
@pytest.mark.parametrize("k", [1, 3, 6])
def test_enumeration_matches_matrix_power(env6, m, k):
    v = np.linspace(0.3, 1.0, 6)
    inst = fk.FkInstance.make(env6, 1.0, k, m, v)
    ps = fk.path_sum(inst)
    assert ps == pytest.approx(inst.matrix_value(), rel=1e-12)
    assert ps == pytest.approx(brute_force(inst), rel=1e-12)


def test_enumeration_cap(env6):
    inst = fk.FkInstance.make(env6, 1.0, 2, 20, np.ones(6))
    with pytest.raises(ValueError):
        fk.path_sum(inst)


def test_instance_validation(env6):
    with pytest.raises(ValueError):
        fk.FkInstance.make(env6, 1.0, 2, 3, np.ones(5))
    with pytest.raises(ValueError):
        fk.FkInstance.make(env6, 1.0, 2, 3, np.ones(6), mode="other")


def test_exact_weights_are_unbiased(env6):
    inst = fk.FkInstance.make(env6, 1.0, 3, 30, np.linspace(0.1, 1.0, 6))
    rep = fk.verify(inst, 40000, seed=4)
    assert abs(rep.z_score) < 4
    assert rep.row()["matrix_value"] == pytest.approx(inst.matrix_value())


def test_enumeration_report(env6):
    rep = fk.verify(fk.FkInstance.make(env6, 1.0, 3, 5, np.ones(6)), 0)
    assert rep.mode == "enumeration"
    assert rep.estimate == pytest.approx(rep.matrix_value, rel=1e-12)


def test_paths_are_reproducible(env6):
    inst = fk.FkInstance.make(env6, 1.0, 3, 50, np.ones(6))
    a = fk.run_paths(inst, 300, seed=1)
    b = fk.run_paths(inst, 300, seed=1, block=64)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    # path i uses the same stream whatever batch it falls in
    tail = fk.run_paths(inst, 100, seed=1, first_path=200)
    assert np.array_equal(tail[1], a[1][200:])


def test_residual_is_small(env32):
    res = fk.residual(env32, 1.0, 16, 1024, 300, seed=0)
    assert 0 < res.keep_fraction <= 1
    assert res.median_abs_R < 0.05
