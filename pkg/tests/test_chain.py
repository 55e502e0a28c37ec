import numpy as np
import pytest

from hardedge.chain import (ChainPath, StepLaw, accumulate, path_stream, phi_terms, resume, simulate, step,
                            wait_time_check)


def test_step_law_sums_to_one(env32):
    law = StepLaw.from_env(env32)
    for k in range(1, 33):
        stay, up, down = law.probabilities(k)
        assert min(stay, up, down) >= 0
        assert stay + up + down == pytest.approx(1.0)
        assert stay == pytest.approx(1 - k / 64)
        assert up == pytest.approx((1 - stay) * env32.p[k])


def test_step_frequencies(env32, rng):
    law = StepLaw.from_env(env32)
    k = 20
    draws = np.array([step(k, env32, rng, law) for _ in range(20000)])
    stay, up, down = law.probabilities(k)
    for val, prob in ((0, stay), (1, up), (-1, down)):
        freq = np.mean(draws == val)
        assert abs(freq - prob) < 4 * np.sqrt(prob * (1 - prob) / draws.size)
    with pytest.raises(ValueError):
        step(0, env32, rng)


def test_simulate_bookkeeping(env32):
    path, jc, acc = simulate(env32, 16, 5000, path_stream(0, 1))
    assert np.array_equal(np.diff(path.positions), path.steps)
    assert path.times()[-1] == pytest.approx(5000 / (4 * 32**2))
    live = path.m if path.absorbed_at < 0 else path.absorbed_at + 1
    assert jc.U.sum() + jc.D.sum() == np.count_nonzero(path.steps[:live])
    assert path.occupation().sum() == live


def test_crossing_correction_identity(env32):
    # U_k - D_{k+1} equals the crossing indicator of level k + 1/2
    for pid in range(20):
        path, jc, _ = simulate(env32, 12, 3000, path_stream(3, pid))
        if path.absorbed_at >= 0:
            continue
        end = int(path.positions[-1])
        diff = jc.U[:-1] - jc.D[1:]
        assert np.array_equal(diff, jc.crossing_correction(12, end)[:-1])


def test_absorption_freezes_path(flat32):
    # from the top site the chain is killed on its first up-step
    path, _, _ = simulate(flat32, 32, 20000, path_stream(0, 0))
    assert path.absorbed_at >= 0
    assert not path.event_E
    assert np.all(path.positions[path.absorbed_at + 1:] == 33)


def test_accumulate_matches_direct_sum(env32):
    path, _, acc = simulate(env32, 16, 4000, path_stream(0, 2))
    n, b = 32, 2.0
    A = B = 0.0
    live = path.m if path.absorbed_at < 0 else path.absorbed_at + 1
    for k in path.positions[:live]:
        x = k / n
        A += -1 / (16 * n * n * x)
        B += -(np.sqrt(n) * env32.G[k] / np.sqrt(b * x) + env32.G2[k] / (b * x)) / (4 * n * n)
    assert acc.phiA == pytest.approx(A, rel=1e-12)
    assert acc.phiB == pytest.approx(B, rel=1e-12)
    assert acc.phi(0.5) == pytest.approx(0.25 * A + 0.5 * B)


def test_resume_is_concatenation(env32):
    g = path_stream(5, 0)
    first, _, _ = simulate(env32, 16, 300, g)
    joined, jc, acc = resume(env32, first, 200, g)
    whole, jc2, acc2 = simulate(env32, 16, 500, path_stream(5, 0))
    assert np.array_equal(joined.positions, whole.positions)
    assert acc.phiB == pytest.approx(acc2.phiB)


def test_simulate_validation(env32, rng):
    with pytest.raises(ValueError):
        simulate(env32, 0, 10, rng)
    with pytest.raises(ValueError):
        simulate(env32, 4, 0, rng)


def test_holding_time_mean(env32, rng):
    res = wait_time_check(env32, 10, 20000, rng)
    assert abs(res.z) < 4
    assert res.expected_mean == pytest.approx(2 / (4 * 32**2) / (10 / 32))


def test_cutoff_event():
    # 1/log 64 is about 0.240, between 15/64 and 16/64
    path = ChainPath(64, 18, np.array([18, 17, 16, 17]), np.array([-1, -1, 1], dtype=np.int8))
    assert path.event_cutoff(1.0)
    assert not ChainPath(64, 16, np.array([16, 15]), np.array([-1], dtype=np.int8)).event_cutoff(1.0)
    assert ChainPath(64, 16, np.array([16, 15]), np.array([-1], dtype=np.int8)).event_cutoff(2.0)
