import numpy as np
import pytest

from hardedge import diffusion as dif
from hardedge.chain import ChainPath
from hardedge.env import GridSpec, sample_environment


@pytest.fixture(scope="module")
def flat_tables(flat32):
    return dif.path_tables(flat32, x_min=0.05)


def test_linear_segment_clock_closed_form(flat_tables):
    # s = log x: along b0 -> b1 over duration D, T = D (x1 - x0) / (2 (b1 - b0)) and Phi^A = -D/8
    b = np.log([0.5, 0.6])
    D = 1e-3
    p = dif.drive(flat_tables, b, D, t_max=1.0)
    assert p.T[-1] == pytest.approx(D * 0.1 / (2 * (b[1] - b[0])), rel=1e-6)
    assert p.phiA[-1] == pytest.approx(-D / 8, rel=1e-6)
    assert p.phiB[-1] == 0.0


def test_flat_noise_functional_vanishes(flat_tables):
    p = dif.simulate_X(flat_tables, 0.5, 0.02, 1e-6, np.random.default_rng(0))
    assert p.covers(0.02)
    assert np.all(p.phiB == 0.0)
    val, A, B = dif.phi(p, 2.0, 0.02)
    assert B == 0.0 and val == pytest.approx(4 * A)
    # -1/(4X) integrated over time, X near 1/2 for a short run
    assert A == pytest.approx(-0.02 / 2, rel=0.2)


def test_phi_raises_past_the_end(flat_tables):
    p = dif.simulate_X(flat_tables, 0.5, 0.01, 1e-6, np.random.default_rng(1))
    with pytest.raises(dif.DomainExit):
        dif.phi(p, 1.0, 0.5)


def test_start_validation(flat_tables):
    with pytest.raises(ValueError):
        dif.simulate_X(flat_tables, 0.01, 0.1, 1e-6, np.random.default_rng(0))
    with pytest.raises(ValueError):
        dif.drive(flat_tables, np.array([-50.0, -49.0]), 1e-3, 1.0)


def test_exit_through_the_top(flat_tables):
    b = np.linspace(np.log(0.9), np.log(1.02), 200)
    stopped = dif.drive(flat_tables, b, 1e-5, 10.0)
    assert stopped.exited == "high"
    above = dif.drive(flat_tables, b, 1e-5, 10.0, allow_above=True)
    assert above.exited == ""
    assert above.x(flat_tables)[-1] == pytest.approx(1.02)


def test_driver_reproducible(env32):
    tables = dif.path_tables(env32, x_min=0.05)
    a = dif.simulate_X(tables, 0.5, 0.01, 1e-6, np.random.default_rng(3))
    b = dif.simulate_X(tables, 0.5, 0.01, 1e-6, np.random.default_rng(3))
    assert np.array_equal(a.b, b.b) and np.array_equal(a.phiB, b.phiB)


def test_local_time_normalisation(env32):
    tables = dif.path_tables(env32, x_min=0.05)
    p = dif.simulate_X(tables, 0.5, 0.02, 1e-6, np.random.default_rng(4))
    field = dif.local_time(p, tables, [0.01, 0.02], 32)
    for j, t in enumerate((0.01, 0.02)):
        # binned B local time integrates to the B clock, cell occupation to the experiment clock
        assert field.L_B[j].sum() * field.width == pytest.approx(field.u[j], rel=1e-9)
        assert field.L_X_cells(t).sum() == pytest.approx(t, rel=1e-6)
    with pytest.raises(KeyError):
        field.at(0.015)
    with pytest.raises(dif.DomainExit):
        dif.local_time(p, tables, [1.0], 32)


def test_occupation_functional_tracks_path_integral(flat32, flat_tables):
    p = dif.simulate_X(flat_tables, 0.5, 0.02, 1e-6, np.random.default_rng(5))
    field = dif.local_time(p, flat_tables, [0.02], 32)
    _, A_tilde, B_tilde = dif.phi_tilde(field, flat32, 1.0, 0.02)
    _, A, _ = dif.phi(p, 1.0, 0.02)
    assert B_tilde == 0.0
    assert A_tilde == pytest.approx(A, rel=0.1)


def test_extracted_chain_has_lattice_law(env32):
    tables = dif.path_tables(env32, x_min=0.05)
    stays = exp_stays = var_stays = ups = exp_ups = var_ups = 0.0
    for i in range(20):
        p = dif.simulate_X(tables, 0.5, 0.03, 1e-6, np.random.default_rng(100 + i))
        rec, chain = dif.extract_chain(p, env32, tables)
        assert np.all(np.diff(rec.times) > 0)
        assert np.array_equal(np.diff(chain.positions), chain.steps)
        live = chain.m if chain.absorbed_at < 0 else chain.absorbed_at + 1
        pre, st = chain.positions[:live], chain.steps[:live]
        r = env32.r[pre]
        stays += np.sum(st == 0)
        exp_stays += r.sum()
        var_stays += np.sum(r * (1 - r))
        jumps = st != 0
        pk = env32.p[pre[jumps]]
        ups += np.sum(st[jumps] == 1)
        exp_ups += pk.sum()
        var_ups += np.sum(pk * (1 - pk))
    assert abs(stays - exp_stays) < 4 * np.sqrt(var_stays)
    assert abs(ups - exp_ups) < 4 * np.sqrt(var_ups)


def test_extraction_needs_lattice_start(env32):
    tables = dif.path_tables(env32, x_min=0.05)
    p = dif.simulate_X(tables, 0.51, 0.001, 1e-6, np.random.default_rng(0))
    with pytest.raises(ValueError):
        dif.extract_chain(p, env32, tables)


def test_jump_times_on_chain_clock():
    rec = dif.StoppingRecord(8, 4, np.array([0.1, 0.2, 0.3]), np.zeros(3), np.array([4, 5, 5]),
                             np.array([0, 1, 0], dtype=np.int8))
    tau, tau_t = rec.jump_times()
    assert tau == pytest.approx([2 / 256]) and tau_t == pytest.approx([0.2])


def test_phi_n_sums_pre_step_sites(env8):
    chain = ChainPath(8, 3, np.array([3, 4, 4, 3]), np.array([1, 0, -1], dtype=np.int8))
    _, A, _ = dif.phi_n(chain, env8, 1.0, 3)
    assert A == pytest.approx(-(1 / 256) * (8 / 12 + 8 / 16 + 8 / 16))
    with pytest.raises(dif.DomainExit):
        dif.phi_n(chain, env8, 1.0, 4)


def test_exit_occupation_matches_green(env32):
    res = dif.exit_occupation(env32, 12, 4000, np.random.default_rng(7), steps_per_cell=200)
    assert abs(res["mc_up"] - res["green_up"]) < 4 * res["se_up"]
    assert abs(res["mc_down"] - res["green_down"]) < 4 * res["se_down"]


def test_flat_exit_times(flat32):
    # W = 0: each half-cell takes Delta t / x to leading order
    up, down = dif.green_occupation(flat32, 16)
    dt_x = 1 / (4 * 32**2) / 0.5
    f_up, f_down = dif.exit_formula(flat32, 16)
    assert f_up == f_down == pytest.approx(dt_x)
    assert up + down == pytest.approx(2 * dt_x, rel=0.01)


def test_exit_formula_error_shrinks_with_n():
    errs = []
    for n in (64, 256, 1024):
        env = sample_environment(GridSpec(n, 2**19 // n, 0), 2.0)
        dt = 1 / (4 * n * n)
        e = []
        for k in range(n // 4, n // 2, max(1, n // 64)):
            g = dif.green_occupation(env, k)
            f = dif.exit_formula(env, k)
            e.append(max(abs(g[0] - f[0]), abs(g[1] - f[1])) / (dt * n / k))
        errs.append(np.median(e))
    assert errs[0] > errs[1] > errs[2]


def test_fit_slope_and_summary():
    assert dif.fit_slope([2, 4, 8], [1.0, 0.5, 0.25]) == pytest.approx(-1.0)
    rows = [{"n": 8, "alive": True, "cutoff": True, "sup_ok": True, "a": 1.0, "b": 1.5},
            {"n": 8, "alive": True, "cutoff": False, "sup_ok": True, "a": 1.0, "b": 9.0},
            {"n": 16, "alive": False}]
    out = dif.summarize(rows, "a", "b")
    assert out[8] == (0.5, 1)
    assert np.isnan(out[16][0]) and out[16][1] == 0
