import numpy as np
import pytest

from hardedge import rng as _rng
from hardedge import transition as tr
from hardedge.env import BrownianPath, GridSpec, dyadic_brownian, sample_environment


def linear_frame(slope=0.5, du=0.01, steps=200, beta=2.0):
    inc = slope * du * np.arange(steps + 1)
    edges = np.linspace(-5.0, 5.0, 101)
    w = np.sin(edges)
    return tr.RescaledFrame(8.0, beta, du, inc, edges, w)


def test_occupation_of_a_linear_segment():
    occ = np.zeros(4)
    lost = tr._occupation(np.array([0.5, 2.5]), np.array([2.0]), np.array([0.0, 1.0, 2.0, 3.0, 4.0]), occ)
    assert np.allclose(occ, [0.5, 1.0, 0.5, 0.0]) and lost == 0.0
    occ[:] = 0
    lost = tr._occupation(np.array([-1.0, 1.0]), np.array([1.0]), np.array([0.0, 2.0]), occ)
    assert occ[0] == pytest.approx(0.5) and lost == pytest.approx(0.5)


def test_area_and_noise_closed_form():
    f = linear_frame()
    z, t = 1.0, 1.234
    v = tr.sao_functional(f, z, t, zero_noise=True)
    assert v.area == pytest.approx(z * t + 0.5 * 0.5 * t * t, rel=1e-12)
    assert v.psi == -v.area
    # over a monotone path int L dw is (w(end) - w(start)) / speed, w linear between edges
    full = tr.sao_functional(f, z, t)
    wl = lambda y: np.interp(y, f.edges, f.w)
    assert full.noise == pytest.approx((wl(z + 0.5 * t) - wl(z)) / 0.5, rel=1e-10)
    assert full.psi == pytest.approx(-full.area + full.noise * 2 / np.sqrt(2.0))
    assert tr.sao_functional(f, z, 0.0).psi == 0.0


def test_noise_scales_with_beta():
    a = tr.sao_functional(linear_frame(beta=2.0), 0.3, 1.0)
    b = tr.sao_functional(linear_frame(beta=8.0), 0.3, 1.0)
    assert (b.psi + b.area) == pytest.approx(0.5 * (a.psi + a.area))


def test_path_respects_driver_length():
    f = linear_frame(steps=10)
    with pytest.raises(ValueError):
        f.path(0.0, 1.0)
    pts, dur = f.path(0.0, 0.055)
    assert dur.sum() == pytest.approx(0.055) and pts[-1] == pytest.approx(0.5 * 0.055)


@pytest.fixture(scope="module")
def frame():
    env = sample_environment(GridSpec(2, 2**13, 0), 2.0)
    alpha = 16.0
    delta = 2.0**-16
    driver = dyadic_brownian(0, _rng.DRIVER, 16, 1, 7, 0)
    return tr.RescaledFrame.build(alpha, driver, delta, env.W, 2.0), driver, env


def test_frame_is_the_rescaled_driver(frame):
    f, driver, env = frame
    c = 16.0 ** (2 / 3)
    assert f.du == pytest.approx(2.0**-16 * 16.0 ** (4 / 3) / 2)
    u = f.du * np.arange(50)
    assert np.array_equal(f.at(0.7, u), 0.7 - c * (driver[:50] - driver[0]))
    # environment reindexed by z = c (1 - x), ascending
    assert np.all(np.diff(f.edges) > 0)
    x = 0.8
    assert f.w_at(c * (1 - x)) == pytest.approx(16.0 ** (1 / 3) * env.W.at(x), rel=1e-9)


def test_rescaled_driver_has_diffusion_coefficient_two(frame):
    f, _, _ = frame
    assert f.quadratic_variation(8.0) == pytest.approx(2.0, rel=0.05)


def test_local_time_mass(frame):
    f, _, _ = frame
    edges, dens, lost = f.local_time(1.0, 2.0)
    assert np.sum(dens * np.diff(edges)) + lost == pytest.approx(2.0, rel=1e-12)


def test_scale_gap():
    flat = sample_environment(GridSpec(2, 2**12, 0), 2.0, zero_noise=True)
    assert tr.scale_gap(flat, 8.0, 0.0) == pytest.approx(0.0, abs=1e-12)
    # s = log x, so the gap is |c log(1 - z/c) + z|
    c = 8.0 ** (2 / 3)
    assert tr.scale_gap(flat, 8.0, 1.0) == pytest.approx(abs(c * np.log(1 - 1 / c) + 1), rel=1e-6)
    assert tr.scale_gap(flat, 64.0, 1.0) < tr.scale_gap(flat, 8.0, 1.0)


def test_driver_level_grows_with_alpha():
    cfg = tr.TransitionConfig()
    assert tr.driver_level(4, cfg) < tr.driver_level(64, cfg)
    assert 2.0 ** tr.driver_level(8, cfg) >= cfg.steps_per_unit * 8 ** (4 / 3) / 2


@pytest.fixture(scope="module")
def sweep():
    cfg = tr.TransitionConfig(z=1.5, alphas=(4, 8, 16), level=17)
    return cfg, tr.sweep_replicate(0, 3, cfg)


def test_sweep_rows(sweep):
    cfg, rows = sweep
    assert [r["alpha"] for r in rows] == [4.0, 8.0, 16.0]
    assert rows[0]["status"] == "rejected"  # |z| > log 4
    for r in rows[1:]:
        if r["status"] == "ok":
            assert r["clock_gap"] >= 0 and r["traj_gap"] >= 0
            assert r["functional_gap"] == pytest.approx(abs(r["phi_shifted"] - r["psi"]))


def test_sweep_is_deterministic(sweep):
    cfg, rows = sweep
    again = tr.sweep_replicate(0, 3, cfg)
    for a, b in zip(rows, again):
        assert a == b or all(a[k] == b[k] or (a[k] != a[k] and b[k] != b[k]) for k in a)


def test_summary_of_hand_rows():
    rows = []
    for rep, scale in ((0, 1.0), (1, 2.0)):
        for a in (4.0, 8.0, 16.0):
            g = scale / a
            rows.append(dict(alpha=a, replicate_id=rep, status="ok", traj_gap=g, scale_gap=g, clock_gap=g,
                             functional_gap=g if rep == 0 else scale * a, sup_ok=True))
    s = tr.summarize(rows, (4, 8, 16))
    assert s.slopes["traj_gap"] == pytest.approx(-1.0)
    assert s.complete == 2
    assert s.decreasing_fraction == 0.5 and s.monotone_fraction == 0.5
    assert s.as_dict()["sup_ok_fraction"] == 1.0
