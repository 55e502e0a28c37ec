"""The ten acceptance checks, shared by the test suite and ``hardedge check``.

Each check returns a :class:`Criterion` holding a pass flag, the measured
numbers and its wall time.  Configurations are fixed here so every run of a
check sees the same randomness.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import branching as br
from . import diffusion as dif
from . import fk
from . import rng as _rng
from . import transition as tr
from .env import GridSpec, exact_logit, local_statistics, logit_expansion, sample_environment
from .matrix import build_model, limiting_kernel, smallest_eigs

BETA = 2.0


@dataclass
class Criterion:
    number: int
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} [{self.number}] {self.name} ({self.seconds:.1f}s)"


def _timed(number: int, name: str):
    def wrap(fn):
        def run(*args, **kw):
            t0 = time.perf_counter()
            passed, details = fn(*args, **kw)
            return Criterion(number, name, bool(passed), details, time.perf_counter() - t0)
        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        return run
    return wrap


@_timed(1, "exact Feynman-Kac identity by path enumeration")
def exact_fk(seed: int = 0):
    worst = 0.0
    rows = []
    for n in (4, 6, 8):
        env = sample_environment(GridSpec(n, 64, seed), BETA)
        for m in (3, 6, 10):
            v = _rng.stream(seed, _rng.AUX, 1, n, m).uniform(0.1, 1.0, n)
            for k in range(1, n + 1):
                inst = fk.FkInstance.make(env, 1.0, k, m, v)
                ps, mv = fk.path_sum(inst), inst.matrix_value()
                err = abs(ps - mv) / abs(mv)
                worst = max(worst, err)
                rows.append((n, m, k, err))
    return worst <= 1e-12, {"max_rel_err": worst, "cases": len(rows)}


@_timed(2, "Monte-Carlo Feynman-Kac, exact exponents")
def mc_fk(seed: int = 0, paths: int = 100_000, vectors: int = 5):
    n, m = 16, 200
    env = sample_environment(GridSpec(n, 64, seed), BETA)
    zs = []
    for i in range(vectors):
        v = _rng.stream(seed, _rng.AUX, 2, i).uniform(0.1, 1.0, n)
        rep = fk.verify(fk.FkInstance.make(env, 1.0, n // 2, m, v), paths, seed=seed * 100 + i)
        zs.append(rep.z_score)
    return all(abs(z) <= 3 for z in zs), {"z_scores": zs}


@_timed(3, "residual between exact and position-only exponents shrinks with n")
def residual_trend(seed: int = 0, paths: int = 2000, t: float = 0.25):
    meds, ratios = [], []
    for n in (32, 64, 128):
        env = sample_environment(GridSpec(n, 2**19 // n, seed), BETA)
        res = fk.residual(env, 1.0, n // 2, int(4 * t * n * n), paths, seed=seed)
        meds.append(res.median_abs_R)
        ratios.append(res.log_ratio)
    return bool(np.all(np.diff(meds) < 0)), {"median_abs_R": meds, "log_ratio": ratios}


@_timed(4, "environment variances")
def environment_analytics(seed: int = 0, samples: int = 100_000):
    G, G2, gamma = local_statistics(samples, _rng.stream(seed, _rng.AUX, 4))
    vG, vg = float(G.var(ddof=1)), float(gamma.var(ddof=1))
    z2 = float(G2.mean() / (G2.std(ddof=1) / np.sqrt(samples)))
    ok = abs(vG / (2 / 3) - 1) <= 0.05 and abs(vg / (8 / 15) - 1) <= 0.05 and abs(z2) <= 4
    return ok, {"var_G": vG, "var_gamma": vg, "mean_G2_z": z2}


@_timed(5, "logit expansion")
def logit_expansion_check(seeds=range(4)):
    ns = (64, 128, 256)
    worst = 0.0
    for n in ns:
        env = sample_environment(GridSpec(n, 2**19 // n, 0), BETA, zero_noise=True)
        k = np.arange(2, n + 1)
        worst = max(worst, float(np.max(np.abs(exact_logit(env, k) - 1.0 / k) * k**2)))
    meds = []
    for n in ns:
        vals = []
        for s in seeds:
            env = sample_environment(GridSpec(n, 2**19 // n, s), BETA)
            k = np.arange(2, n + 1)
            r = exact_logit(env, k) - np.array([logit_expansion(env, int(j)) for j in k])
            vals.append(np.abs(r) * k**1.5 / np.sqrt(np.log(k)))
        meds.append(float(np.median(np.concatenate(vals))))
    spread = max(meds) / min(meds)
    return worst <= 2.0 and spread <= 1.5, {"zero_noise_max_k2_err": worst, "scaled_medians": meds,
                                            "median_spread": spread}


@_timed(6, "hard edge: smallest eigenvalue against the limiting kernel")
def hard_edge(seed: int = 0, a: float = 1.0, ref_grid: int = 32768):
    big = sample_environment(GridSpec(512, 256, seed), BETA)
    ref = float(limiting_kernel(big, a, ref_grid)[0])
    gaps = []
    for n in (64, 128, 256, 512):
        env = sample_environment(GridSpec(n, 2**17 // n, seed), BETA)
        model, _ = build_model(env, a)
        lam = float(smallest_eigs(model, 1).values[0])
        gaps.append(abs(lam - ref) / ref)
    return bool(np.all(np.diff(gaps) < 0) and gaps[-1] <= 0.1), {"reference": ref, "rel_gaps": gaps}


@lru_cache(maxsize=2)
def _coupled(seed: int, paths: int):
    ns = (32, 64, 128)
    envs = {n: sample_environment(GridSpec(n, 2**19 // n, seed), BETA) for n in ns}
    tables = dif.path_tables(envs[128], x_min=1.0 / (2.0 * np.log(32)))
    return ns, dif.coupled_rows(envs, tables, dif.CoupledConfig(), range(paths), seed=seed)


@_timed(7, "functional convergence rates")
def functional_rates(seed: int = 0, paths: int = 200):
    ns, rows = _coupled(seed, paths)
    full = dif.summarize(rows, "phi", "phi_n")
    part = dif.summarize(rows, "phiA", "phiA_n")
    s_full = dif.fit_slope(ns, [full[n][0] for n in ns])
    s_part = dif.fit_slope(ns, [part[n][0] for n in ns])
    return s_full <= -0.2 and s_part <= -0.8, {"slope_phi": s_full, "slope_phiA": s_part,
                                               "median_phi_gap": full, "median_phiA_gap": part}


@_timed(8, "branching laws")
def branching_laws(seed: int = 0, cell_samples: int = 10_000):
    env = sample_environment(GridSpec(64, 64, seed), BETA)
    obs = br.collect(env, 48, 48, 3, 200_000, seed=seed)
    # cells below the target with enough conditional samples, D + d > 0
    eligible = []
    for k in range(30, 48):
        counts = np.bincount(obs.D[:, k + 1])
        eligible += [(k, D) for D in range(1, counts.size) if counts[D] >= cell_samples]
    pick = _rng.stream(seed, _rng.AUX, 8).choice(len(eligible), size=5, replace=False)
    chi = []
    for i in sorted(pick):
        k, D = eligible[i]
        sel = np.flatnonzero(obs.D[:, k + 1] == D)[:cell_samples]
        sub = br.BranchObservation(obs.k0, obs.target, obs.visits, obs.D[sel], 0)
        chi.append(br.chi_square_cell(sub, env, k, D))
    mgf = [br.mgf_check(obs, env, k, lam, seed=seed) for lam in (0.1, -0.1) for k in (47, 44)]
    big = sample_environment(GridSpec(1024, 4, seed), BETA)
    tails = br.tail_check(big, br.find_windows(big, min_len=60), D=400, samples=400, seed=seed)
    tails = [row for row in tails if row.qualifies]
    ok = (all(c.p_value > 0.001 for c in chi) and all(abs(r.z) <= 4 for r in mgf)
          and len(tails) > 0 and all(row.frequency <= row.bound for row in tails))
    return ok, {"chi_square": [(c.k, c.D, c.samples, c.p_value) for c in chi],
                "mgf_z": [(r.k, r.lam, r.z) for r in mgf],
                "tails": [(row.k, row.target, row.frequency, row.bound) for row in tails]}


@_timed(9, "jump-time coupling")
def jump_times(seed: int = 0, paths: int = 200):
    ns, rows = _coupled(seed, paths)
    meds = []
    for n in ns:
        vals = [r["tau_gap"] for r in rows if r["n"] == n and r.get("alive") and r.get("cutoff")
                and r["max_D"] <= r["jump_bound"]]
        meds.append(float(np.median(vals)))
    return bool(np.all(np.diff(meds) < 0)), {"median_tau_gap": meds}


@_timed(10, "edge transition")
def edge_transition(seed: int = 0, replicates: int = 50):
    _, summary = tr.transition_experiment(tr.TransitionConfig(), replicates, seed)
    slopes = summary.slopes
    ok = (all(slopes[g] <= -0.2 for g in ("traj_gap", "scale_gap", "clock_gap"))
          and summary.decreasing_fraction >= 0.8)
    return ok, {"slopes": slopes, "decreasing_fraction": summary.decreasing_fraction,
                "complete_replicates": summary.complete}


ALL = (exact_fk, mc_fk, residual_trend, environment_analytics, logit_expansion_check, hard_edge,
       functional_rates, branching_laws, jump_times, edge_transition)
