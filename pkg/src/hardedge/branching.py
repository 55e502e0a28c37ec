"""Branching structure of the jump counts.

Stay steps change neither jump counts nor visits, so everything here runs on
the embedded jump chain (up with probability p_k, down with q_k).
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np
from scipy import stats

from .env import Environment


class DomainError(ValueError):
    """Generating function evaluated outside its convergence domain."""


@nb.njit(cache=True)
def _seed(s):
    np.random.seed(s)


@nb.njit(cache=True)
def _to_visit(k0, target, visits, p, n, cap, D):
    """Jump chain from k0 until the ``visits``-th visit to ``target``.

    The start counts as a visit when k0 == target.  Returns the number of jumps
    taken, -1 if the step cap was hit, -2 if the path stepped above n.
    """
    k = k0
    seen = 1 if k0 == target else 0
    jumps = 0
    while seen < visits:
        if jumps >= cap:
            return -1
        if np.random.random() < p[k]:
            k += 1
        else:
            D[k] += 1
            k -= 1
        jumps += 1
        if k > n:
            return -2
        if k == target:
            seen += 1
    return jumps


@nb.njit(cache=True)
def _collect(k0, target, visits, p, n, cap, paths, out):
    dropped = 0
    row = 0
    D = np.zeros(n + 2, dtype=np.int64)
    for _ in range(paths):
        D[:] = 0
        r = _to_visit(k0, target, visits, p, n, cap, D)
        if r < 0:
            dropped += 1
            continue
        out[row, :] = D
        row += 1
    return row, dropped


@dataclass
class BranchObservation:
    """Down-jump counts D_k (k = 0..n+1) at the stopping time T_{i,k'}."""
    k0: int
    target: int
    visits: int
    D: np.ndarray  # (samples, n+2)
    dropped: int

    def d_bits(self) -> np.ndarray:
        """1 where x_k lies weakly between the start and x_{k'}."""
        k = np.arange(self.D.shape[1])
        lo, hi = min(self.k0, self.target), max(self.k0, self.target)
        return ((k >= lo) & (k <= hi)).astype(np.int64)

    def __len__(self) -> int:
        return self.D.shape[0]


def collect(env: Environment, k0: int, target: int, visits: int, paths: int, seed: int = 0,
            cap: int = 10**7) -> BranchObservation:
    n = env.n
    if not 1 <= target <= n - 1:
        raise ValueError(f"target site must lie in 1..{n - 1}")
    if not 1 <= k0 <= n:
        raise ValueError(f"start site must lie in 1..{n}")
    if visits < 1:
        raise ValueError("visit index starts at 1")
    p = np.nan_to_num(env.p, nan=1.0)
    _seed(int(np.random.SeedSequence([seed, 5, k0, target, visits]).generate_state(1)[0]))
    out = np.zeros((paths, n + 2), dtype=np.int64)
    rows, dropped = _collect(k0, target, visits, p, n, cap, paths, out)
    return BranchObservation(k0, target, visits, out[:rows], int(dropped))


# ---------------------------------------------------------------------------
# generating functions


def window_sums(env: Environment, k: int, target: int):
    """``(Delta S, S)`` with ratios q_j/p_j over j = k..target-1."""
    if not k < target:
        raise ValueError("window needs k < k'")
    rho = env.q[k:target] / env.p[k:target]
    prods = np.cumprod(rho)
    return float(prods[-1]), float(prods.sum())


def mgf_formula(env: Environment, k: int, target: int, D, lam: float):
    """Conditional MGF of D_k given D_{k'} = D."""
    dS, S = window_sums(env, k, target)
    e = np.expm1(lam)
    if e * S >= 1.0:
        raise DomainError(f"(e^lambda - 1) S = {e * S:.3g} is outside the convergence domain")
    base = 1.0 + e * dS / (1.0 - e * S)
    return np.power(base, np.asarray(D, dtype=float))


def conditional_law(env: Environment, k: int, D: int, d: int = 0):
    """Law of D_k given D_{k+1} = D: a sum of D + d iid (Geom[p_k] - 1), i.e. negative binomial."""
    return stats.nbinom(D + d, env.p[k])


@dataclass(frozen=True)
class ChiSquareResult:
    k: int
    D: int
    samples: int
    statistic: float
    dof: int
    p_value: float


def chi_square_cell(obs: BranchObservation, env: Environment, k: int, D: int, min_expected: float = 5.0) -> ChiSquareResult:
    """Test D_k | D_{k+1} = D against its negative-binomial law."""
    if not k < obs.target:
        raise ValueError("cells must lie below the target site")
    sel = obs.D[:, k + 1] == D
    vals = obs.D[sel, k]
    d = int(obs.d_bits()[k])
    law = conditional_law(env, k, D, d)
    N = vals.size
    if N == 0:
        raise ValueError(f"no samples with D_{k + 1} = {D}")
    if D + d == 0:  # point mass at zero
        ok = not vals.any()
        return ChiSquareResult(k, D, int(N), 0.0 if ok else float("inf"), 0, 1.0 if ok else 0.0)
    # bins 0..K-1 then a tail bin, K chosen so each bin expects >= min_expected
    K = 0
    while law.pmf(K) * N >= min_expected and law.sf(K) * N >= min_expected:
        K += 1
    K = max(K, 1)
    counts = np.bincount(np.minimum(vals, K), minlength=K + 1).astype(float)
    expected = np.concatenate([law.pmf(np.arange(K)), [law.sf(K - 1)]]) * N
    stat, pv = stats.chisquare(counts, expected)
    return ChiSquareResult(k, D, int(N), float(stat), K, float(pv))


@dataclass(frozen=True)
class MgfResult:
    k: int
    target: int
    lam: float
    samples: int
    empirical: float  # mean of exp(lam D_k) / formula(D_{k'})
    stderr: float
    z: float


def mgf_check(obs: BranchObservation, env: Environment, k: int, lam: float, seed: int = 0,
              resamples: int = 1000) -> MgfResult:
    """Ratio exp(lam D_k) / E[exp(lam D_k) | D_{k'}] averages to 1; bootstrap standard error."""
    if obs.d_bits()[k:obs.target].any():
        raise ValueError("MGF formula assumes the start lies at or above x_{k'}")
    y = np.exp(lam * obs.D[:, k]) / mgf_formula(env, k, obs.target, obs.D[:, obs.target], lam)
    g = np.random.default_rng(np.random.SeedSequence([seed, k, obs.target]))
    idx = g.integers(0, y.size, size=(resamples, y.size))
    se = float(y[idx].mean(axis=1).std(ddof=1))
    m = float(y.mean())
    return MgfResult(k, obs.target, lam, int(y.size), m, se, (m - 1.0) / se)


# ---------------------------------------------------------------------------
# lower tail over long windows


@nb.njit(cache=True)
def _excursions(target, k, D, p, samples, out):
    """D_k after D independent excursions below ``target`` (each starts at target-1)."""
    for s in range(samples):
        c = 0
        for _ in range(D):
            j = target - 1
            while j < target:
                if np.random.random() < p[j]:
                    j += 1
                else:
                    if j == k:
                        c += 1
                    j -= 1
        out[s] = c


@dataclass(frozen=True)
class TailRow:
    k: int
    target: int
    delta_S: float
    S: float
    qualifies: bool
    D: int
    samples: int
    frequency: float
    bound: float


def find_windows(env: Environment, min_len: int = 20, max_len: int | None = None, count: int = 4):
    """Windows (k, k') with k >= n/log n, |Delta S - 1| <= 0.01 and S >= 100."""
    n = env.n
    max_len = max_len or n // 2
    lo = int(np.ceil(n / np.log(n)))
    rho = np.nan_to_num(env.q / env.p, nan=1.0)
    found = []
    for k in range(lo, n - min_len):
        prods = np.cumprod(rho[k : min(n, k + max_len)])
        sums = np.cumsum(prods)
        ok = np.flatnonzero((np.abs(prods - 1.0) <= 0.01) & (sums >= 100.0))
        ok = ok[ok + 1 >= min_len]
        if ok.size:
            found.append((k, k + int(ok[0]) + 1))
            if len(found) >= count:
                break
    return found


def tail_check(env: Environment, windows, D: int = 400, samples: int = 400, seed: int = 0):
    """Empirical P(D_k < D_{k'}/2 | D_{k'} = D) against exp(-0.05 D / S) on qualifying windows."""
    n = env.n
    p = np.nan_to_num(env.p, nan=1.0)
    rows = []
    for (k, target) in windows:
        dS, S = window_sums(env, k, target)
        ok = bool(k >= n / np.log(n) and 0.99 <= dS <= 1.01 and S >= 100)
        if not ok:
            rows.append(TailRow(k, target, dS, S, False, D, 0, float("nan"), float("nan")))
            continue
        _seed(int(np.random.SeedSequence([seed, 6, k, target]).generate_state(1)[0]))
        out = np.empty(samples, dtype=np.int64)
        _excursions(target, k, D, p, samples, out)
        freq = float(np.mean(out < D / 2))
        rows.append(TailRow(k, target, dS, S, True, D, samples, freq, float(np.exp(-0.05 * D / S))))
    return rows


# ---------------------------------------------------------------------------
# jump-count bound along chain paths


@nb.njit(cache=True)
def _max_down(k0, U, stay, stay_up, n, out_max, out_min):
    P, m = U.shape
    D = np.zeros(n + 2, dtype=np.int64)
    for s in range(P):
        D[:] = 0
        k = k0
        lo = k0
        for i in range(m):
            u = U[s, i]
            if u < stay[k]:
                continue
            if u < stay_up[k]:
                k += 1
            else:
                D[k] += 1
                k -= 1
            if k > n:
                lo = -1
                break
            if k < lo:
                lo = k
        out_max[s] = D.max()
        out_min[s] = lo


@dataclass(frozen=True)
class JumpBoundResult:
    n: int
    t: float
    threshold: float
    paths: int
    surviving: int
    frequency: float


def jump_count_frequency(env: Environment, t: float, k0: int, paths: int, seed: int = 0, cutoff_c: float = 1.0):
    """Frequency of max_k D_k >= t n (log n)^3 among paths staying in [1/(c log n), 1]."""
    from . import rng as _rng
    from .chain import StepLaw

    n = env.n
    m = int(4 * t * n * n)
    law = StepLaw.from_env(env)
    U = np.empty((paths, m))
    for i in range(paths):
        U[i] = _rng.stream(seed, _rng.CHAIN, 10**6 + i).random(m)
    mx = np.empty(paths, dtype=np.int64)
    mn = np.empty(paths, dtype=np.int64)
    _max_down(k0, U, law.stay, law.stay_up, n, mx, mn)
    keep = mn / n >= 1.0 / (cutoff_c * np.log(n))
    thr = t * n * np.log(n) ** 3
    freq = float(np.mean(mx[keep] >= thr)) if keep.any() else float("nan")
    return JumpBoundResult(n, t, float(thr), paths, int(keep.sum()), freq)
