"""Discrete lattice process X^n driven by its transition probabilities.

Sites are integers ``k`` with ``x_k = k/n``.  From site ``k`` the chain stays
with probability ``r_k``, steps up with ``(1-r_k) p_k`` and down with
``(1-r_k) q_k``.  Stepping above ``k = n`` (or to ``k = 0``) kills the path:
the position freezes and the relevant event flag is cleared.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba as nb
import numpy as np

from . import rng as _rng
from .env import Environment

DOWN, STAY, UP = -1, 0, 1


@dataclass(frozen=True)
class StepLaw:
    """Cumulative thresholds per site: u < stay -> stay, u < stay+up -> up."""
    n: int
    stay: np.ndarray
    stay_up: np.ndarray

    @classmethod
    def from_env(cls, env: Environment) -> "StepLaw":
        n = env.n
        stay = np.zeros(n + 2)
        up = np.zeros(n + 2)
        k = np.arange(1, n + 1)
        stay[k] = env.r[k]
        up[k] = (1.0 - env.r[k]) * env.p[k]
        return cls(n, stay, stay + up)

    def probabilities(self, k: int):
        s, su = self.stay[k], self.stay_up[k]
        return s, su - s, 1.0 - su


@nb.njit(cache=True)
def _walk(k0, u, stay, stay_up, n, positions, steps):
    """Fill positions/steps; return the step index of absorption or -1."""
    k = k0
    positions[0] = k
    absorbed = -1
    for i in range(u.size):
        if absorbed >= 0:
            steps[i] = 0
            positions[i + 1] = k
            continue
        ui = u[i]
        if ui < stay[k]:
            d = 0
        elif ui < stay_up[k]:
            d = 1
        else:
            d = -1
        k += d
        steps[i] = d
        positions[i + 1] = k
        if k > n or k < 1:
            absorbed = i
    return absorbed


def step(k: int, env: Environment, rng: np.random.Generator, law: StepLaw | None = None) -> int:
    """One transition from site ``k``; returns -1, 0 or +1."""
    if not 1 <= k <= env.n:
        raise ValueError(f"site {k} is outside the lattice 1..{env.n}")
    law = law or StepLaw.from_env(env)
    u = rng.random()
    if u < law.stay[k]:
        return STAY
    if u < law.stay_up[k]:
        return UP
    return DOWN


@dataclass
class JumpCounts:
    U: np.ndarray  # up-jumps from each site, index k = 0..n+1
    D: np.ndarray  # down-jumps from each site

    @property
    def J(self) -> np.ndarray:
        return self.U + self.D

    def crossing_correction(self, start: int, end: int) -> np.ndarray:
        """Expected value of U_k - D_{k+1} from the start/end positions."""
        k = np.arange(self.U.size)
        return np.where((start <= k) & (k < end), 1, 0) - np.where((start > k) & (k >= end), 1, 0)


@dataclass
class FunctionalAccumulator:
    """Running a-free pieces of Phi_n: Phi_n = a^2 phiA + a phiB."""
    phiA: float = 0.0
    phiB: float = 0.0
    steps: int = 0

    def phi(self, a: float) -> float:
        return a * a * self.phiA + a * self.phiB

    def __add__(self, other: "FunctionalAccumulator") -> "FunctionalAccumulator":
        return FunctionalAccumulator(self.phiA + other.phiA, self.phiB + other.phiB, self.steps + other.steps)


@dataclass
class ChainPath:
    n: int
    k0: int
    positions: np.ndarray  # sites, length m+1
    steps: np.ndarray  # -1/0/+1, length m
    absorbed_at: int = -1
    extra: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.steps.size

    @property
    def event_E(self) -> bool:
        """sup X^n <= 1."""
        return bool(self.positions.max() <= self.n)

    def event_cutoff(self, c: float = 1.0) -> bool:
        """inf X^n >= 1/(c log n)."""
        return bool(self.positions.min() / self.n >= 1.0 / (c * np.log(self.n)))

    def occupation(self) -> np.ndarray:
        """Time steps spent at each site (pre-step positions)."""
        live = self._live_steps()
        return np.bincount(self.positions[:live], minlength=self.n + 2)

    def _live_steps(self) -> int:
        return self.m if self.absorbed_at < 0 else self.absorbed_at + 1

    def jump_counts(self) -> JumpCounts:
        live = self._live_steps()
        pre = self.positions[:live]
        st = self.steps[:live]
        U = np.bincount(pre[st == UP], minlength=self.n + 2)
        D = np.bincount(pre[st == DOWN], minlength=self.n + 2)
        return JumpCounts(U=U[: self.n + 2], D=D[: self.n + 2])

    def times(self) -> np.ndarray:
        """Lattice clock t_i = i/(4n^2)."""
        return np.arange(self.m + 1) / (4.0 * self.n * self.n)


def phi_terms(env: Environment):
    """Per-site summands of Phi_n^A and Phi_n^B (index k = 0..n+1; NaN off-lattice)."""
    n, b = env.n, env.beta
    k = np.arange(n + 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = k / n
        termA = -1.0 / (4.0 * n * n) / (4.0 * x)
        termB = -1.0 / (4.0 * n * n) * (np.sqrt(n) * env.G / np.sqrt(b * x) + env.G2 / (b * x))
    return termA, termB


def accumulate(env: Environment, path: ChainPath, terms=None) -> FunctionalAccumulator:
    termA, termB = terms or phi_terms(env)
    live = path._live_steps()
    pre = path.positions[:live]
    return FunctionalAccumulator(float(termA[pre].sum()), float(termB[pre].sum()), int(pre.size))


def simulate(env: Environment, k0: int, m: int, rng: np.random.Generator, law: StepLaw | None = None):
    """Run ``m`` steps from site ``k0``.

    Returns ``(ChainPath, JumpCounts, FunctionalAccumulator)``.  The functional
    sums the site terms at the pre-step position of every step taken before
    the path is killed.
    """
    if m < 1:
        raise ValueError("step count must be at least 1")
    if not 1 <= k0 <= env.n:
        raise ValueError(f"start site {k0} outside 1..{env.n}")
    law = law or StepLaw.from_env(env)
    u = rng.random(m)
    positions = np.empty(m + 1, dtype=np.int64)
    steps = np.empty(m, dtype=np.int8)
    absorbed = _walk(k0, u, law.stay, law.stay_up, env.n, positions, steps)
    path = ChainPath(env.n, k0, positions, steps, int(absorbed))
    return path, path.jump_counts(), accumulate(env, path)


def resume(env: Environment, path: ChainPath, m: int, rng: np.random.Generator, law: StepLaw | None = None):
    """Continue ``path`` for ``m`` more steps; returns the concatenated result."""
    if path.absorbed_at >= 0:
        tail = ChainPath(env.n, int(path.positions[-1]), np.full(m + 1, path.positions[-1]),
                         np.zeros(m, dtype=np.int8), 0)
        rng.random(m)
    else:
        tail, _, _ = simulate(env, int(path.positions[-1]), m, rng, law)
    absorbed = path.absorbed_at
    if absorbed < 0 and tail.absorbed_at >= 0:
        absorbed = path.m + tail.absorbed_at
    joined = ChainPath(env.n, path.k0, np.concatenate([path.positions, tail.positions[1:]]),
                       np.concatenate([path.steps, tail.steps]), absorbed)
    return joined, joined.jump_counts(), accumulate(env, joined)


def path_stream(seed: int, path_id: int) -> np.random.Generator:
    return _rng.stream(seed, _rng.CHAIN, path_id)


# ---------------------------------------------------------------------------
# batch kernels


@nb.njit(cache=True)
def batch_walk(k0, U, stay, stay_up, n, logw, termA, termB, v):
    """Many paths at once.

    ``logw`` has shape (n+2, 3) with columns (down, stay, up).  Returns per-path
    final site, exact-H log weight, Phi_A and Phi_B sums, minimum site and an
    alive flag (never left 1..n).
    """
    P, m = U.shape
    final = np.empty(P, dtype=np.int64)
    lw = np.zeros(P)
    pa = np.zeros(P)
    pb = np.zeros(P)
    kmin = np.empty(P, dtype=np.int64)
    alive = np.ones(P, dtype=np.bool_)
    for p in range(P):
        k = k0
        lo = k0
        for i in range(m):
            ui = U[p, i]
            pa[p] += termA[k]
            pb[p] += termB[k]
            if ui < stay[k]:
                lw[p] += logw[k, 1]
            elif ui < stay_up[k]:
                lw[p] += logw[k, 2]
                k += 1
            else:
                lw[p] += logw[k, 0]
                k -= 1
            if k > n or k < 1:
                alive[p] = False
                break
            if k < lo:
                lo = k
        final[p] = k
        kmin[p] = lo
    return final, lw, pa, pb, kmin, alive


@nb.njit(cache=True)
def holding_times(u, stay_k):
    """Number of consecutive steps spent at a site per visit (stays + 1)."""
    out = np.empty(u.shape[0], dtype=np.int64)
    for s in range(u.shape[0]):
        c = 1
        for i in range(u.shape[1]):
            if u[s, i] < stay_k:
                c += 1
            else:
                break
        out[s] = c
    return out


@dataclass
class WaitTimeStats:
    k: int
    samples: int
    mean: float  # in units of the lattice clock
    var: float
    expected_mean: float
    stderr: float
    z: float
    diffusion: dict | None = None


def wait_time_check(env: Environment, k: int, samples: int, rng: np.random.Generator,
                    diffusion_samples: int = 0, table=None) -> WaitTimeStats:
    """Per-visit holding time at site ``k`` against its geometric law.

    With ``diffusion_samples > 0`` the coupled diffusion is also run from
    ``x_k`` and its occupation of the upper and lower half-cells before
    exiting ``(x_{k-1}, x_{k+1})`` is compared with the exit-time formulas.
    """
    n = env.n
    dt = 1.0 / (4.0 * n * n)
    x = k / n
    stay_k = float(env.r[k])
    cap = int(np.ceil(60.0 / max(1e-12, 1.0 - stay_k))) + 10
    h = holding_times(rng.random((samples, cap)), stay_k) * dt
    mean, var = float(h.mean()), float(h.var(ddof=1))
    expected = 2.0 * dt / x
    se = float(np.sqrt(var / samples))
    out = WaitTimeStats(k, samples, mean, var, expected, se, (mean - expected) / se)
    if diffusion_samples:
        from .diffusion import exit_occupation
        out.diffusion = exit_occupation(env, k, diffusion_samples, rng, table=table)
    return out
