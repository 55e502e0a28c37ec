"""Hard-to-soft edge transition.

With ``alpha = a/2`` the diffusion started at ``1 - alpha^{-2/3} z`` and
watched for time ``alpha^{-4/3} t`` is, after the substitution
``z = alpha^{2/3}(1 - x)``, close to a Brownian motion with diffusion
coefficient sqrt(2) run in the environment ``w(z) = alpha^{1/3} W(1 - alpha^{-2/3} z)``.
Its functional, shifted by ``alpha^{2/3} t``, approaches

    Psi(t, z) = -int_0^t Bt_u du + (2/sqrt(beta)) int L_Bt(z, t) dw(z).

The local-time term is written for ``w`` oriented as above (z grows as x
falls); reflecting ``w`` flips its sign and leaves the law unchanged.

One driving motion and one environment are shared by every alpha in a sweep,
so all gaps are pathwise.  The driving motion comes from the dyadic bridge
construction, refined per alpha to a fixed number of steps per unit of the
rescaled clock, so every alpha sees the same continuous path.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numba as nb
import numpy as np

from . import rng as _rng
from .diffusion import PathTables, drive, fit_slope, path_tables, phi
from .env import BrownianPath, Environment, GridSpec, dyadic_brownian, environment_from_path

DEFAULT_ALPHAS = (4, 8, 16, 32, 64)


@nb.njit(cache=True)
def _occupation(z, dur, edges, occ):
    """Exact occupation of bins ``[edges[j], edges[j+1])`` by the linear path ``z``.

    Segment i runs from z[i] to z[i+1] in time dur[i].  Returns the time spent
    outside the edges.
    """
    lost = 0.0
    nb_ = edges.size - 1
    for i in range(z.size - 1):
        z0, z1, d = z[i], z[i + 1], dur[i]
        lo, hi = min(z0, z1), max(z0, z1)
        if hi - lo < 1e-15:
            j = np.searchsorted(edges, lo, side="right") - 1
            if 0 <= j < nb_:
                occ[j] += d
            else:
                lost += d
            continue
        rate = d / (hi - lo)
        if lo < edges[0]:
            lost += (min(hi, edges[0]) - lo) * rate
        if hi > edges[-1]:
            lost += (hi - max(lo, edges[-1])) * rate
        j = max(np.searchsorted(edges, lo, side="right") - 1, 0)
        while j < nb_ and edges[j] < hi:
            a = max(lo, edges[j])
            b = min(hi, edges[j + 1])
            if b > a:
                occ[j] += (b - a) * rate
            j += 1
    return lost


@dataclass(frozen=True)
class RescaledFrame:
    """Rescaled driving increments and environment at one alpha.

    ``increments`` holds ``-alpha^{2/3} (B(2 alpha^{-4/3} u) - B(0))`` at
    ``u = i * du``; a start ``z`` is added by the caller.  ``edges``/``w`` give
    the environment on the reindexed fine grid, ascending in z.
    """
    alpha: float
    beta: float
    du: float
    increments: np.ndarray
    edges: np.ndarray
    w: np.ndarray

    @classmethod
    def build(cls, alpha: float, driver: np.ndarray, delta: float, W: BrownianPath, beta: float) -> "RescaledFrame":
        c = alpha ** (2.0 / 3.0)
        x = np.arange(W.values.size) * W.h
        edges = (c * (1.0 - x))[::-1].copy()
        w = (alpha ** (1.0 / 3.0) * W.values)[::-1].copy()
        inc = -c * (driver - driver[0])
        return cls(float(alpha), float(beta), delta * alpha ** (4.0 / 3.0) / 2.0, inc, edges, w)

    def path(self, z: float, t: float):
        """``(Bt, durations)`` on [0, t], the last segment cut at t."""
        steps = t / self.du
        full = int(np.floor(steps))
        if full + 1 >= self.increments.size:
            raise ValueError(f"driving path covers only {self.du * (self.increments.size - 1):.4g} < t={t}")
        frac = steps - full
        pts = self.increments[: full + 1]
        dur = np.full(full, self.du)
        if frac > 1e-12:
            last = pts[-1] + frac * (self.increments[full + 1] - pts[-1])
            pts = np.append(pts, last)
            dur = np.append(dur, frac * self.du)
        return z + pts, dur

    def at(self, z: float, u) -> np.ndarray:
        return z + np.interp(u, np.arange(self.increments.size) * self.du, self.increments)

    def quadratic_variation(self, t: float) -> float:
        """Sum of squared increments over [0, t] divided by t (tends to 2)."""
        k = int(np.floor(t / self.du))
        return float(np.sum(np.diff(self.increments[: k + 1]) ** 2) / (k * self.du))

    def local_time(self, z: float, t: float, edges: np.ndarray | None = None):
        """Binned occupation density of Bt on [0, t]; returns (edges, density, time outside)."""
        edges = self.edges if edges is None else np.asarray(edges, dtype=float)
        pts, dur = self.path(z, t)
        occ = np.zeros(edges.size - 1)
        lost = _occupation(pts, dur, edges, occ)
        return edges, occ / np.diff(edges), float(lost)

    def w_at(self, z) -> np.ndarray:
        return np.interp(z, self.edges, self.w)


@dataclass(frozen=True)
class PsiValue:
    psi: float
    area: float  # int_0^t Bt
    noise: float  # int L dw
    outside: float  # occupation time beyond the tabulated environment


def sao_functional(frame: RescaledFrame, z: float, t: float, zero_noise: bool = False) -> PsiValue:
    """Psi(t, z): trapezoid area of Bt plus binned local time against w-increments."""
    if t == 0:
        return PsiValue(0.0, 0.0, 0.0, 0.0)
    pts, dur = frame.path(z, t)
    area = float(np.sum(0.5 * (pts[:-1] + pts[1:]) * dur))
    if zero_noise:
        return PsiValue(-area, area, 0.0, 0.0)
    occ = np.zeros(frame.edges.size - 1)
    lost = _occupation(pts, dur, frame.edges, occ)
    noise = float(np.sum(occ * np.diff(frame.w) / np.diff(frame.edges)))
    return PsiValue(-area + 2.0 / np.sqrt(frame.beta) * noise, area, noise, float(lost))


# ---------------------------------------------------------------------------
# experiment


@dataclass(frozen=True)
class TransitionConfig:
    z: float = 1.0
    t: float = 0.25
    beta: float = 2.0
    alphas: tuple = DEFAULT_ALPHAS
    steps_per_unit: int = 1 << 16  # driver steps per unit of the rescaled clock
    level: int = 19  # environment resolution 2^-level
    x_min: float = 0.05
    cover: float = 4.0  # initial driver horizon in units of alpha^{-4/3} t
    max_cover: float = 256.0


def shared_environment(seed: int, replicate: int, cfg: TransitionConfig) -> Environment:
    """Environment on [0, 3/2] at spacing 2^-level (lattice n = 2 only sets the domain)."""
    n = 2
    grid = GridSpec(n, 2 ** (cfg.level - 1), seed)
    W = dyadic_brownian(seed, _rng.ENVIRONMENT, cfg.level, 2, 7, replicate, horizon=1.5)
    return environment_from_path(grid, cfg.beta, BrownianPath(grid.h, W[: grid.cells + 1].copy()))


def driver_level(alpha: float, cfg: TransitionConfig) -> int:
    return int(np.ceil(np.log2(cfg.steps_per_unit * alpha ** (4.0 / 3.0) / 2.0)))


def scale_gap(env: Environment, alpha: float, z: float) -> float:
    """``|alpha^{2/3} s(1 - alpha^{-2/3} z) + z|``; s(1 - e) is close to -e."""
    c = alpha ** (2.0 / 3.0)
    y = np.arange(env.fine_s.size) * env.grid.h
    return float(abs(c * np.interp(1.0 - z / c, y[1:], env.fine_s[1:]) + z))


def sweep_replicate(seed: int, replicate: int, cfg: TransitionConfig, env: Environment | None = None,
                    tables: PathTables | None = None):
    """All alphas on one shared (B, W); one row per alpha."""
    env = env or shared_environment(seed, replicate, cfg)
    tables = tables or path_tables(env, cfg.x_min)
    rows = []
    for alpha in cfg.alphas:
        row = dict(alpha=float(alpha), z=cfg.z, t=cfg.t, replicate_id=int(replicate), status="ok",
                   traj_gap=np.nan, functional_gap=np.nan, scale_gap=np.nan, clock_gap=np.nan,
                   phi_shifted=np.nan, psi=np.nan, sup_ok=False)
        rows.append(row)
        if abs(cfg.z) > np.log(alpha):
            row["status"] = "rejected"
            continue
        c = alpha ** (2.0 / 3.0)
        u_end = cfg.t / alpha ** (4.0 / 3.0)
        level = driver_level(alpha, cfg)
        delta = 2.0 ** -level
        b0 = float(tables.table(1.0 - cfg.z / c))
        horizon = cfg.cover * u_end
        while True:  # extend the shared driving path until the clock reaches u_end
            driver = dyadic_brownian(seed, _rng.DRIVER, level, 1, 7, replicate, horizon=horizon)
            path = drive(tables, b0 + driver, delta, u_end, allow_above=True)
            if path.covers(u_end) or path.exited or horizon >= cfg.max_cover * u_end:
                break
            horizon *= 2.0
        row["scale_gap"] = scale_gap(env, alpha, cfg.z)
        if not path.covers(u_end):
            row["status"] = f"exit-{path.exited or 'short'}"
            continue
        frame = RescaledFrame.build(alpha, driver, delta, env.W, cfg.beta)
        # trajectory: samples of X against Bt at the matching rescaled time
        live = path.T <= u_end
        X = tables.table.inverse(path.b[live])
        Bt = frame.at(cfg.z, c * c * path.T[live])
        row["traj_gap"] = float(np.max(np.abs(c * (1.0 - X) - Bt)))
        row["sup_ok"] = bool(np.nanmax(X) <= 1.0)
        row["clock_gap"] = float(abs(alpha ** (4.0 / 3.0) * path.inverse_clock(u_end) - 2.0 * cfg.t))
        full, _, _ = phi(path, 2.0 * alpha, u_end)
        shifted = full + c * cfg.t
        psi = sao_functional(frame, cfg.z, cfg.t)
        row["phi_shifted"] = float(shifted)
        row["psi"] = psi.psi
        row["functional_gap"] = float(abs(shifted - psi.psi))
        if psi.outside > 0:
            row["status"] = "outside-w"
    return rows


GAPS = ("traj_gap", "scale_gap", "clock_gap", "functional_gap")


@dataclass(frozen=True)
class TransitionSummary:
    alphas: tuple
    medians: dict  # gap -> list of medians per alpha
    slopes: dict  # gap -> fitted log-log slope of the medians
    complete: int  # replicates with every alpha usable
    decreasing_fraction: float  # functional gap: fraction of complete replicates with negative fitted slope
    monotone_fraction: float  # functional gap strictly decreasing along the whole grid
    sup_ok_fraction: float

    def as_dict(self) -> dict:
        return asdict(self)


def summarize(rows, alphas=DEFAULT_ALPHAS) -> TransitionSummary:
    alphas = tuple(float(a) for a in alphas)
    ok = [r for r in rows if r["status"] == "ok"]
    medians, slopes = {}, {}
    for g in GAPS:
        med = []
        for a in alphas:
            vals = [r[g] for r in ok if r["alpha"] == a]
            med.append(float(np.median(vals)) if vals else float("nan"))
        medians[g] = med
        slopes[g] = fit_slope(alphas, med) if np.all(np.isfinite(med)) else float("nan")
    by_rep = {}
    for r in rows:
        by_rep.setdefault(r["replicate_id"], {})[r["alpha"]] = r
    neg = mono = complete = 0
    for reps in by_rep.values():
        if not all(a in reps and reps[a]["status"] == "ok" for a in alphas):
            continue
        complete += 1
        g = np.array([reps[a]["functional_gap"] for a in alphas])
        neg += fit_slope(alphas, g) < 0
        mono += bool(np.all(np.diff(g) < 0))
    frac = lambda k: k / complete if complete else float("nan")
    sup = float(np.mean([r["sup_ok"] for r in ok])) if ok else float("nan")
    return TransitionSummary(alphas, medians, slopes, complete, frac(neg), frac(mono), sup)


def transition_experiment(cfg: TransitionConfig, replicates: int, seed: int = 0):
    """Rows for every (replicate, alpha) and the slope summary."""
    rows = []
    for rep in range(replicates):
        rows.extend(sweep_replicate(seed, rep, cfg))
    return rows, summarize(rows, cfg.alphas)
