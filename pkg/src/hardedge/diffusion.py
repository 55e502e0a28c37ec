"""Continuum process X by speed and scale, its functionals, and the coupled chain.

``X_t = s^{-1}(B_{T^{-1}(t)})`` where B runs on its own clock with step
``delta`` and ``dT = dv / (s' sigma)^2(s^{-1}(B_v)) = dv * x e^{-2I(x)} / 2``.

Every time integral along the path is evaluated exactly for the piecewise
linear interpolation of B: for a segment ``b0 -> b1`` of duration ``delta``,
``int f(B_v) dv = delta (F(b1) - F(b0)) / (b1 - b0)`` where F is a cumulative
table of f in scale coordinates.  The environment enters only through these
tables, so one B path serves every lattice size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .chain import ChainPath, phi_terms
from .env import Environment, ScaleTable, build_scale_table

TINY = 1e-14


class DomainExit(RuntimeError):
    """The path left the tabulated domain before the requested time."""


# ---------------------------------------------------------------------------
# cumulative scale-coordinate tables


@dataclass(frozen=True)
class PathTables:
    """Cumulative integrals against scale coordinate ``b = s(x)``.

    ``clock``: d(experiment time)/dv; ``inv_x``: -1/(4x) times the clock;
    ``noise``: the W-driven integrand of Phi^B (piecewise-linear W within each
    fine cell, which is the Stratonovich reading of the local-time integral).
    """
    table: ScaleTable
    beta: float
    clock: np.ndarray
    inv_x: np.ndarray
    noise: np.ndarray
    s_floor: float
    s_top: float

    @property
    def s(self) -> np.ndarray:
        return self.table.s


def path_tables(env: Environment, x_min: float | None = None) -> PathTables:
    n = env.n
    x_min = 1.0 / (2.0 * np.log(n)) if x_min is None else x_min
    table = build_scale_table(env, x_min)
    h = table.h
    j0 = int(round(table.x[0] / h))
    I = env.fine_I[j0:]
    dW = np.diff(env.W.values[j0:])
    d = np.diff(I)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(np.abs(d) > 1e-12, d / np.expm1(d), 1.0 - d / 2.0)
    inv_e = np.exp(-I[:-1]) * ratio  # cell mean of e^{-I} with e^I linear
    xm = table.x[:-1] + h / 2.0
    clock = np.concatenate([[0.0], np.cumsum(0.5 * h * inv_e)])
    inv_x = np.concatenate([[0.0], np.cumsum(-h * inv_e / (8.0 * xm))])
    noise = np.concatenate([[0.0], np.cumsum(-dW * inv_e / (2.0 * np.sqrt(env.beta * xm)))])
    s_top = float(np.interp(1.0, table.x, table.s))
    return PathTables(table, float(env.beta), clock, inv_x, noise, float(table.s[0]), s_top)


@nb.njit(cache=True)
def _seg_integral(s, Q, b0, b1, dt):
    if abs(b1 - b0) > TINY:
        return dt * (np.interp(b1, s, Q) - np.interp(b0, s, Q)) / (b1 - b0)
    j = np.searchsorted(s, b0)
    j = min(max(j, 1), s.size - 1)
    return dt * (Q[j] - Q[j - 1]) / (s[j] - s[j - 1])


@nb.njit(cache=True)
def _seg_integrals(s, Q, b, dt):
    out = np.empty(b.size - 1)
    for i in range(b.size - 1):
        out[i] = _seg_integral(s, Q, b[i], b[i + 1], dt)
    return out


# ---------------------------------------------------------------------------
# simulation


@dataclass
class DiffusionPath:
    x0: float
    delta: float
    b: np.ndarray  # B at v = i * delta
    T: np.ndarray  # experiment clock at each sample
    phiA: np.ndarray  # cumulative Phi^A
    phiB: np.ndarray  # cumulative Phi^B
    key: int  # bridge-refinement key
    exited: str = ""  # "", "low" or "high"
    t_max: float = 0.0

    @property
    def u_max(self) -> float:
        return (self.b.size - 1) * self.delta

    def x(self, tables: PathTables) -> np.ndarray:
        return tables.table.inverse(self.b)

    def inverse_clock(self, t) -> np.ndarray:
        """T^{-1}(t) by monotone interpolation."""
        v = np.arange(self.b.size) * self.delta
        return np.interp(t, self.T, v)

    def index_at(self, t: float) -> int:
        return int(np.searchsorted(self.T, t, side="right") - 1)

    def covers(self, t: float) -> bool:
        return self.T[-1] >= t

    def value_at(self, arr: np.ndarray, t: float) -> float:
        return float(np.interp(t, self.T, arr))

    def extremes(self, tables: PathTables, t: float):
        """(inf X, sup X) over [0, t] from the samples."""
        i = min(self.index_at(t) + 2, self.b.size)
        xs = tables.table.inverse(self.b[:i])
        return float(np.nanmin(xs)), float(np.nanmax(xs))


def _extend(tables: PathTables, full: np.ndarray, delta: float, T: float, A: float, Bn: float,
            t_max: float, ceiling: float):
    """Integrate the clock and functionals along ``full`` (first entry already counted).

    Truncates once the clock passes ``t_max`` or at the first sample outside
    ``[s_floor, ceiling]``.
    """
    dT = np.cumsum(_seg_integrals(tables.s, tables.clock, full, delta)) + T
    stop = int(np.searchsorted(dT, t_max))
    full = full[: stop + 2]
    out = (full < tables.s_floor) | (full > ceiling)
    exited = ""
    if out.any():
        j = int(np.argmax(out))
        exited = "low" if full[j] < tables.s_floor else "high"
        full = full[: j + 1]
        full[j] = min(max(full[j], tables.s_floor), tables.s[-1])
    dT = dT[: full.size - 1]
    dA = np.cumsum(_seg_integrals(tables.s, tables.inv_x, full, delta)) + A
    dB = np.cumsum(_seg_integrals(tables.s, tables.noise, full, delta)) + Bn
    return full, dT, dA, dB, exited


def simulate_X(tables: PathTables, x0: float, t_max: float, delta: float, rng: np.random.Generator,
               chunk: int = 1 << 16) -> DiffusionPath:
    """Driving motion in chunks until the experiment clock passes ``t_max``.

    The path stops at the first sample outside ``[s(x_min), s(1)]`` and records
    which side it left by.  Draws depend only on ``rng``, never on the lattice.
    """
    if not tables.table.x_min < x0 <= 1.0:
        raise ValueError(f"start {x0} outside ({tables.table.x_min}, 1]")
    key = int(rng.integers(1, 2**62))
    b0 = float(np.interp(x0, tables.table.x, tables.table.s))
    bs, Ts, As, Bs = [np.array([b0])], [np.array([0.0])], [np.array([0.0])], [np.array([0.0])]
    T = A = Bn = 0.0
    last = b0
    exited = ""
    sd = np.sqrt(delta)
    while t_max > 0:
        b = last + np.cumsum(rng.standard_normal(chunk) * sd)
        full, dT, dA, dB, exited = _extend(tables, np.concatenate([[last], b]), delta, T, A, Bn,
                                           t_max, tables.s_top)
        bs.append(full[1:]); Ts.append(dT); As.append(dA); Bs.append(dB)
        T, A, Bn, last = dT[-1], dA[-1], dB[-1], full[-1]
        if exited or T >= t_max:
            break
    return DiffusionPath(float(x0), float(delta), np.concatenate(bs), np.concatenate(Ts),
                         np.concatenate(As), np.concatenate(Bs), key, exited, float(t_max))


def drive(tables: PathTables, b: np.ndarray, delta: float, t_max: float, key: int = 0,
          allow_above: bool = False) -> DiffusionPath:
    """X for a prescribed driving path ``b`` (scale coordinates, spacing ``delta``).

    With ``allow_above`` the path may continue above x = 1 up to the top of the
    table; otherwise it stops there as in :func:`simulate_X`.
    """
    b = np.asarray(b, dtype=float)
    x0 = float(tables.table.inverse(b[0]))
    if not np.isfinite(x0):
        raise ValueError("driving path starts outside the table")
    ceiling = tables.s[-1] if allow_above else tables.s_top
    full, T, A, Bn, exited = _extend(tables, b, delta, 0.0, 0.0, 0.0, t_max, ceiling)
    cat = lambda v: np.concatenate([[0.0], v])
    return DiffusionPath(x0, float(delta), full, cat(T), cat(A), cat(Bn), int(key), exited, float(t_max))


def phi(path: DiffusionPath, a: float, t: float, field: "LocalTimeField | None" = None,
        env: Environment | None = None):
    """``(Phi, Phi^A, Phi^B)`` at time ``t``.

    By default the pathwise integrals accumulated during simulation are used.
    Passing a ``LocalTimeField`` and ``env`` evaluates Phi^B instead as the
    right-endpoint (anti-Ito) sum of binned local time against W minus the
    Ito-Stratonovich correction.
    """
    if not path.covers(t):
        raise DomainExit(f"path stopped ({path.exited or 'short'}) before t={t}")
    pa = path.value_at(path.phiA, t)
    if field is None:
        pb = path.value_at(path.phiB, t)
    else:
        pb = field.phi_b(env, t)
    return a * a * pa + a * pb, pa, pb


# ---------------------------------------------------------------------------
# local time


@nb.njit(cache=True)
def _cell_occupation(b, dt, s, Q, levels, nseg, occ):
    """Add exact experiment-clock occupation of lattice cells [levels[c], levels[c+1])."""
    L = levels.size
    for i in range(nseg):
        b0, b1 = b[i], b[i + 1]
        lo, hi = min(b0, b1), max(b0, b1)
        c0 = np.searchsorted(levels, lo, side="right") - 1
        c1 = np.searchsorted(levels, hi, side="right") - 1
        if c0 == c1:
            if 0 <= c0 < L - 1:
                occ[c0] += _seg_integral(s, Q, b0, b1, dt)
            continue
        span = hi - lo
        for c in range(max(c0, 0), min(c1, L - 2) + 1):
            u0 = max(lo, levels[c])
            u1 = min(hi, levels[c + 1])
            occ[c] += dt * (np.interp(u1, s, Q) - np.interp(u0, s, Q)) / span


@dataclass
class LocalTimeField:
    """Binned local time of B and lattice-cell occupation of X at checkpoints."""
    edges: np.ndarray  # bin edges in scale coordinates
    checkpoints: np.ndarray
    u: np.ndarray  # T^{-1}(checkpoint)
    L_B: np.ndarray  # (checkpoint, bin)
    cell_occupation: np.ndarray  # (checkpoint, k) time X spends in [x_k, x_{k+1}), k = 0..n
    tables: PathTables = field(repr=False)

    @property
    def width(self) -> float:
        return float(self.edges[1] - self.edges[0])

    def at(self, t: float) -> int:
        j = np.flatnonzero(np.isclose(self.checkpoints, t))
        if j.size == 0:
            raise KeyError(f"{t} is not a checkpoint")
        return int(j[0])

    def L_X_cells(self, t: float) -> np.ndarray:
        return self.cell_occupation[self.at(t)]

    def L_B_at(self, b, t: float) -> np.ndarray:
        """Piecewise-linear interpolation between bin centres; 0 off the range."""
        centres = 0.5 * (self.edges[1:] + self.edges[:-1])
        return np.interp(b, centres, self.L_B[self.at(t)], left=0.0, right=0.0)

    def phi_b(self, env: Environment, t: float) -> float:
        tab = self.tables.table
        h = tab.h
        j0 = int(round(tab.x[0] / h))
        j1 = int(round(1.0 / h))
        x = tab.x[: j1 - j0 + 1]
        I = env.fine_I[j0 : j1 + 1]
        dW = np.diff(env.W.values[j0 : j1 + 1])
        Z = self.L_B_at(tab.s[: x.size], t) * np.exp(-I) / (2.0 * np.sqrt(x))
        anti_ito = float(np.sum(Z[1:] * dW))
        corr_f = Z / np.sqrt(self.tables.beta * x)
        correction = float(np.trapezoid(corr_f, x))
        return -(anti_ito - correction) / np.sqrt(self.tables.beta)


def local_time(path: DiffusionPath, tables: PathTables, checkpoints, n: int, bin_width: float | None = None,
               env: Environment | None = None) -> LocalTimeField:
    """Occupation-based local times at each checkpoint (experiment clock)."""
    checkpoints = np.atleast_1d(np.asarray(checkpoints, dtype=float))
    if np.any(checkpoints > path.T[-1] + 1e-15):
        raise DomainExit("checkpoint beyond the simulated time")
    lo, hi = float(path.b.min()), float(path.b.max())
    rng_b = max(hi - lo, 1e-12)
    w = bin_width or rng_b / max(8, int(np.sqrt(n) * 4))
    nb_ = int(np.ceil((hi - lo) / w)) + 2
    edges = lo - w + w * np.arange(nb_ + 1)
    levels = np.interp(np.arange(n + 2) / n, tables.table.x, tables.table.s, left=-np.inf)
    us = path.inverse_clock(checkpoints)
    L = np.zeros((checkpoints.size, nb_))
    occ = np.zeros((checkpoints.size, n + 2))
    for c, u in enumerate(us):
        full = int(np.floor(u / path.delta + 1e-9))
        full = min(full, path.b.size - 1)
        counts, _ = np.histogram(path.b[:full], bins=edges)
        L[c] = counts * path.delta / w
        frac = u - full * path.delta
        if frac > 0 and full < path.b.size - 1:
            k = np.searchsorted(edges, path.b[full], side="right") - 1
            L[c, k] += frac / w
        _cell_occupation(path.b, path.delta, tables.s, tables.clock, levels, full, occ[c])
        if frac > 0 and full < path.b.size - 1:
            # partial last segment, linear in B
            bpart = np.array([path.b[full], path.b[full] + (path.b[full + 1] - path.b[full]) * frac / path.delta])
            _cell_occupation(bpart, frac, tables.s, tables.clock, levels, 1, occ[c])
    return LocalTimeField(edges, checkpoints, us, L, occ[:, : n + 1], tables)


def phi_tilde(field: LocalTimeField, env: Environment, a: float, t: float):
    """``(Phi~_n, Phi~^A_n, Phi~^B_n)`` from lattice-cell occupation."""
    n = env.n
    occ = field.L_X_cells(t)
    k = np.arange(1, n)
    x = k / n
    A = -np.sum(occ[k] / (4.0 * x))
    coef = np.sqrt(n) * (env.G[k + 1] + env.G[k]) / (2.0 * np.sqrt(env.beta * x)) + env.G2[k] / (env.beta * x)
    B = -np.sum(coef * occ[k])
    return a * a * A + a * B, float(A), float(B)


# ---------------------------------------------------------------------------
# coupled chain


@nb.njit(cache=True)
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@nb.njit(cache=True)
def _bridge_normal(key, g, node):
    """Standard normal keyed by (path key, coarse segment, bisection node)."""
    z = _mix(np.uint64(key) + np.uint64(g) * np.uint64(0x9E3779B97F4A7C15) + np.uint64(node) * np.uint64(0xD1B54A32D192ED03))
    w = _mix(z ^ np.uint64(0x5851F42D4C957F2D))
    u1 = ((z >> np.uint64(11)) + np.uint64(1)) * (1.0 / 9007199254740993.0)
    u2 = (w >> np.uint64(11)) * (1.0 / 9007199254740992.0)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


@nb.njit(cache=True)
def _extract(b, T, dt, key, s, Qc, sL, sAm, sAp, k0, n, max_events, dmax, dcross, eps,
             ev_v, ev_T, ev_k, ev_step):
    """Two-phase level walk on the scale coordinate.

    Phase 1 waits for exit from (s(alpha_-), s(alpha_+)); phase 2 for the next
    hit of a neighbouring lattice level.  Near-misses (Brownian-bridge crossing
    probability above ``eps``) and detected crossings are resolved by bisection
    with keyed bridge draws.  Event clock times interpolate the coarse clock.
    Returns the number of events.
    """
    k = k0
    phase = 1
    lo = sAm[k]
    hi = sAp[k]
    count = 0
    stack_ta = np.empty(dmax + 2)
    stack_ba = np.empty(dmax + 2)
    stack_tb = np.empty(dmax + 2)
    stack_bb = np.empty(dmax + 2)
    stack_d = np.empty(dmax + 2, dtype=np.int64)
    stack_node = np.empty(dmax + 2, dtype=np.int64)
    for g in range(b.size - 1):
        if count >= max_events or k > n:
            break
        top = 0
        stack_ta[0] = g * dt
        stack_ba[0] = b[g]
        stack_tb[0] = (g + 1) * dt
        stack_bb[0] = b[g + 1]
        stack_d[0] = 0
        stack_node[0] = 1
        rate = (T[g + 1] - T[g]) / dt
        while top >= 0:
            ta, ba, tb, bb = stack_ta[top], stack_ba[top], stack_tb[top], stack_bb[top]
            d, node = stack_d[top], stack_node[top]
            top -= 1
            span = tb - ta
            inside = lo < bb < hi
            refine = False
            if not inside:
                refine = d < dcross
            elif d < dmax:
                pl = np.exp(-2.0 * (ba - lo) * (bb - lo) / span) if lo > -np.inf else 0.0
                ph = np.exp(-2.0 * (hi - ba) * (hi - bb) / span)
                refine = max(pl, ph) > eps
            if refine:
                bm = 0.5 * (ba + bb) + 0.5 * np.sqrt(span) * _bridge_normal(key, g, node)
                tm = 0.5 * (ta + tb)
                top += 1
                stack_ta[top], stack_ba[top], stack_tb[top], stack_bb[top] = tm, bm, tb, bb
                stack_d[top], stack_node[top] = d + 1, 2 * node + 1
                top += 1
                stack_ta[top], stack_ba[top], stack_tb[top], stack_bb[top] = ta, ba, tm, bm
                stack_d[top], stack_node[top] = d + 1, 2 * node
                continue
            # leaf: follow the linear segment, possibly through several levels
            while count < max_events and k <= n:
                if lo < bb < hi:
                    break
                L = lo if bb <= lo else hi
                tc = ta + (tb - ta) * (L - ba) / (bb - ba)
                ta, ba = tc, L
                if phase == 1:
                    phase = 2
                    if L == hi:
                        lo, hi = sL[k], sL[k + 1]
                    else:
                        lo, hi = sL[k - 1], sL[k]
                    continue
                if L == sL[k]:
                    step = 0
                elif L == sL[k + 1]:
                    step = 1
                    k += 1
                else:
                    step = -1
                    k -= 1
                ev_v[count] = tc
                ev_T[count] = T[g] + rate * (tc - g * dt)
                ev_k[count] = k
                ev_step[count] = step
                count += 1
                phase = 1
                if k > n:
                    break
                lo, hi = sAm[k], sAp[k]
    return count


@dataclass
class StoppingRecord:
    n: int
    k0: int
    times: np.ndarray  # experiment-clock stopping times of each chain step
    v_times: np.ndarray  # the same on the B clock
    sites: np.ndarray  # chain site after each step
    steps: np.ndarray  # -1/0/+1

    @property
    def m(self) -> int:
        return self.steps.size

    def jump_times(self, m: int | None = None):
        """``(tau, tau~)``: chain-clock and diffusion-clock times of each jump."""
        m = self.m if m is None else min(m, self.m)
        idx = np.flatnonzero(self.steps[:m] != 0)
        dt = 1.0 / (4.0 * self.n * self.n)
        return (idx + 1) * dt, self.times[idx]


def lattice_levels(env: Environment, tables: PathTables):
    """Scale values of the lattice and of alpha_-, alpha_+ (index k = 0..n+1)."""
    n = env.n
    sL = np.full(n + 2, -np.inf)
    sL[1:] = np.interp(np.arange(1, n + 2) / n, tables.table.x, tables.table.s, left=-np.inf)
    k = np.arange(1, n + 1)
    sAp = np.full(n + 2, np.inf)
    sAm = np.full(n + 2, -np.inf)
    with np.errstate(invalid="ignore"):
        sAp[k] = sL[k] + (1.0 - env.r[k]) * (sL[k + 1] - sL[k])
        sAm[k] = sL[k] - (1.0 - env.r[k]) * (sL[k] - sL[k - 1])
    # sites below the table are never visited
    sAp[np.isnan(sAp)] = -np.inf
    return sL, sAm, sAp


def extract_chain(path: DiffusionPath, env: Environment, tables: PathTables, max_steps: int | None = None,
                  dmax: int = 12, dcross: int = 8, eps: float = 1e-9):
    """Stopping times and the lattice chain read off the diffusion.

    The start must be a lattice site.  Returns ``(StoppingRecord, ChainPath)``;
    the chain path carries exactly as many steps as events were found.
    """
    n = env.n
    k0 = int(round(path.x0 * n))
    if abs(k0 / n - path.x0) > 1e-12 or not 1 <= k0 <= n:
        raise ValueError("the diffusion must start at a lattice site")
    sL, sAm, sAp = lattice_levels(env, tables)
    cap = max_steps if max_steps is not None else int(8 * n * n * max(path.T[-1], 1e-3)) + 64
    ev_v = np.empty(cap)
    ev_T = np.empty(cap)
    ev_k = np.empty(cap, dtype=np.int64)
    ev_s = np.empty(cap, dtype=np.int8)
    b = path.b.copy()
    cnt = _extract(b, path.T, path.delta, path.key, tables.s, tables.clock, sL, sAm, sAp, k0, n, cap,
                   dmax, dcross, eps, ev_v, ev_T, ev_k, ev_s)
    rec = StoppingRecord(n, k0, ev_T[:cnt].copy(), ev_v[:cnt].copy(), ev_k[:cnt].copy(), ev_s[:cnt].copy())
    positions = np.concatenate([[k0], rec.sites]).astype(np.int64)
    absorbed = int(np.argmax(positions > n)) - 1 if np.any(positions > n) else -1
    chain = ChainPath(n, k0, positions, rec.steps.copy(), absorbed, {"coupled": True})
    return rec, chain


def phi_n(chain: ChainPath, env: Environment, a: float, m: int):
    """``(Phi_n, Phi^A_n, Phi^B_n)`` over the first ``m`` steps of ``chain``."""
    if chain.m < m:
        raise DomainExit(f"chain has {chain.m} steps, {m} requested")
    termA, termB = phi_terms(env)
    pre = chain.positions[:m]
    A, B = float(termA[pre].sum()), float(termB[pre].sum())
    return a * a * A + a * B, A, B


# ---------------------------------------------------------------------------
# exit from a lattice cell


def green_occupation(env: Environment, k: int):
    """Expected time in the upper and lower half-cells before exiting (x_{k-1}, x_{k+1}).

    Exact Green-function integral on the fine grid.
    """
    h = env.grid.h
    sub = env.grid.sub
    n = env.n
    j = np.arange((k - 1) * sub, (k + 1) * sub + 1)
    y = j * h
    s = env.fine_s[j]
    I = env.fine_I[j]
    sm, s0, sp = s[0], s[sub], s[-1]
    num = 2.0 * (np.minimum(s, s0) - sm) * (sp - np.maximum(s, s0))
    f = num / ((sp - sm) * 2.0 * np.exp(I))
    up = float(np.trapezoid(f[sub:], y[sub:]))
    down = float(np.trapezoid(f[: sub + 1], y[: sub + 1]))
    return up, down


def exit_formula(env: Environment, k: int):
    """Leading-order up/down half-cell times: (Delta t / x_k)(1 +/- (G_k + gamma)/sqrt(beta k))."""
    n = env.n
    dt = 1.0 / (4.0 * n * n)
    x = k / n
    c = np.sqrt(env.beta * k)
    up = dt / x * (1.0 + (env.G[k] + env.gamma[k]) / c)
    down = dt / x * (1.0 - (env.G[k] + env.gamma[k - 1]) / c)
    return float(up), float(down)


def exit_occupation(env: Environment, k: int, samples: int, rng: np.random.Generator,
                    table: PathTables | None = None, steps_per_cell: int = 400, max_steps: int = 200_000) -> dict:
    """Monte-Carlo half-cell occupation before exit, next to the exact and leading-order values.

    Exits between samples are caught with the Brownian-bridge crossing
    probability, so the discrete-monitoring bias is O(delta).
    """
    tables = table or path_tables(env, x_min=max(0.5 * (k - 1) / env.n, 1e-3))
    sL, _, _ = lattice_levels(env, tables)
    lo, mid, hi = sL[k - 1], sL[k], sL[k + 1]
    delta = ((hi - lo) / 2.0) ** 2 / steps_per_cell
    sd = np.sqrt(delta)
    b = np.full(samples, mid)
    up = np.zeros(samples)
    down = np.zeros(samples)
    live = np.ones(samples, dtype=bool)
    for _ in range(max_steps):
        idx = np.flatnonzero(live)
        if idx.size == 0:
            break
        b0 = b[idx]
        b1 = b0 + sd * rng.standard_normal(idx.size)
        u = rng.random(idx.size)
        b1c = np.clip(b1, lo, hi)
        crossed = (b1 <= lo) | (b1 >= hi)
        with np.errstate(over="ignore"):
            pb = np.exp(-2.0 * (b0 - lo) * (b1c - lo) / delta) + np.exp(-2.0 * (hi - b0) * (hi - b1c) / delta)
        crossed |= u < pb
        # linear segment to the clipped end; time split at the middle level
        cut = np.clip(b1c, lo, hi)
        frac_end = np.where(crossed & ((b1 <= lo) | (b1 >= hi)), np.abs(cut - b0) / np.maximum(np.abs(b1 - b0), TINY), 1.0)
        seg = _seg_integrals_pairs(tables.s, tables.clock, b0, cut, delta * frac_end, mid)
        up[idx] += seg[0]
        down[idx] += seg[1]
        b[idx] = cut
        live[idx[crossed]] = False
    else:
        raise RuntimeError("exit not reached within the step cap")
    g_up, g_down = green_occupation(env, k)
    f_up, f_down = exit_formula(env, k)
    return {
        "k": k, "samples": samples,
        "mc_up": float(up.mean()), "mc_down": float(down.mean()),
        "se_up": float(up.std(ddof=1) / np.sqrt(samples)), "se_down": float(down.std(ddof=1) / np.sqrt(samples)),
        "green_up": g_up, "green_down": g_down, "formula_up": f_up, "formula_down": f_down,
    }


def _seg_integrals_pairs(s, Q, b0, b1, dt, mid):
    """Clock integral of each linear segment split at ``mid`` into (above, below)."""
    lo = np.minimum(b0, b1)
    hi = np.maximum(b0, b1)
    span = hi - lo
    q = lambda v: np.interp(v, s, Q)
    total_ab = q(np.maximum(hi, mid)) - q(np.maximum(lo, mid))
    total_be = q(np.minimum(hi, mid)) - q(np.minimum(lo, mid))
    small = span < TINY
    with np.errstate(invalid="ignore", divide="ignore"):
        above = np.where(small, 0.0, dt * total_ab / span)
        below = np.where(small, 0.0, dt * total_be / span)
    if small.any():
        j = np.clip(np.searchsorted(s, b0[small]), 1, s.size - 1)
        dens = dt[small] * (Q[j] - Q[j - 1]) / (s[j] - s[j - 1])
        above[small] = np.where(b0[small] >= mid, dens, 0.0)
        below[small] = np.where(b0[small] < mid, dens, 0.0)
    return above, below


# ---------------------------------------------------------------------------
# coupled experiment


@dataclass(frozen=True)
class CoupledConfig:
    t: float = 0.03
    a: float = 1.0
    x0: float = 0.5
    delta: float = 4e-7
    cutoff_c: float = 1.0
    horizon: float = 1.25  # simulate the diffusion to horizon * t
    with_tilde: bool = False


def fit_slope(ns, values) -> float:
    """Least-squares slope of log(values) against log(ns)."""
    return float(np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(values, float)), 1)[0])


def coupled_rows(envs: dict, tables: PathTables, cfg: CoupledConfig, path_ids, seed: int = 0):
    """One row per (path, n): Phi against Phi_n (and Phi~_n), events and jump-time gaps.

    All lattice sizes share the diffusion path and the fine environment.
    """
    from . import rng as _rng

    rows = []
    ns = sorted(envs)
    for pid in path_ids:
        path = simulate_X(tables, cfg.x0, cfg.horizon * cfg.t, cfg.delta, _rng.stream(seed, _rng.DRIVER, pid))
        if not path.covers(cfg.t):
            for n in ns:
                rows.append({"n": n, "path_id": pid, "alive": False})
            continue
        ph = phi(path, cfg.a, cfg.t)
        field = local_time(path, tables, [cfg.t], max(ns)) if cfg.with_tilde else None
        for n in ns:
            env = envs[n]
            m = int(np.floor(4 * cfg.t * n * n))
            rec, chain = extract_chain(path, env, tables, max_steps=m + 1)
            row = {"n": n, "path_id": pid, "alive": True, "phi": ph[0], "phiA": ph[1], "phiB": ph[2]}
            if chain.m < m:
                row.update(alive=False)
                rows.append(row)
                continue
            t_end = max(1.01 * cfg.t, float(rec.times[m - 1]))
            lo, hi = path.extremes(tables, t_end)
            row["cutoff"] = bool(lo >= 1.0 / (cfg.cutoff_c * np.log(n)) and not path.exited)
            row["sup_ok"] = bool(hi <= 1.0)
            pn = phi_n(chain, env, cfg.a, m)
            row.update(phi_n=pn[0], phiA_n=pn[1], phiB_n=pn[2])
            if field is not None:
                fl = local_time(path, tables, [cfg.t], n)
                pt = phi_tilde(fl, env, cfg.a, cfg.t)
                row.update(phi_tilde=pt[0], phiA_tilde=pt[1], phiB_tilde=pt[2])
            tau, tau_t = rec.jump_times(m)
            row["tau_gap"] = float(np.median(np.abs(tau - tau_t) / tau)) if tau.size else float("nan")
            short = ChainPath(n, chain.k0, chain.positions[: m + 1], chain.steps[:m])
            row["max_D"] = int(short.jump_counts().D.max())
            row["jump_bound"] = cfg.t * n * np.log(n) ** 3
            rows.append(row)
    return rows


def summarize(rows, key_a: str, key_b: str, require=("cutoff", "sup_ok")):
    """Median |a - b| per n over rows meeting every flag in ``require``."""
    out = {}
    for n in sorted({r["n"] for r in rows}):
        sel = [r for r in rows if r["n"] == n and r.get("alive") and all(r.get(q) for q in require)]
        vals = [abs(r[key_a] - r[key_b]) for r in sel]
        out[n] = (float(np.median(vals)) if vals else float("nan"), len(vals))
    return out
