"""Random environment W and everything derived from it at lattice size n.

The environment is a Brownian path on ``[0, 1 + 1/n]`` sampled on the fine
grid ``h = 1/(n*sub)``.  One extra lattice cell beyond 1 is kept so that row
``k = n`` of the matrix model (which needs ``s_{n+1}``) is defined.

Lattice arrays are indexed by ``k`` directly (length ``n + 2``); entries that
are not defined for a given ``k`` hold NaN.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng as _rng

_MAGIC = b"HEENV001"


class QuadratureError(RuntimeError):
    """Raised when a tabulated scale function fails to be monotone."""


@dataclass(frozen=True)
class GridSpec:
    n: int
    sub: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"lattice size must be at least 2, got n={self.n}")
        if self.sub < 1:
            raise ValueError(f"sub-steps per cell must be positive, got sub={self.sub}")

    @property
    def h(self) -> float:
        return 1.0 / (self.n * self.sub)

    @property
    def cells(self) -> int:
        """Fine cells covering [0, 1 + 1/n]."""
        return (self.n + 1) * self.sub


@dataclass(frozen=True)
class BrownianPath:
    h: float
    values: np.ndarray

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values)

    def at(self, x):
        return np.interp(x, np.arange(self.values.size) * self.h, self.values)


def _is_pow2(m: int) -> bool:
    return m > 0 and (m & (m - 1)) == 0


def dyadic_brownian(seed: int, tag: int, level: int, length: int = 2, *index: int,
                    horizon: float | None = None) -> np.ndarray:
    """Brownian path on ``[0, length]`` at spacing ``2**-level`` by midpoint bridges.

    Level ``l`` midpoints come from their own stream, so coarser and finer
    resolutions of the same seed are samples of one continuous path.  With
    ``horizon`` only the prefix covering ``[0, horizon]`` is refined; it agrees
    with the same prefix of the full construction.
    """
    def keep(w, spacing):
        if horizon is None:
            return w
        return w[: min(w.size, int(np.ceil(horizon / spacing)) + 1)]

    w = np.zeros(length + 1)
    w[1:] = np.cumsum(_rng.stream(seed, tag, *index, 0).standard_normal(length))
    spacing = 1.0
    w = keep(w, spacing)
    for lev in range(1, level + 1):
        z = _rng.stream(seed, tag, *index, lev).standard_normal(w.size - 1)
        mid = 0.5 * (w[:-1] + w[1:]) + np.sqrt(spacing / 4.0) * z
        out = np.empty(2 * w.size - 1)
        out[0::2] = w
        out[1::2] = mid
        spacing *= 0.5
        w = keep(out, spacing)
    return w


def sample_brownian(grid: GridSpec, zero_noise: bool = False, tag: int = _rng.ENVIRONMENT) -> BrownianPath:
    """Environment path on ``[0, 1 + 1/n]``.

    When ``n*sub`` is a power of two the path is taken from the dyadic bridge
    construction and is therefore coupled across every ``n`` and ``sub``
    sharing the seed.  Otherwise independent increments are drawn.
    """
    m = grid.n * grid.sub
    npts = grid.cells + 1
    if zero_noise:
        return BrownianPath(grid.h, np.zeros(npts))
    if _is_pow2(m):
        level = m.bit_length() - 1
        w = dyadic_brownian(grid.seed, tag, level)
        return BrownianPath(grid.h, w[:npts].copy())
    z = _rng.stream(grid.seed, tag, 999).standard_normal(grid.cells)
    return BrownianPath(grid.h, np.concatenate([[0.0], np.cumsum(z) * np.sqrt(grid.h)]))


# ---------------------------------------------------------------------------
# local stochastic integrals (left-endpoint sums on each lattice cell)


def cell_integrals(dW: np.ndarray, n: int, sub: int):
    """Per-cell Ito sums used by G, G2 and gamma.

    ``dW`` has shape ``(..., cells*sub)``.  Returns ``(rise, fall, quartic,
    nested)`` each of shape ``(..., cells)``; with ``u`` the relative position
    in the cell these are the sums of ``u dW``, ``(1-u) dW``, ``u(1-u) dW`` and
    the ordered double sum of ``u_1 (1-u_2) dW_1 dW_2``.
    """
    d = dW.reshape(*dW.shape[:-1], -1, sub)
    u = np.arange(sub) / sub
    du = d * u
    rise = du.sum(-1)
    fall = (d * (1.0 - u)).sum(-1)
    quartic = (du * (1.0 - u)).sum(-1)
    inner = np.cumsum(du, axis=-1) - du
    nested = (inner * (1.0 - u) * d).sum(-1)
    return rise, fall, quartic, nested


def tent_G(rise, fall, n):
    """G_k = sqrt(n) * int tent dW for k = 1..n (cells k-1 and k)."""
    return np.sqrt(n) * (rise[..., :-1] + fall[..., 1:])


def second_order_G(nested, n):
    """G2_k = 2n (Q_{k-1} - Q_k), Q the ordered double sum on one cell."""
    return 2.0 * n * (nested[..., :-1] - nested[..., 1:])


def quartic_gamma(quartic, n):
    """gamma_k = 4 n^{5/2} int_{x_k}^{x_{k+1}} (x-x_k)(x_{k+1}-x) dW."""
    return 4.0 * np.sqrt(n) * quartic


def local_statistics(samples: int, rng: np.random.Generator, n: int = 8, sub: int = 64, chunk: int = 10000):
    """Independent draws of ``(G_k, G2_k, gamma_k)`` from fresh increments on two cells.

    Each statistic only sees its own cells, so one pair of cells per draw is
    enough for their marginal laws.
    """
    out = np.empty((3, samples))
    h = 1.0 / (n * sub)
    for lo in range(0, samples, chunk):
        hi = min(samples, lo + chunk)
        dW = rng.standard_normal((hi - lo, 2 * sub)) * np.sqrt(h)
        rise, fall, quartic, nested = cell_integrals(dW, n, sub)
        out[0, lo:hi] = tent_G(rise, fall, n)[:, 0]
        out[1, lo:hi] = second_order_G(nested, n)[:, 0]
        out[2, lo:hi] = quartic_gamma(quartic, n)[:, 0]
    return out


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Environment:
    grid: GridSpec
    beta: float
    W: BrownianPath
    zero_noise: bool
    G: np.ndarray
    G2: np.ndarray
    gamma: np.ndarray
    Iexp: np.ndarray
    s: np.ndarray
    p: np.ndarray
    q: np.ndarray
    r: np.ndarray
    alpha_plus: np.ndarray
    alpha_minus: np.ndarray
    # fine-grid tables (grid index j <-> y = j*h)
    fine_I: np.ndarray = field(repr=False)
    fine_s: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.n + 2) / self.n

    def key(self) -> dict:
        return {"seed": self.grid.seed, "n": self.n, "sub": self.grid.sub, "beta": self.beta,
                "zero_noise": self.zero_noise}

    # -- serialization -------------------------------------------------------
    _ARRAYS = ("G", "G2", "gamma", "Iexp", "s", "p", "q", "r", "alpha_plus", "alpha_minus")

    def to_bytes(self) -> bytes:
        header = dict(self.key())
        arrays = {"W": self.W.values}
        arrays.update({name: getattr(self, name) for name in self._ARRAYS})
        header["arrays"] = [[k, int(v.size)] for k, v in arrays.items()]
        hb = json.dumps(header, sort_keys=True).encode()
        body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in arrays.values())
        return _MAGIC + struct.pack("<I", len(hb)) + hb + body

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Environment":
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:8] != _MAGIC:
            raise ValueError(f"{path}: not an environment file")
        (hl,) = struct.unpack("<I", blob[8:12])
        header = json.loads(blob[12:12 + hl])
        grid = GridSpec(header["n"], header["sub"], header["seed"])
        # the fine path determines everything; recompute and check the stored arrays
        off = 12 + hl
        stored = {}
        for name, size in header["arrays"]:
            stored[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=off).copy()
            off += 8 * size
        env = environment_from_path(grid, header["beta"], BrownianPath(grid.h, stored["W"]),
                                    zero_noise=header["zero_noise"])
        for name in cls._ARRAYS:
            a, b = getattr(env, name), stored[name]
            if not np.array_equal(np.isnan(a), np.isnan(b)) or not np.allclose(
                    np.nan_to_num(a, posinf=0, neginf=0), np.nan_to_num(b, posinf=0, neginf=0),
                    rtol=1e-12, atol=0):
                raise ValueError(f"{path}: stored array {name} does not match its path")
        return env


def _fine_scale(W: BrownianPath, n: int, sub: int, beta: float):
    """I(y_j) and s(y_j) on the fine grid.

    ``I(y) = int_y^1 2 dW / sqrt(beta z)`` by left-endpoint sums, and
    ``s(y) = -int_y^1 z^{-1} e^{I(z)} dz`` with ``e^I`` linear on each fine cell
    and ``1/z`` integrated exactly (exact when W = 0).  ``s(0) = -inf``.
    """
    h = 1.0 / (n * sub)
    npts = W.values.size
    y = np.arange(npts) * h
    dW = np.diff(W.values)
    inc = np.zeros(npts - 1)
    inc[1:] = 2.0 * dW[1:] / np.sqrt(beta * y[1:-1])
    c = np.concatenate([[0.0], np.cumsum(inc)])
    j1 = n * sub
    I = c[j1] - c
    I[0] = np.nan
    E = np.exp(I[1:])
    y0 = y[1:-1]
    slope = np.diff(E) / h
    icpt = E[:-1] - slope * y0
    cell = icpt * np.log1p(h / y0) + slope * h
    cs = np.concatenate([[0.0], np.cumsum(cell)])
    s = np.empty(npts)
    s[0] = -np.inf
    s[1:] = cs - cs[j1 - 1]
    if not np.all(np.diff(s[1:]) > 0):
        bad = int(np.argmin(np.diff(s[1:]))) + 1
        raise QuadratureError(f"scale table not increasing near y={bad * h:.6g}")
    return I, s


def environment_from_path(grid: GridSpec, beta: float, W: BrownianPath, zero_noise: bool = False) -> Environment:
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    n, sub = grid.n, grid.sub
    if W.values.size != grid.cells + 1:
        raise ValueError("path length does not match the grid")
    dW = np.diff(W.values)
    rise, fall, quartic, nested = cell_integrals(dW, n, sub)

    nan = np.full(n + 2, np.nan)
    G = nan.copy()
    G[1:n + 1] = tent_G(rise, fall, n)
    G2 = nan.copy()
    G2[1:n + 1] = second_order_G(nested, n)
    gamma = nan.copy()
    gamma[0:n + 1] = quartic_gamma(quartic, n)

    fine_I, fine_s = _fine_scale(W, n, sub, beta)
    s = fine_s[::sub].copy()
    Iexp = np.exp(fine_I[::sub])

    k = np.arange(n + 2)
    r = nan.copy()
    r[1:n + 1] = 1.0 - k[1:n + 1] / (2.0 * n)
    p = nan.copy()
    kk = np.arange(2, n + 1)
    p[kk] = (s[kk] - s[kk - 1]) / (s[kk + 1] - s[kk - 1])
    p[1] = 1.0  # s(0) = -inf: the chain never steps to 0
    q = 1.0 - p

    y = np.arange(fine_s.size) * grid.h
    ap = nan.copy()
    am = nan.copy()
    kk = np.arange(1, n + 1)
    # leaving (alpha_-, alpha_+) returns to x_k with probability r_k
    ap[kk] = np.interp(s[kk] + (1.0 - r[kk]) * (s[kk + 1] - s[kk]), fine_s[1:], y[1:])
    am[kk] = np.interp(s[kk] - (1.0 - r[kk]) * (s[kk] - s[kk - 1]), fine_s[1:], y[1:], left=0.0)
    am[1] = 0.0

    return Environment(grid=grid, beta=float(beta), W=W, zero_noise=zero_noise, G=G, G2=G2, gamma=gamma,
                       Iexp=Iexp, s=s, p=p, q=q, r=r, alpha_plus=ap, alpha_minus=am,
                       fine_I=fine_I, fine_s=fine_s)


def sample_environment(grid: GridSpec, beta: float, zero_noise: bool = False) -> Environment:
    return environment_from_path(grid, beta, sample_brownian(grid, zero_noise), zero_noise)


def logit_expansion(env: Environment, k: int) -> float:
    """Three-term surrogate for log(p_k/q_k)."""
    if not 1 <= k <= env.n:
        raise IndexError(f"k={k} outside 1..{env.n}")
    b = env.beta
    return 2.0 * env.G[k] / np.sqrt(b * k) + 1.0 / k + 2.0 * env.G2[k] / (b * k)


def exact_logit(env: Environment, k) -> np.ndarray:
    """log(p_k/q_k) from scale increments."""
    k = np.asarray(k)
    s = env.s
    return np.log((s[k] - s[k - 1]) / (s[k + 1] - s[k]))


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScaleTable:
    h: float
    x: np.ndarray
    s: np.ndarray
    ds: np.ndarray
    V: np.ndarray
    x_min: float
    x_max: float

    def inverse(self, b):
        """s^{-1} by monotone interpolation; NaN outside the table."""
        return np.interp(b, self.s, self.x, left=np.nan, right=np.nan)

    def __call__(self, x):
        return np.interp(x, self.x, self.s, left=np.nan, right=np.nan)

    def derivative(self, x):
        return np.interp(x, self.x, self.ds, left=np.nan, right=np.nan)


def build_scale_table(env: Environment, x_min: float) -> ScaleTable:
    if not 0 < x_min < 1:
        raise ValueError(f"x_min must lie in (0, 1), got {x_min}")
    h = env.grid.h
    j0 = max(1, int(np.floor(x_min / h)))
    y = np.arange(env.fine_s.size) * h
    I = env.fine_I[j0:]
    x = y[j0:]
    V = -np.log(x) + I
    return ScaleTable(h=h, x=x, s=env.fine_s[j0:], ds=np.exp(V), V=V, x_min=float(x[0]), x_max=float(x[-1]))
