"""Discrete Feynman-Kac identity three ways.

``(M^m v)_k`` is computed by brute-force lattice-path enumeration, by banded
matrix powers, and by Monte-Carlo over chain paths weighted either by the
exact step exponents ``H(k, delta)`` (an identity) or by the position-only
exponent ``H_k`` (which reproduces Phi_n and leaves the residual R).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import rng as _rng
from .chain import StepLaw, batch_walk, phi_terms
from .env import Environment
from .matrix import TridiagonalOperator, apply_power, build_model

ENUMERATION_CAP = 10**7
EXACT, COMMON = "exact", "common"


@dataclass(frozen=True)
class FkInstance:
    env: Environment
    op: TridiagonalOperator
    a: float
    k: int
    m: int
    v: np.ndarray
    mode: str = EXACT

    def __post_init__(self):
        if self.mode not in (EXACT, COMMON):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.v.shape != (self.op.n,):
            raise ValueError("test vector must have length n")

    @classmethod
    def make(cls, env: Environment, a: float, k: int, m: int, v, mode: str = EXACT) -> "FkInstance":
        _, op = build_model(env, a)
        return cls(env, op, float(a), int(k), int(m), np.asarray(v, dtype=float), mode)

    def matrix_value(self) -> float:
        return float(apply_power(self.op, self.m, self.v)[self.k - 1])


def path_sum(inst: FkInstance) -> float:
    """Sum over all {-1,0,1}-increment paths of the product of M entries."""
    m, n = inst.m, inst.op.n
    if 3 ** m > ENUMERATION_CAP:
        raise ValueError(f"3^{m} paths exceed the enumeration cap {ENUMERATION_CAP}")
    if m == 0:
        return float(inst.v[inst.k - 1])
    # M entries by (site, increment); sites outside 1..n get zero weight
    Mtab = np.zeros((n + 2, 3))
    sites = np.arange(1, n + 1)
    Mtab[sites, 1] = inst.op.m_diag
    Mtab[sites[:-1], 2] = inst.op.m_sup
    Mtab[sites[1:], 0] = inst.op.m_sub
    inc = np.array(list(itertools.product((-1, 0, 1), repeat=m)), dtype=np.int64)
    pos = inst.k + np.concatenate([np.zeros((inc.shape[0], 1), dtype=np.int64), np.cumsum(inc, axis=1)], axis=1)
    inside = np.all((pos >= 1) & (pos <= n), axis=1)
    inc, pos = inc[inside], pos[inside]
    w = np.prod(Mtab[pos[:, :-1], inc + 1], axis=1)
    return float(np.sum(w * inst.v[pos[:, -1] - 1]))


@dataclass(frozen=True)
class McResult:
    estimate: float
    stderr: float
    paths: int
    alive_fraction: float
    extra: dict


def _log_weight_table(inst: FkInstance) -> np.ndarray:
    n = inst.op.n
    lw = np.zeros((n + 2, 3))
    k = np.arange(1, n + 1)
    lw[k, 0] = inst.op.H
    lw[k, 2] = inst.op.H
    lw[k, 1] = inst.op.H0 if inst.mode == EXACT else inst.op.H
    return lw


def run_paths(inst: FkInstance, paths: int, seed: int, first_path: int = 0, block: int = 4096):
    """Raw per-path results: final site, log weight, Phi pieces, min site, alive."""
    law = StepLaw.from_env(inst.env)
    lw = _log_weight_table(inst)
    termA, termB = phi_terms(inst.env)
    termA = np.nan_to_num(termA, nan=0.0, posinf=0.0, neginf=0.0)
    termB = np.nan_to_num(termB, nan=0.0, posinf=0.0, neginf=0.0)
    outs = []
    for start in range(first_path, first_path + paths, block):
        stop = min(first_path + paths, start + block)
        U = np.empty((stop - start, inst.m))
        for i, p in enumerate(range(start, stop)):
            U[i] = _rng.stream(seed, _rng.CHAIN, p).random(inst.m)
        outs.append(batch_walk(inst.k, U, law.stay, law.stay_up, inst.op.n, lw, termA, termB, inst.v))
    return tuple(np.concatenate(parts) for parts in zip(*outs))


def batch_means(samples: np.ndarray, batches: int = 20):
    """Mean and batch-means standard error."""
    parts = np.array_split(samples, batches)
    means = np.array([p.mean() for p in parts])
    return float(samples.mean()), float(means.std(ddof=1) / np.sqrt(batches))


def mc_expectation(inst: FkInstance, paths: int, seed: int = 0, weight_cap: float = 1e6,
                   cutoff_c: float | None = None) -> McResult:
    """Monte-Carlo right side of the Feynman-Kac identity.

    exact mode: weight exp(sum H(x, delta)); common mode: weight exp(Phi_n).
    With ``cutoff_c`` paths that dip below ``1/(c log n)`` contribute zero.
    """
    final, lw, pa, pb, kmin, alive = run_paths(inst, paths, seed)
    if inst.mode == COMMON:
        lw = inst.a * inst.a * pa + inst.a * pb
    if np.any(lw[alive] > np.log(weight_cap)):
        raise FloatingPointError("path weight exceeds the configured cap")
    n = inst.op.n
    keep = alive.copy()
    if cutoff_c is not None:
        keep &= kmin / n >= 1.0 / (cutoff_c * np.log(n))
    vals = np.where(keep, np.exp(lw) * inst.v[np.clip(final, 1, n) - 1], 0.0)
    est, se = batch_means(vals)
    return McResult(est, se, paths, float(alive.mean()),
                    {"keep_fraction": float(keep.mean()), "log_weights": lw, "keep": keep})


@dataclass(frozen=True)
class FkReport:
    mode: str
    n: int
    m: int
    k0: int
    estimate: float
    stderr: float
    matrix_value: float
    z_score: float

    def row(self) -> dict:
        return dict(self.__dict__)


def verify(inst: FkInstance, paths: int, seed: int = 0) -> FkReport:
    mv = inst.matrix_value()
    if paths == 0:
        est = path_sum(inst)
        return FkReport("enumeration", inst.op.n, inst.m, inst.k, est, 0.0, mv, float("nan"))
    res = mc_expectation(inst, paths, seed)
    z = (res.estimate - mv) / res.stderr if res.stderr > 0 else float("nan")
    return FkReport(inst.mode, inst.op.n, inst.m, inst.k, res.estimate, res.stderr, mv, float(z))


@dataclass(frozen=True)
class ResidualSample:
    n: int
    m: int
    paths: int
    keep_fraction: float
    median_abs_R: float
    log_ratio: float  # log of summed exact weights over summed common weights


def residual(env: Environment, a: float, k0: int, m: int, paths: int, seed: int = 0,
             cutoff_c: float = 1.0, v=None) -> ResidualSample:
    """Per-path R = log(exact weight) - Phi_n on cutoff-surviving paths.

    The exact weight is the one whose expectation is the matrix power, so R is
    the pathwise gap between the matrix side and exp(Phi_n).
    """
    n = env.n
    v = np.ones(n) if v is None else np.asarray(v, dtype=float)
    inst = FkInstance.make(env, a, k0, m, v, EXACT)
    final, lw, pa, pb, kmin, alive = run_paths(inst, paths, seed)
    phi = a * a * pa + a * pb
    keep = alive & (kmin / n >= 1.0 / (cutoff_c * np.log(n)))
    if not keep.any():
        raise FloatingPointError("no path survived the cutoff event")
    R = (lw - phi)[keep]
    vk = v[final[keep] - 1]
    shift = lw[keep].max()
    ratio = np.log(np.sum(np.exp(lw[keep] - shift) * vk) / np.sum(np.exp(phi[keep] - shift) * vk))
    return ResidualSample(n, m, paths, float(keep.mean()), float(np.median(np.abs(R))), float(ratio))
