"""Modified beta-Laguerre matrix model built from an Environment.

Rows and columns are indexed ``k = 1..n``; arrays below are stored 0-based
(``arr[k-1]``).  The operator ``A`` is tridiagonal and ``M = I - A/4``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .env import Environment


class ModelError(RuntimeError):
    """Admissibility failure while assembling the model."""


@dataclass(frozen=True)
class BidiagonalModel:
    n: int
    a: float
    beta: float
    xsq: np.ndarray  # bold-x_k^2, k = 1..n
    ysq: np.ndarray  # bold-y_{k-1}^2, k = 1..n (ysq[0] = 0)
    H: np.ndarray
    logP: np.ndarray  # log P_{k,k}

    @property
    def diag(self) -> np.ndarray:
        return np.sqrt(self.xsq)

    @property
    def subdiag(self) -> np.ndarray:
        """Entries -y_k at (k+1, k), k = 1..n-1, returned as positive y_k."""
        return np.sqrt(self.ysq[1:])

    def dense(self) -> np.ndarray:
        return np.diag(self.diag) - np.diag(self.subdiag, -1)


@dataclass(frozen=True)
class TridiagonalOperator:
    n: int
    sub: np.ndarray  # A_{k,k-1}, k = 2..n  (length n-1)
    diag: np.ndarray  # A_{k,k}
    sup: np.ndarray  # A_{k,k+1}, k = 1..n-1
    H0: np.ndarray  # stay exponent H(k,0)
    H: np.ndarray  # jump exponent H(k,+-1) = H_k
    stay: np.ndarray  # r_k
    up: np.ndarray  # (1-r_k) p_k
    down: np.ndarray  # (1-r_k) q_k

    # M = I - A/4
    @property
    def m_diag(self) -> np.ndarray:
        return 1.0 - self.diag / 4.0

    @property
    def m_sup(self) -> np.ndarray:
        return -self.sup / 4.0

    @property
    def m_sub(self) -> np.ndarray:
        return -self.sub / 4.0

    def dense(self) -> np.ndarray:
        return np.diag(self.diag) + np.diag(self.sup, 1) + np.diag(self.sub, -1)

    def dense_M(self) -> np.ndarray:
        return np.eye(self.n) - self.dense() / 4.0

    def M_entry(self, k: int, delta: int) -> float:
        """M_{k,k+delta} for 1-based k."""
        if delta == 0:
            return self.m_diag[k - 1]
        if delta == 1:
            return self.m_sup[k - 1] if k < self.n else 0.0
        return self.m_sub[k - 2] if k > 1 else 0.0

    def log_weights(self):
        """Exponents (down, stay, up) per site, shape (n, 3)."""
        return np.stack([self.H, self.H0, self.H], axis=1)


def site_exponent(env: Environment, a: float) -> np.ndarray:
    """H_k for k = 1..n: the position-only exponent of one step."""
    n, b = env.n, env.beta
    k = np.arange(1, n + 1)
    x = k / n
    return (-1.0 / (4.0 * n * n)) * (a * a / (4.0 * x) + a * np.sqrt(n) * env.G[k] / np.sqrt(b * x)
                                     + a * env.G2[k] / (b * x))


def build_model(env: Environment, a: float):
    if not a > -1:
        raise ValueError(f"Laguerre parameter must exceed -1, got a={a}")
    n = env.n
    k = np.arange(1, n + 1)
    r, p, q = env.r[k], env.p[k], env.q[k]
    H = site_exponent(env, a)
    eH = np.exp(H)
    sup_all = -4.0 * (1.0 - r) * p * eH
    sub_all = -4.0 * (1.0 - r) * q * eH

    xsq = 4.0 * n * (1.0 - r) * p * eH * np.sqrt(1.0 + a / k)
    ysq = np.zeros(n)
    km = k[1:]
    ysq[1:] = 4.0 * n * (1.0 - r[1:]) * q[1:] * eH[1:] / np.sqrt(1.0 + a / (km - 1))
    diag = (ysq + xsq) / n

    stay_mass = 1.0 - diag / 4.0
    if np.any(stay_mass <= 0):
        bad = int(np.argmin(stay_mass)) + 1
        raise ModelError(f"stay weight r_k e^H(k,0) is nonpositive at k={bad} (a={a}, n={n})")
    H0 = np.log(stay_mass / r)

    y = np.sqrt(ysq[1:])  # y_j for j = 1..n-1
    xx = np.sqrt(xsq)
    j = np.arange(1, n)
    logP = np.concatenate([[0.0], np.cumsum(np.log(y / xx[:-1]) + 0.5 * np.log1p(a / j))])

    model = BidiagonalModel(n=n, a=float(a), beta=env.beta, xsq=xsq, ysq=ysq, H=H, logP=logP)
    op = TridiagonalOperator(n=n, sub=sub_all[1:], diag=diag, sup=sup_all[:-1], H0=H0, H=H,
                             stay=r, up=(1.0 - r) * p, down=(1.0 - r) * q)
    return model, op


def apply_power(op: TridiagonalOperator, m: int, v: np.ndarray) -> np.ndarray:
    """M^m v by m banded products."""
    v = np.array(v, dtype=float)
    if v.shape[0] != op.n:
        raise ValueError(f"vector length {v.shape[0]} does not match n={op.n}")
    if m < 0:
        raise ValueError("power must be nonnegative")
    d, up, lo = op.m_diag, op.m_sup, op.m_sub
    if v.ndim == 2:
        d, up, lo = d[:, None], up[:, None], lo[:, None]
    for _ in range(m):
        w = d * v
        w[:-1] += up * v[1:]
        w[1:] += lo * v[:-1]
        v = w
    return v


def inverse_entries(model: BidiagonalModel) -> np.ndarray:
    """Lower-triangular B^{-1} from the product formula, in log space."""
    lx = 0.5 * np.log(model.xsq)
    ly = 0.5 * np.log(model.ysq[1:])
    # c_i = sum_{k=2}^{i} (log y_{k-1} - log x_k)
    c = np.concatenate([[0.0], np.cumsum(ly - lx[1:])])
    L = c[:, None] - c[None, :] - lx[None, :]
    out = np.exp(np.where(np.tri(model.n, dtype=bool), L, -np.inf))
    return out


def _bidiag_solves(model: BidiagonalModel):
    d = model.diag
    e = model.subdiag
    n = model.n
    lower = np.zeros((2, n))
    lower[0] = d
    lower[1, :-1] = -e
    upper = np.zeros((2, n))
    upper[1] = d
    upper[0, 1:] = -e

    def apply_inv_gram(V):
        # (B B^T)^{-1} V = B^{-T} B^{-1} V
        Z = linalg.solve_banded((1, 0), lower, V)
        return linalg.solve_banded((0, 1), upper, Z)

    return apply_inv_gram


@dataclass(frozen=True)
class EigenResult:
    values: np.ndarray  # smallest eigenvalues of n^2 A
    vectors: np.ndarray  # matching eigenvectors of A (columns, unit norm)
    residuals: np.ndarray  # ||n^2 A v - lambda v|| / ||v||
    iterations: int


def smallest_eigs(model: BidiagonalModel, count: int = 1, tol: float = 1e-10, max_iter: int = 500,
                  seed: int = 0) -> EigenResult:
    """Smallest eigenvalues of n^2 A.

    ``A`` is similar to ``B B^T / n``, so these are ``n * sigma_i(B)^2``.
    Subspace iteration with ``(B B^T)^{-1}`` (two bidiagonal solves per
    product) and Rayleigh-Ritz on ``B B^T`` itself; iteration stops once the
    residual on ``n^2 A`` is below ``tol`` relative to ``max(1, lambda)``.
    """
    if not 1 <= count <= 8:
        raise ValueError("count must be between 1 and 8")
    n = model.n
    block = min(n, count + 4)
    count = min(count, n)
    apply = _bidiag_solves(model)
    U, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((n, block)))
    P = np.exp(model.logP - model.logP.max())
    for it in range(1, max_iter + 1):
        U, _ = np.linalg.qr(apply(U))
        BtU = _bt_apply_block(model, U)
        w, S = np.linalg.eigh(BtU.T @ BtU)
        U = U @ S
        lam = n * w[:count]
        vecs = P[:, None] * U[:, :count]
        scale = np.linalg.norm(vecs, axis=0)
        # n^2 A (P u) = n P B B^T u
        lhs = n * P[:, None] * _b_apply_block(model, _bt_apply_block(model, U[:, :count]))
        resid = np.linalg.norm(lhs - vecs * lam, axis=0) / scale
        if np.all(resid <= tol * np.maximum(1.0, lam)):
            break
    else:
        raise ModelError(f"eigen-solver did not converge in {max_iter} iterations; residuals {resid}")
    return EigenResult(values=lam, vectors=vecs / scale, residuals=resid, iterations=it)


def _b_apply_block(model, V):
    out = model.diag[:, None] * V
    out[1:] -= model.subdiag[:, None] * V[:-1]
    return out


def _bt_apply_block(model, V):
    out = model.diag[:, None] * V
    out[:-1] -= model.subdiag[:, None] * V[1:]
    return out


def a_matvec(op: TridiagonalOperator, v: np.ndarray) -> np.ndarray:
    w = op.diag * v
    w[:-1] += op.sup * v[1:]
    w[1:] += op.sub * v[:-1]
    return w


def eig_residual(op: TridiagonalOperator, lam: float, v: np.ndarray) -> float:
    n = op.n
    return float(np.linalg.norm(n * n * a_matvec(op, v) - lam * v) / np.linalg.norm(v))


def gershgorin_M(op: TridiagonalOperator):
    """Bounds (lo, hi) on the real parts of the spectrum of M."""
    d = op.m_diag
    rad = np.zeros(op.n)
    rad[:-1] += np.abs(op.m_sup)
    rad[1:] += np.abs(op.m_sub)
    return float(np.min(d - rad)), float(np.max(d + rad))


# ---------------------------------------------------------------------------


def _kernel_factors(env: Environment, a: float, flip: bool = False):
    """Separable pieces of the limiting kernel on fine-cell midpoints.

    ``K(x, y) = 1_{y<=x} f(x) g(y)`` with
    ``f(x) = x^{-(a+1)/2} e^{J(x)}``, ``g(y) = y^{a/2} e^{-J(y)}`` and
    ``J(x) = int_x^1 dW/sqrt(beta z)``, so that
    ``f(x) g(y) = x^{-1/2} (y/x)^{a/2} exp(-int_y^x dW/sqrt(beta z))``.
    """
    h = env.grid.h
    m = env.grid.n * env.grid.sub
    mid = (np.arange(m) + 0.5) * h
    J = np.empty(m)
    J[1:] = 0.25 * (env.fine_I[1:m] + env.fine_I[2:m + 1])
    J[0] = 0.5 * env.fine_I[1]
    if flip:
        J = -J
    shift = J.max()
    with np.errstate(over="ignore"):
        f = np.exp(-0.5 * (a + 1.0) * np.log(mid) + J - shift)
        g = np.exp(0.5 * a * np.log(mid) - J + shift)
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
        raise ModelError(f"kernel factors overflow for a={a}")
    return f * h, g * h


@dataclass(frozen=True)
class KernelOperator:
    """Galerkin projection of the limiting kernel onto ``N`` piecewise constants.

    Entries in the orthonormal basis ``sqrt(N) 1_cell`` are
    ``N * int int_{cell_i x cell_j} K``; the lower part is rank one so
    products cost O(N).
    """
    N: int
    F: np.ndarray
    G: np.ndarray
    D: np.ndarray

    def matvec(self, v):
        v = np.asarray(v, dtype=float).ravel()
        acc = np.concatenate([[0.0], np.cumsum(self.G * v)[:-1]])
        return self.N * (self.F * acc + self.D * v)

    def rmatvec(self, w):
        w = np.asarray(w, dtype=float).ravel()
        rev = np.cumsum((self.F * w)[::-1])[::-1]
        acc = np.concatenate([rev[1:], [0.0]])
        return self.N * (self.G * acc + self.D * w)

    def dense(self) -> np.ndarray:
        T = np.tril(np.outer(self.F, self.G), -1)
        T[np.diag_indices(self.N)] = self.D
        return self.N * T


def kernel_operator(env: Environment, a: float, grid_size: int, flip: bool = False) -> KernelOperator:
    m = env.grid.n * env.grid.sub
    if m % grid_size:
        raise ValueError(f"grid_size {grid_size} must divide the fine resolution {m}")
    c = m // grid_size
    fh, gh = _kernel_factors(env, a, flip)
    fh = fh.reshape(grid_size, c)
    gh = gh.reshape(grid_size, c)
    inner = np.cumsum(gh, axis=1) - 0.5 * gh
    return KernelOperator(N=grid_size, F=fh.sum(1), G=gh.sum(1), D=(fh * inner).sum(1))


def kernel_matrix(env: Environment, a: float, grid_size: int, flip: bool = False) -> np.ndarray:
    """Dense Galerkin kernel matrix (see ``KernelOperator``)."""
    return kernel_operator(env, a, grid_size, flip).dense()


def top_singular_values(op: KernelOperator, count: int = 1) -> np.ndarray:
    if op.N <= 1024:
        return linalg.svdvals(op.dense())[:count]
    from scipy.sparse.linalg import LinearOperator, svds
    lin = LinearOperator((op.N, op.N), matvec=op.matvec, rmatvec=op.rmatvec, dtype=float)
    vals = svds(lin, k=count, return_singular_vectors=False, tol=1e-12, random_state=0)
    return np.sort(vals)[::-1]


def limiting_kernel(env: Environment, a: float, grid_size: int = 4096, count: int = 1) -> np.ndarray:
    """Reference eigenvalues of the limiting operator, ``1/sigma_i^2`` of the
    projected kernel.  Refining nested grids can only raise ``sigma_1``, so the
    reference decreases towards its limit as ``grid_size`` grows."""
    if grid_size < 64:
        raise ValueError("grid_size must be at least 64")
    return 1.0 / top_singular_values(kernel_operator(env, a, grid_size), count) ** 2
