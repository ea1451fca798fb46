"""Covariate-indexed randomness: kernels, GP draws, U- and V-processes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.special import betaincinv, gammaincinv, ndtr

from .pyramid import Address, PyramidLayout

U_CLAMP = 1e-12
JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class CorrelationError(np.linalg.LinAlgError):
    pass


def as_points(X) -> np.ndarray:
    """Covariate points as an (n, p) float array."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError("covariates must be a vector or an (n, p) matrix")
    return X


@dataclass(frozen=True)
class CorrelationKernel:
    """Isotropic correlation function.

    ``gaussian``: exp(-|x - x'|^2 / range); ``exponential``: exp(-|x - x'| / range).
    """

    family: str = "gaussian"
    range: float = 5.0

    def __post_init__(self):
        if self.family not in ("gaussian", "exponential"):
            raise ValueError(f"unknown kernel family {self.family!r}")
        if not self.range > 0.0:
            raise ValueError("kernel range must be positive")

    def __call__(self, X1, X2) -> np.ndarray:
        A, B = as_points(X1), as_points(X2)
        d2 = np.sum((A[:, None, :] - B[None, :, :]) ** 2, axis=-1)
        if self.family == "gaussian":
            return np.exp(-d2 / self.range)
        return np.exp(-np.sqrt(d2) / self.range)


KernelSpec = CorrelationKernel | Mapping[object, CorrelationKernel]


def kernel_for(kernels: KernelSpec, address: Address) -> CorrelationKernel:
    """Resolve the kernel of a node; mappings fall back to their ``"default"`` entry."""
    if isinstance(kernels, CorrelationKernel):
        return kernels
    if tuple(address) in kernels:
        return kernels[tuple(address)]
    return kernels["default"]


@dataclass(frozen=True)
class CorrelationMatrix:
    """Correlation matrix with its (possibly jittered) lower Cholesky factor."""

    matrix: np.ndarray
    chol: np.ndarray = field(repr=False)
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    def whiten(self, z: np.ndarray) -> np.ndarray:
        """L^{-1} z along the first axis."""
        return solve_triangular(self.chol, z, lower=True, check_finite=False)

    def logpdf(self, z: np.ndarray) -> np.ndarray:
        """Log N_n(0, Lambda) density of ``z`` (columns are sites, last axis)."""
        w = self.whiten(np.asarray(z, dtype=float).T)
        return (-0.5 * np.sum(w * w, axis=0) - 0.5 * self.logdet()
                - 0.5 * self.n * np.log(2.0 * np.pi))

    def solve(self, b: np.ndarray) -> np.ndarray:
        y = solve_triangular(self.chol, b, lower=True, check_finite=False)
        return solve_triangular(self.chol.T, y, lower=False, check_finite=False)


def factorize(matrix: np.ndarray) -> CorrelationMatrix:
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or not np.allclose(m, m.T):
        raise ValueError("correlation matrix must be square and symmetric")
    eye = np.eye(m.shape[0])
    for jitter in JITTER_LADDER:
        try:
            L = cholesky(m + jitter * eye, lower=True, check_finite=True)
        except np.linalg.LinAlgError:
            continue
        return CorrelationMatrix(m, L, jitter)
    lam_min = float(np.linalg.eigvalsh(m)[0])
    raise CorrelationError(f"Cholesky failed with jitter up to {JITTER_LADDER[-1]:g}; "
                           f"smallest eigenvalue {lam_min:.3e}")


def correlation_matrix(kernel: CorrelationKernel, X) -> CorrelationMatrix:
    return factorize(kernel(X, X))


def sample_gp(corr: CorrelationMatrix, rng: np.random.Generator, size=None) -> np.ndarray:
    """Zero-mean GP values at the sites: L @ eta; extra ``size`` dims go first."""
    shape = () if size is None else tuple(np.atleast_1d(size))
    eta = rng.standard_normal(shape + (corr.n,))
    return eta @ corr.chol.T


def u_from_z(z):
    return np.clip(ndtr(z), U_CLAMP, 1.0 - U_CLAMP)


def v_from_u_gamma(u, alpha) -> np.ndarray:
    """Normalized gamma quantiles: a Dirichlet(alpha) vector when u is uniform.

    ``u`` and ``alpha`` have K + 1 leading components; other axes broadcast.
    """
    u = np.asarray(u, dtype=float)
    alpha = _alpha_column(alpha, u.ndim)
    if np.any(alpha <= 0):
        raise ValueError("alpha must be positive")
    y = gammaincinv(alpha, u)
    total = y.sum(axis=0)
    if np.any(total <= 0.0):
        raise FloatingPointError("all gamma quantiles underflowed to zero")
    return y / total


def v_from_u_beta(u, alpha) -> np.ndarray:
    """Stick-breaking Dirichlet(alpha) vector from K uniforms and K + 1 alphas."""
    u = np.asarray(u, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0):
        raise ValueError("alpha must be positive")
    K = alpha.shape[0] - 1
    if u.shape[0] != K:
        raise ValueError(f"expected {K} uniforms for {K + 1} alphas, got {u.shape[0]}")
    tail = np.cumsum(alpha[::-1])[::-1]       # sum_{j >= k} alpha_j
    a = _alpha_column(alpha[:K], u.ndim)
    b = _alpha_column(tail[1:], u.ndim)
    y = betaincinv(a, b, u)
    v = np.empty((K + 1,) + u.shape[1:])
    stick = np.ones(u.shape[1:])
    for k in range(K):
        v[k] = y[k] * stick
        stick = stick * (1.0 - y[k])
    v[K] = stick
    return v


def _alpha_column(alpha, ndim):
    alpha = np.asarray(alpha, dtype=float)
    return alpha.reshape(alpha.shape + (1,) * (ndim - alpha.ndim))


@dataclass(frozen=True)
class ConcentrationRule:
    """c_m = (m + offset) ** power."""

    offset: float = 5.0
    power: float = 2.0

    def __call__(self, m: int) -> float:
        c = (m + self.offset) ** self.power
        if not c > 0:
            raise ValueError(f"concentration at level {m} is not positive")
        return float(c)


@dataclass(frozen=True)
class AlphaSchedule:
    rule: ConcentrationRule
    alphas: dict[Address, np.ndarray]

    def __getitem__(self, address: Address) -> np.ndarray:
        return self.alphas[tuple(address)]


def martingale_alphas(layout: PyramidLayout,
                      c: ConcentrationRule = ConcentrationRule()) -> AlphaSchedule:
    """Dirichlet parameters proportional to the level gaps inside each node."""
    out = {}
    for node in layout.split_nodes():
        edges = np.concatenate(([node.left], node.interior, [node.right]))
        out[node.address] = c(node.level) * np.diff(edges)
    return AlphaSchedule(c, out)


def dirichlet_cumulative_means(alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    return np.cumsum(alpha)[:-1] / alpha.sum()

