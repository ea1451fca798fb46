"""FDQP prior draws, the uniform-to-response mapping, and the exact prior density.

Surfaces are T x n arrays: row t holds the tau_t quantiles at the n sites.
The density is written in the stick-breaking (beta) parameterization: each
specified level is a binary split of ``(Q[left], Q[right])`` with a
Beta(a, b) law on the relative position, driven through a Gaussian process.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import betainc, betaincinv, betaln, ndtr, ndtri

from .pyramid import Address, PyramidLayout, check_levels, place_quantiles
from .stochastic import (
    U_CLAMP,
    AlphaSchedule,
    CorrelationMatrix,
    KernelSpec,
    as_points,
    correlation_matrix,
    kernel_for,
    sample_gp,
    u_from_z,
    v_from_u_beta,
    v_from_u_gamma,
)

LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)
_SHORT = 0.25


class CrossingError(ValueError):
    """A quantile surface is not strictly increasing in tau at some site."""


def check_noncrossing(values: np.ndarray) -> None:
    bad = np.argwhere(np.diff(values, axis=-2) <= 0.0)
    if bad.size:
        raise CrossingError(f"{len(bad)} crossing/tied quantile pairs, first at {bad[0].tolist()}")


@dataclass(frozen=True)
class QuantileSurface:
    values: np.ndarray
    levels: tuple[float, ...]
    scale: str = "uniform"
    layout: PyramidLayout | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != len(self.levels):
            raise ValueError("surface must be T x n with one row per level")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "levels", check_levels(self.levels))
        if not np.all(np.isfinite(v)):
            raise ValueError("surface has non-finite entries")
        check_noncrossing(v)
        if self.scale == "uniform":
            if v.min() <= 0.0 or v.max() >= 1.0:
                raise ValueError("uniform-scale surface must lie in (0, 1)")
        elif self.scale != "real":
            raise ValueError(f"unknown scale {self.scale!r}")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class MappingParams:
    """Per-site trend ``mu`` and positive scale ``sigma`` (response units)."""

    mu: np.ndarray
    sigma: np.ndarray
    beta: np.ndarray | None = None

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        sigma = np.broadcast_to(np.asarray(self.sigma, dtype=float), mu.shape).copy()
        if np.any(~(sigma > 0)):
            raise ValueError("sigma must be positive everywhere")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def constant(cls, mu0: float, sigma, n: int) -> "MappingParams":
        return cls(np.full(n, float(mu0)), sigma)

    @classmethod
    def linear(cls, X, beta, sigma) -> "MappingParams":
        beta = np.asarray(beta, dtype=float)
        return cls(design_matrix(X) @ beta, sigma, beta)


def design_matrix(X) -> np.ndarray:
    X = as_points(X)
    return np.column_stack([np.ones(X.shape[0]), X])


@dataclass(frozen=True)
class LevelPlan:
    """Per-level beta parameters and parent pointers for the density.

    ``left``/``right`` index the padded vector ``(0, Q_1..Q_T, 1)``; row
    ``t`` of a surface is padded index ``t + 1``.
    """

    levels: np.ndarray
    left: np.ndarray
    right: np.ndarray
    a: np.ndarray
    b: np.ndarray
    depth: np.ndarray
    addresses: tuple[Address, ...]
    order: tuple[int, ...]
    dependents: tuple[np.ndarray, ...]

    @property
    def T(self) -> int:
        return self.levels.size


def level_plan(layout: PyramidLayout, alphas: AlphaSchedule,
               beta_rule: str = "martingale") -> LevelPlan:
    """Beta parameters (a_tau, b_tau) for every specified level.

    ``beta_rule="martingale"`` uses (alpha_k, sum_{j>k} alpha_j) of the node's
    Dirichlet; ``"literal"`` uses (alpha_1, 1 - alpha_1) and only applies to
    binary nodes whose alpha_1 < 1.
    """
    T = layout.T
    a = np.empty(T)
    b = np.empty(T)
    for s in layout.specs:
        alpha = alphas[s.node]
        if beta_rule == "martingale":
            a[s.index] = alpha[s.k - 1]
            b[s.index] = alpha[s.k:].sum()
        elif beta_rule == "literal":
            if alpha.size != 2:
                raise ValueError("the literal beta rule is defined for binary nodes only")
            a[s.index] = alpha[0]
            b[s.index] = 1.0 - alpha[0]
        else:
            raise ValueError(f"unknown beta rule {beta_rule!r}")
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError(f"non-positive beta parameters under rule {beta_rule!r}: "
                         f"a={a.tolist()}, b={b.tolist()}")
    left = np.array([s.left_index for s in layout.specs])
    right = np.array([s.right_index for s in layout.specs])
    deps = []
    for t in range(T):
        rows = {t} | {u for u in range(T) if left[u] == t + 1 or right[u] == t + 1}
        deps.append(np.array(sorted(rows)))
    return LevelPlan(np.asarray(layout.levels), left, right, a, b,
                     np.array([s.level for s in layout.specs]),
                     tuple(s.address for s in layout.specs), tuple(layout.order()),
                     tuple(deps))


def _kernel_at(kernels: KernelSpec, node: Address, k: int):
    if not isinstance(kernels, dict) or node + (k,) in kernels:
        return kernel_for(kernels, node + (k,))
    return kernel_for(kernels, node)


def row_kernels(layout: PyramidLayout, kernels: KernelSpec) -> list:
    """Kernel driving each specified level, in level order."""
    return [_kernel_at(kernels, s.node, s.k) for s in layout.specs]


def row_correlations(layout: PyramidLayout, kernels: KernelSpec, X) -> list[CorrelationMatrix]:
    """Correlation matrix driving each specified level (shared objects per kernel)."""
    cache: dict = {}
    out = []
    for kern in row_kernels(layout, kernels):
        if kern not in cache:
            cache[kern] = correlation_matrix(kern, X)
        out.append(cache[kern])
    return out


def sample_fdqp_batch(layout: PyramidLayout, kernels: KernelSpec, alphas: AlphaSchedule,
                      X, rng: np.random.Generator, size: int, *, route: str = "beta",
                      return_latent: bool = False):
    """``size`` independent uniform-scale surfaces as a (size, T, n) array.

    With ``return_latent`` the beta route also returns the driving Gaussian
    values (size, T, n), one GP per specified level.
    """
    X = as_points(X)
    n, T = X.shape[0], layout.T
    index = {t: i for i, t in enumerate(layout.levels)}
    padded = np.empty((size, T + 2, n))
    padded[:, 0] = 0.0
    padded[:, T + 1] = 1.0
    latent = np.empty((size, T, n))
    cache: dict = {}

    def corr(kern):
        if kern not in cache:
            cache[kern] = correlation_matrix(kern, X)
        return cache[kern]

    for node in layout.split_nodes():
        lo = 0 if node.left == 0.0 else index[node.left] + 1
        hi = T + 1 if node.right == 1.0 else index[node.right] + 1
        alpha = alphas[node.address]
        K = node.K
        if route == "beta":
            z = np.stack([sample_gp(corr(_kernel_at(kernels, node.address, k)), rng, size)
                          for k in range(1, K + 1)])
            v = v_from_u_beta(u_from_z(z), alpha)
        elif route == "gamma":
            z = np.stack([sample_gp(corr(_kernel_at(kernels, node.address, k)), rng, size)
                          for k in range(1, K + 2)])
            v = v_from_u_gamma(u_from_z(z), alpha)
        else:
            raise ValueError(f"unknown V-process route {route!r}")
        q = place_quantiles(padded[:, lo], padded[:, hi], v)
        for k, tau in enumerate(node.interior):
            padded[:, index[tau] + 1] = q[k]
            if route == "beta":
                latent[:, index[tau]] = z[k]
    values = padded[:, 1:T + 1]
    check_noncrossing(values)
    if return_latent:
        if route != "beta":
            raise ValueError("latent values are returned for the beta route only")
        return values, latent
    return values


def sample_fdqp_uniform(layout: PyramidLayout, kernels: KernelSpec, alphas: AlphaSchedule,
                        X, rng: np.random.Generator, *, route: str = "beta") -> QuantileSurface:
    values = sample_fdqp_batch(layout, kernels, alphas, X, rng, 1, route=route)[0]
    return QuantileSurface(values, layout.levels, "uniform", layout)


def map_to_real(surface: QuantileSurface, params: MappingParams) -> QuantileSurface:
    if surface.scale != "uniform":
        raise ValueError("map_to_real needs a uniform-scale surface")
    return QuantileSurface(uniform_to_real(surface.values, params.mu, params.sigma),
                           surface.levels, "real", surface.layout)


def uniform_to_real(u, mu, sigma) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise ValueError("uniform-scale values of exactly 0 or 1 map to infinity")
    return mu + sigma * ndtri(u)


def norm_mass(lo, hi, gap=None):
    """P(lo < Z <= hi) for standard normal Z, accurate in both tails.

    ``gap`` is ``hi - lo`` computed from unstandardized values when the caller
    has it; short intervals are then integrated directly instead of
    differencing two nearly equal CDF values.
    """
    lo, hi = np.broadcast_arrays(np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))
    gap = hi - lo if gap is None else np.broadcast_to(np.asarray(gap, dtype=float), lo.shape)
    upper = lo > 0.0
    with np.errstate(invalid="ignore"):
        out = np.where(upper, ndtr(-lo) - ndtr(-hi), ndtr(hi) - ndtr(lo))
        short = np.isfinite(lo) & np.isfinite(hi) & (
            gap * (1.0 + np.maximum(np.abs(lo), np.abs(hi))) < _SHORT)
    if np.any(short):
        g, a = gap[short], lo[short]
        t = a[..., None] + 0.5 * g[..., None] * (1.0 + _GL_NODES)
        quad = 0.5 * g * (np.exp(-0.5 * t * t - LOG_SQRT_2PI) @ _GL_WEIGHTS)
        out = np.array(out, dtype=float)
        out[short] = quad
    return out


def log_norm_pdf(x, mu=0.0, sigma=1.0):
    s = (x - mu) / sigma
    return -0.5 * s * s - np.log(sigma) - LOG_SQRT_2PI


def log_beta_pdf(r, a, b, rc=None):
    """Beta(a, b) log density; pass ``rc = 1 - r`` when it is known more accurately."""
    rc = 1.0 - np.asarray(r) if rc is None else rc
    return (a - 1.0) * np.log(r) + (b - 1.0) * np.log(rc) - betaln(a, b)


def _relative_position(q, qL, qR, mu, sigma):
    """Relative normal mass r of (qL, q] in (qL, qR], its complement and the width."""
    qL, q, qR = (np.asarray(v, dtype=float) for v in (qL, q, qR))
    sL, s, sR = (qL - mu) / sigma, (q - mu) / sigma, (qR - mu) / sigma
    # raw differences are exact for nearby values; standardized ones are not
    with np.errstate(invalid="ignore"):
        width = norm_mass(sL, sR, (qR - qL) / sigma)
        return (norm_mass(sL, s, (q - qL) / sigma) / width,
                norm_mass(s, sR, (qR - q) / sigma) / width, width)


def latent_from_relative(r, rc, a, b):
    """Phi^{-1}(Psi(r; a, b)), evaluated from whichever tail keeps full precision.

    ``rc`` is 1 - r computed without cancellation. The result is clamped to the
    same range as the forward map's clamp on U.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        lower = betainc(a, b, r)
        upper = betainc(b, a, rc)
    return np.where(lower <= 0.5, ndtri(np.clip(lower, U_CLAMP, 0.5)),
                    -ndtri(np.clip(upper, U_CLAMP, 0.5)))


def h_transform(q, qL, qR, mu, sigma, a, b):
    """Latent Gaussian coordinate of quantile ``q`` inside ``(qL, qR)``.

    ``qL``/``qR`` may be -inf/+inf (root endpoints).
    """
    r, rc, _ = _relative_position(q, qL, qR, mu, sigma)
    if np.any(~((r > 0.0) & (rc > 0.0))):
        raise ValueError("quantile lies outside its parent interval")
    z = latent_from_relative(r, rc, a, b)
    return float(z) if np.ndim(z) == 0 else z


def log_h_derivative(q, qL, qR, mu, sigma, a, b):
    """log |dh/dq|: -log phi(z) + log psi(r; a, b) + log phi(q; mu, sigma) - log width."""
    r, rc, width = _relative_position(q, qL, qR, mu, sigma)
    z = latent_from_relative(r, rc, a, b)
    return (0.5 * z * z + LOG_SQRT_2PI + log_beta_pdf(r, a, b, rc)
            + log_norm_pdf(q, mu, sigma) - np.log(width))


def _padded_real(values: np.ndarray) -> np.ndarray:
    n = values.shape[1]
    return np.vstack([np.full(n, -np.inf), values, np.full(n, np.inf)])


def latent_surface(surface: QuantileSurface, params: MappingParams, plan: LevelPlan) -> np.ndarray:
    """h-transform of every row of a real-scale surface (T x n)."""
    P = _padded_real(surface.values)
    return np.vstack([h_transform(P[t + 1], P[plan.left[t]], P[plan.right[t]],
                                  params.mu, params.sigma, plan.a[t], plan.b[t])
                      for t in range(plan.T)])


def log_jacobian(surface: QuantileSurface, params: MappingParams, plan: LevelPlan) -> float:
    if surface.scale != "real":
        raise ValueError("log_jacobian works on real-scale surfaces")
    P = _padded_real(surface.values)
    total = 0.0
    for t in range(plan.T):
        f = log_h_derivative(P[t + 1], P[plan.left[t]], P[plan.right[t]],
                             params.mu, params.sigma, plan.a[t], plan.b[t])
        if not np.all(np.isfinite(f)):
            raise ValueError(f"non-finite Jacobian factor at level {plan.levels[t]}")
        total += float(np.sum(f))
    return total


def _as_rows(corr, T):
    return list(corr) if isinstance(corr, (list, tuple)) else [corr] * T


def log_prior_density(surface: QuantileSurface, corr, params: MappingParams,
                      plan: LevelPlan) -> float:
    """Joint log density of a real-scale surface at the sites.

    ``corr`` is a CorrelationMatrix or one per level. Crossing surfaces
    get -inf.
    """
    if np.any(np.diff(surface.values, axis=0) <= 0.0):
        return -np.inf
    corrs = _as_rows(corr, plan.T)
    z = latent_surface(surface, params, plan)
    gp = sum(float(corrs[t].logpdf(z[t])) for t in range(plan.T))
    return gp + log_jacobian(surface, params, plan)


def uniform_row_terms(U: np.ndarray, plan: LevelPlan, corrs: Sequence[CorrelationMatrix],
                      rows=None):
    """Per-level log prior terms of a uniform-scale surface and its latent rows.

    Returns ``(terms, z)`` for the requested ``rows``; a term is -inf when
    the level leaves its parent interval.
    """
    rows = np.arange(plan.T) if rows is None else np.asarray(rows)
    n = U.shape[1]
    P = np.empty((plan.T + 2, n))
    P[0] = 0.0
    P[1:-1] = U
    P[-1] = 1.0
    lo = P[plan.left[rows]]
    hi = P[plan.right[rows]]
    width = hi - lo
    r = (P[rows + 1] - lo) / width
    rc = (hi - P[rows + 1]) / width
    a = plan.a[rows, None]
    b = plan.b[rows, None]
    ok = np.all((r > 0.0) & (rc > 0.0), axis=1) & np.all(width > 0.0, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = latent_from_relative(r, rc, a, b)
        jac = np.sum(0.5 * z * z + LOG_SQRT_2PI + log_beta_pdf(r, a, b, rc) - np.log(width),
                     axis=1)
    if all(corrs[t] is corrs[rows[0]] for t in rows):
        gp = corrs[rows[0]].logpdf(z)
    else:
        gp = np.array([corrs[t].logpdf(z[i]) for i, t in enumerate(rows)])
    terms = np.where(ok, gp + jac, -np.inf)
    return terms, z


def forward_row(z, lower, upper, a, b):
    """Uniform-scale quantile at latent ``z`` inside ``(lower, upper)``.

    Positive ``z`` is mapped from the upper end so both tails keep precision.
    """
    z = np.asarray(z, dtype=float)
    tail = np.clip(ndtr(-np.abs(z)), U_CLAMP, 0.5)
    width = upper - lower
    from_low = lower + width * betaincinv(a, b, tail)
    from_high = upper - width * betaincinv(b, a, tail)
    return np.where(z <= 0.0, from_low, from_high)
