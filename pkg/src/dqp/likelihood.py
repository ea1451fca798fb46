"""Piecewise-normal sampling density induced by a quantile surface."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .prior import QuantileSurface, MappingParams, log_norm_pdf, norm_mass
from .stochastic import as_points

MIN_PIECE_MASS = 1e-300


@dataclass(frozen=True)
class Dataset:
    """Observations (x_i, y_i); quantile surfaces live on the distinct ``sites``."""

    x: np.ndarray
    y: np.ndarray
    sites: np.ndarray = field(init=False, repr=False)
    site_index: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        x = as_points(self.x)
        y = np.asarray(self.y, dtype=float).ravel()
        if x.shape[0] != y.size:
            raise ValueError("x and y must have the same number of rows")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("data must be finite")
        sites, inverse = np.unique(x, axis=0, return_inverse=True)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "sites", sites)
        object.__setattr__(self, "site_index", inverse.ravel())

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def n_sites(self) -> int:
        return self.sites.shape[0]

    def site_counts(self) -> np.ndarray:
        return np.bincount(self.site_index, minlength=self.n_sites)

    def site_sd(self) -> np.ndarray:
        """Per-site sample standard deviation (ddof=1); NaN where a site has < 2 points."""
        out = np.full(self.n_sites, np.nan)
        for s in range(self.n_sites):
            ys = self.y[self.site_index == s]
            if ys.size > 1:
                out[s] = ys.std(ddof=1)
        return out


def _pieces(y, q_obs):
    # y in (Q_{t-1}, Q_t] -> piece t (1-based), with Q_0 = -inf, Q_{T+1} = +inf
    return np.sum(q_obs < y[None, :], axis=0)


def log_likelihood(data: Dataset, surface: QuantileSurface, params: MappingParams) -> float:
    """Log piecewise-normal density of all responses given a real-scale surface on the sites."""
    if surface.scale != "real":
        raise ValueError("log_likelihood needs a real-scale surface")
    if surface.n != data.n_sites:
        raise ValueError("surface columns must match the dataset's sites")
    T = surface.T
    s = data.site_index
    mu, sigma = params.mu[s], params.sigma[s]
    Q = surface.values[:, s]
    piece = _pieces(data.y, Q)
    Qpad = np.vstack([np.full(data.n, -np.inf), Q, np.full(data.n, np.inf)])
    cols = np.arange(data.n)
    lo = (Qpad[piece, cols] - mu) / sigma
    hi = (Qpad[piece + 1, cols] - mu) / sigma
    levels = np.concatenate(([0.0], surface.levels, [1.0]))
    dtau = np.diff(levels)[piece]
    mass = norm_mass(lo, hi)
    if np.any(mass < MIN_PIECE_MASS):
        return -np.inf
    return float(np.sum(np.log(dtau) + log_norm_pdf(data.y, mu, sigma) - np.log(mass)))


def loglik_uniform(y, site_index, Q, U, mu, sigma, dtau) -> float:
    """Same density when the surface is known on both scales (MCMC fast path).

    ``Q``/``U`` are T x S real/uniform surfaces, ``dtau`` the T + 1 level gaps.
    """
    q_obs = Q[:, site_index]
    piece = _pieces(y, q_obs)
    S = U.shape[1]
    Upad = np.vstack([np.zeros(S), U, np.ones(S)])
    mass = Upad[piece + 1, site_index] - Upad[piece, site_index]
    if np.any(mass < MIN_PIECE_MASS):
        return -np.inf
    m, sg = mu[site_index], sigma[site_index]
    return float(np.sum(np.log(dtau[piece]) + log_norm_pdf(y, m, sg) - np.log(mass)))


def piecewise_cdf_at(y, column, mu: float, sigma: float, levels) -> np.ndarray:
    """Conditional CDF at ``y`` for one site's real-scale quantiles ``column``."""
    y = np.asarray(y, dtype=float)
    column = np.asarray(column, dtype=float)
    knots = np.concatenate(([0.0], levels, [1.0]))
    piece = np.searchsorted(column, y, side="left")    # y in (Q_{piece-1}, Q_piece]
    qpad = np.concatenate(([-np.inf], column, [np.inf]))
    lo = (qpad[piece] - mu) / sigma
    hi = (qpad[piece + 1] - mu) / sigma
    frac = norm_mass(lo, (y - mu) / sigma) / norm_mass(lo, hi)
    out = knots[piece] + (knots[piece + 1] - knots[piece]) * frac
    return float(out) if out.ndim == 0 else out


def log_density_at(y, column, mu: float, sigma: float, levels) -> np.ndarray:
    """Log piecewise-normal density at ``y`` for one site."""
    y = np.asarray(y, dtype=float)
    column = np.asarray(column, dtype=float)
    knots = np.concatenate(([0.0], levels, [1.0]))
    piece = np.searchsorted(column, y, side="left")
    qpad = np.concatenate(([-np.inf], column, [np.inf]))
    mass = norm_mass((qpad[piece] - mu) / sigma, (qpad[piece + 1] - mu) / sigma)
    out = np.log(np.diff(knots)[piece]) + log_norm_pdf(y, mu, sigma) - np.log(mass)
    return float(out) if out.ndim == 0 else out
