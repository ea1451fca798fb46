"""Posterior summaries: mean curves, linearized fits, intervals, prediction at new x."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh
from scipy.special import ndtri

from .mcmc import PosteriorDraws
from .prior import (
    QuantileSurface,
    check_noncrossing,
    design_matrix,
    forward_row,
    level_plan,
    row_correlations,
    row_kernels,
    uniform_row_terms,
)
from .pyramid import QuantileGrid
from .stochastic import AlphaSchedule, KernelSpec, as_points, factorize

MIN_INTERVAL_DRAWS = 40
VARIANCE_TOL = 1e-10


class RankError(np.linalg.LinAlgError):
    pass


class KrigingError(ValueError):
    pass


# -- posterior means -------------------------------------------------------

class StreamingMean:
    """One-pass running mean (Welford update) of equally shaped arrays."""

    def __init__(self):
        self.count = 0
        self.mean = None

    def update(self, value) -> None:
        value = np.asarray(value, dtype=float)
        self.count += 1
        if self.mean is None:
            self.mean = value.copy()
        else:
            self.mean += (value - self.mean) / self.count


def posterior_mean_curves(draws: PosteriorDraws, *, streaming: bool = False) -> QuantileSurface:
    """Elementwise posterior mean of the response-scale quantile surfaces."""
    if draws.n_draws == 0:
        raise ValueError("no draws to average")
    if streaming:
        acc = StreamingMean()
        for d in range(draws.n_draws):
            acc.update(draws.mu[d] + draws.sigma[d] * ndtri(draws.U[d]))
        mean = acc.mean
    else:
        mean = draws.Q.mean(axis=0)
    return QuantileSurface(mean, draws.levels, "real", draws.layout)


# -- linearization ---------------------------------------------------------

@dataclass(frozen=True)
class LinearFit:
    """Coefficients (intercept first) of the best linear QR curve per level.

    ``lower``/``upper`` hold credible bounds when they were computed.
    """

    levels: tuple[float, ...]
    coef: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    interval_level: float | None = None

    def __post_init__(self):
        coef = np.atleast_2d(np.asarray(self.coef, dtype=float))
        if coef.shape[0] != len(self.levels):
            raise ValueError("one coefficient row per level is required")
        object.__setattr__(self, "coef", coef)
        for name in ("lower", "upper"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=float)
                if v.shape != coef.shape:
                    raise ValueError(f"{name} bounds do not match the coefficients")
                object.__setattr__(self, name, v)

    def row(self, tau: float) -> int:
        hits = np.flatnonzero(np.isclose(self.levels, tau, rtol=0.0, atol=1e-12))
        if hits.size == 0:
            raise KeyError(f"level {tau} is not among {self.levels}")
        return int(hits[0])

    def slope(self, tau: float, j: int = 1) -> float:
        return float(self.coef[self.row(tau), j])


def _weights(sites: np.ndarray, weights) -> np.ndarray:
    w = np.ones(sites.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (sites.shape[0],) or np.any(w < 0) or not w.sum() > 0:
        raise ValueError("weights must be one non-negative value per site with positive total")
    return w / w.sum()


def ls_coefficients(values, sites, weights=None) -> np.ndarray:
    """Weighted least-squares coefficients of ``values`` (sites on the last axis) on (1, x)."""
    D = design_matrix(sites)
    w = _weights(D, weights)
    A = D * np.sqrt(w)[:, None]
    rank = np.linalg.matrix_rank(A)
    if rank < D.shape[1]:
        raise RankError(f"design has rank {rank} but {D.shape[1]} coefficients are needed "
                        f"({int(np.count_nonzero(w))} sites carry weight)")
    # normal equations applied to every row at once; solution is linear in values
    proj = np.linalg.solve(D.T @ (w[:, None] * D), D.T * w)
    return np.asarray(values, dtype=float) @ proj.T


def _site_weights(draws: PosteriorDraws, weights):
    return draws.site_weights if weights is None else weights


def linearize(source, sites=None, weights=None, levels=None) -> LinearFit:
    """Linear fit to the posterior-mean surface.

    ``source`` is a :class:`PosteriorDraws` (sites and empirical weights come
    with it) or a real-scale surface/array paired with ``sites``.
    """
    if isinstance(source, PosteriorDraws):
        surface = posterior_mean_curves(source)
        sites = source.sites
        weights = _site_weights(source, weights)
        levels = source.levels
    elif isinstance(source, QuantileSurface):
        surface, levels = source, source.levels
    else:
        if levels is None:
            raise ValueError("levels are required for a raw array")
        surface = QuantileSurface(source, levels, "real")
    if sites is None:
        raise ValueError("sites are required")
    return LinearFit(tuple(levels), ls_coefficients(surface.values, as_points(sites), weights))


def linearize_draws(draws: PosteriorDraws, weights=None) -> np.ndarray:
    """Per-draw coefficients, shape (draws, T, p + 1)."""
    return ls_coefficients(draws.Q, draws.sites, _site_weights(draws, weights))


def slope_intervals(draws: PosteriorDraws, level: float = 0.95, weights=None) -> LinearFit:
    """Mean-surface coefficients with equal-tailed percentile intervals over draws.

    Percentiles use numpy's default (inclusive, linear interpolation).
    """
    if draws.n_draws < MIN_INTERVAL_DRAWS:
        raise ValueError(f"need at least {MIN_INTERVAL_DRAWS} draws, got {draws.n_draws}")
    if not 0.0 < level < 1.0:
        raise ValueError("interval level must be in (0, 1)")
    per_draw = linearize_draws(draws, weights)
    tail = 50.0 * (1.0 - level)
    lo, hi = np.percentile(per_draw, [tail, 100.0 - tail], axis=0)
    est = linearize(draws, weights=weights).coef
    return LinearFit(draws.levels, est, lo, hi, level)


# -- prediction at new covariate values ------------------------------------

@dataclass(frozen=True)
class Prediction:
    """Posterior predictive quantiles at ``x_star``; arrays are (draws, T, m)."""

    x_star: np.ndarray
    levels: tuple[float, ...]
    U: np.ndarray
    Z: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def Q(self) -> np.ndarray:
        return self.mu[:, None, :] + self.sigma[:, None, :] * ndtri(self.U)

    def grid(self, d: int, j: int) -> QuantileGrid:
        return QuantileGrid(self.levels, self.Q[d, :, j], "real",
                            float(self.mu[d, j]), float(self.sigma[d, j]))


@dataclass(frozen=True)
class _Krige:
    weights: np.ndarray      # (m, S): kriging mean = weights @ z
    root: np.ndarray         # (m, m): conditional covariance = root @ root.T


def _kriging(kernel, sites, x_star) -> _Krige:
    corr = factorize(kernel(sites, sites))
    cross = kernel(sites, x_star)                         # (S, m)
    weights = corr.solve(cross).T
    cond = kernel(x_star, x_star) - weights @ cross
    cond = 0.5 * (cond + cond.T)
    diag = np.diag(cond)
    if np.any(diag < -VARIANCE_TOL):
        raise KrigingError(f"negative conditional variance {diag.min():.3e}")
    vals, vecs = eigh(cond)
    if vals.min() < -VARIANCE_TOL:
        raise KrigingError(f"conditional covariance has eigenvalue {vals.min():.3e}")
    return _Krige(weights, vecs * np.sqrt(np.clip(vals, 0.0, None)))


def latent_from_draws(draws: PosteriorDraws, plan, corrs) -> np.ndarray:
    """Stored latent rows, re-derived from ``U`` where they are missing."""
    Z = draws.Z.copy()
    for d in np.flatnonzero(np.any(~np.isfinite(Z), axis=(1, 2))):
        _, Z[d] = uniform_row_terms(draws.U[d], plan, corrs)
    return Z


def predict_new_x(draws: PosteriorDraws, x_star, kernels: KernelSpec, alphas: AlphaSchedule,
                  rng: np.random.Generator, *, sigma_star=None,
                  beta_rule: str = "martingale") -> Prediction:
    """Draw the quantile grid at each ``x_star`` from its conditional prior given each draw.

    ``sigma_star`` defaults to linear interpolation of each draw's site scales
    (one-dimensional covariates only).
    """
    if draws.layout is None:
        raise ValueError("draws carry no pyramid layout")
    layout = draws.layout
    x_star = as_points(x_star)
    sites = draws.sites
    if x_star.shape[1] != sites.shape[1]:
        raise ValueError("x_star has the wrong covariate dimension")
    plan = level_plan(layout, alphas, beta_rule)
    Z_sites = latent_from_draws(draws, plan, row_correlations(layout, kernels, sites))
    kerns = row_kernels(layout, kernels)
    krige = {k: _kriging(k, sites, x_star) for k in set(kerns)}

    D, T, m = draws.n_draws, plan.T, x_star.shape[0]
    Z = np.empty((D, T, m))
    for t, k in enumerate(kerns):
        kr = krige[k]
        Z[:, t] = Z_sites[:, t] @ kr.weights.T + rng.standard_normal((D, m)) @ kr.root.T
    P = np.empty((D, T + 2, m))
    P[:, 0], P[:, -1] = 0.0, 1.0
    for t in plan.order:
        P[:, t + 1] = forward_row(Z[:, t], P[:, plan.left[t]], P[:, plan.right[t]],
                                  plan.a[t], plan.b[t])
    U = P[:, 1:-1]

    if draws.trend == "linear":
        mu = draws.beta @ design_matrix(x_star).T
    else:
        mu = np.repeat(draws.beta[:, :1], m, axis=1)
    if sigma_star is None:
        if sites.shape[1] != 1:
            raise ValueError("sigma_star is required for multivariate covariates")
        order = np.argsort(sites[:, 0])
        sigma = np.array([np.interp(x_star[:, 0], sites[order, 0], s[order])
                          for s in draws.sigma])
    else:
        sigma = np.broadcast_to(np.asarray(sigma_star, dtype=float), (D, m)).copy()
    out = Prediction(x_star, draws.levels, U, Z, mu, sigma)
    check_noncrossing(out.Q)
    return out


# -- CSV summaries -----------------------------------------------------------

def _x_columns(sites: np.ndarray) -> list[str]:
    return ["x"] if sites.shape[1] == 1 else [f"x{j + 1}" for j in range(sites.shape[1])]


def quantile_summary_rows(values: np.ndarray, sites, levels, level: float = 0.95) -> list[dict]:
    """Rows (tau, x, mean, lower, upper) from per-draw surfaces (draws, T, S)."""
    sites = as_points(sites)
    tail = 50.0 * (1.0 - level)
    mean = values.mean(axis=0)
    lo, hi = np.percentile(values, [tail, 100.0 - tail], axis=0)
    names = _x_columns(sites)
    rows = []
    for t, tau in enumerate(levels):
        for s in range(sites.shape[0]):
            row = {"tau": tau, **{n: sites[s, j] for j, n in enumerate(names)}}
            row.update(mean=mean[t, s], lower=lo[t, s], upper=hi[t, s])
            rows.append(row)
    return rows


def coefficient_rows(fit: LinearFit) -> list[dict]:
    """Rows (tau, coefficient, estimate, lower, upper); coefficient 0 is the intercept."""
    rows = []
    for t, tau in enumerate(fit.levels):
        for j in range(fit.coef.shape[1]):
            rows.append({"tau": tau, "coefficient": "intercept" if j == 0 else f"slope{j}",
                         "estimate": fit.coef[t, j],
                         "lower": np.nan if fit.lower is None else fit.lower[t, j],
                         "upper": np.nan if fit.upper is None else fit.upper[t, j]})
    return rows


def write_rows(path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("nothing to write")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v
                             for k, v in row.items()})


def read_rows(path) -> list[dict]:
    """Inverse of :func:`write_rows`; numeric fields come back as floats."""
    def conv(v):
        try:
            return float(v)
        except ValueError:
            return v
    with open(path, newline="") as fh:
        return [{k: conv(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def fit_from_rows(rows: list[dict]) -> LinearFit:
    levels = sorted({r["tau"] for r in rows})
    names = list(dict.fromkeys(r["coefficient"] for r in rows))
    shape = (len(levels), len(names))
    arrs = {k: np.full(shape, np.nan) for k in ("estimate", "lower", "upper")}
    for r in rows:
        i, j = levels.index(r["tau"]), names.index(r["coefficient"])
        for k in arrs:
            arrs[k][i, j] = r[k]
    has_bounds = not np.all(np.isnan(arrs["lower"]))
    return LinearFit(tuple(levels), arrs["estimate"],
                     arrs["lower"] if has_bounds else None,
                     arrs["upper"] if has_bounds else None)
