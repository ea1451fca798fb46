"""Metropolis-Hastings sampler for the DQP posterior.

The chain state keeps the pyramid on the uniform scale (``U``), the trend
coefficients ``beta`` and the per-site scales ``sigma``. The response-scale
surface is ``Q = mu + sigma * ndtri(U)``. Level updates move one row of
``U`` with all other rows fixed; trend and scale updates keep ``U`` fixed,
so the pyramid prior drops out of their acceptance ratios.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import ndtri

from .likelihood import Dataset, loglik_uniform
from .prior import (
    LOG_SQRT_2PI,
    LevelPlan,
    MappingParams,
    QuantileSurface,
    check_noncrossing,
    design_matrix,
    forward_row,
    level_plan,
    log_beta_pdf,
    row_correlations,
    uniform_row_terms,
)
from .pyramid import PyramidLayout
from .stochastic import U_CLAMP, AlphaSchedule, KernelSpec

log = logging.getLogger(__name__)

Z_LIMIT = float(-ndtri(U_CLAMP))


class InitializationError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrendPrior:
    """Normal prior on the trend coefficients (intercept first)."""

    mean: Sequence[float]
    var: Sequence[float]

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        var = np.atleast_1d(np.asarray(self.var, dtype=float))
        if var.ndim == 1:
            var = np.diag(var)
        if var.shape != (mean.size, mean.size):
            raise ValueError("trend prior variance does not match the mean")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)
        object.__setattr__(self, "_prec", np.linalg.inv(var))

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(np.diag(self.var))

    def logpdf(self, beta: np.ndarray) -> float:
        d = beta - self.mean
        return float(-0.5 * d @ self._prec @ d)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.multivariate_normal(self.mean, self.var, size=size, method="cholesky")


@dataclass(frozen=True)
class ScalePrior:
    """Independent log-normal priors on the site scales, centred at ``center``."""

    center: Sequence[float]
    log_sd: float = 0.5

    def logpdf(self, sigma: np.ndarray) -> float:
        ls = np.log(sigma)
        d = (ls - np.log(np.asarray(self.center, dtype=float))) / self.log_sd
        return float(np.sum(-0.5 * d * d - ls))


@dataclass
class MCMCConfig:
    warmup: int = 1000
    iterations: int = 20000
    thin: int = 20
    level_steps: Sequence[float] | None = None
    trend_blocks: Sequence[Sequence[int]] | None = None
    trend_step: float | Sequence[float] | None = None
    scale_mode: str = "plugin"
    scale_step: float = 0.1
    seed: int = 0
    use_likelihood: bool = True
    update_levels: bool = True
    update_trend: bool = True

    def __post_init__(self):
        if self.warmup < 0 or self.iterations <= 0 or self.thin <= 0:
            raise ValueError("warmup must be >= 0; iterations and thin must be positive")
        if self.iterations % self.thin:
            raise ValueError("thin must divide the number of sampling iterations")
        if self.scale_mode not in ("plugin", "sample"):
            raise ValueError(f"unknown scale mode {self.scale_mode!r}")

    def step_for_level(self, m: int) -> float:
        if self.level_steps is None:
            return 0.2 / np.sqrt(m)
        return float(self.level_steps[m - 1])


@dataclass
class ChainState:
    U: np.ndarray
    Z: np.ndarray
    W: np.ndarray            # ndtri(U): standardized quantiles
    beta: np.ndarray
    sigma: np.ndarray
    mu: np.ndarray
    row_lp: np.ndarray
    log_lik: float
    log_trend_prior: float
    log_scale_prior: float

    @property
    def Q(self) -> np.ndarray:
        return self.mu + self.sigma * self.W

    @property
    def log_prior(self) -> float:
        return float(self.row_lp.sum()) + self.log_trend_prior + self.log_scale_prior

    @property
    def log_posterior(self) -> float:
        return self.log_prior + self.log_lik

    def copy(self) -> "ChainState":
        return ChainState(self.U.copy(), self.Z.copy(), self.W.copy(), self.beta.copy(),
                          self.sigma.copy(), self.mu.copy(), self.row_lp.copy(),
                          self.log_lik, self.log_trend_prior, self.log_scale_prior)


@dataclass
class MoveStats:
    attempts: int = 0
    accepts: int = 0
    degenerate: int = 0

    @property
    def rate(self) -> float:
        return self.accepts / self.attempts if self.attempts else float("nan")


class DQPModel:
    """Posterior of a DQP fitted on the distinct covariate sites of ``data``."""

    def __init__(self, data: Dataset, layout: PyramidLayout, kernels: KernelSpec,
                 alphas: AlphaSchedule, trend_prior: TrendPrior, sigma,
                 config: MCMCConfig, *, scale_prior: ScalePrior | None = None,
                 trend: str = "linear", beta_rule: str = "martingale"):
        self.data = data
        self.layout = layout
        self.kernels = kernels
        self.alphas = alphas
        self.plan: LevelPlan = level_plan(layout, alphas, beta_rule)
        self.corrs = row_correlations(layout, kernels, data.sites)
        self.trend = trend
        if trend == "linear":
            self.design = design_matrix(data.sites)
        elif trend == "constant":
            self.design = np.ones((data.n_sites, 1))
        else:
            raise ValueError(f"unknown trend form {trend!r}")
        self.trend_prior = trend_prior
        if trend_prior.mean.size != self.design.shape[1]:
            raise ValueError("trend prior dimension does not match the trend design")
        self.sigma0 = np.broadcast_to(np.asarray(sigma, dtype=float), (data.n_sites,)).copy()
        if np.any(~(self.sigma0 > 0)):
            raise ValueError("plug-in scales must be positive")
        self.config = config
        if config.scale_mode == "sample" and scale_prior is None:
            scale_prior = ScalePrior(self.sigma0)
        self.scale_prior = scale_prior
        self.dtau = np.diff(np.concatenate(([0.0], self.plan.levels, [1.0])))
        blocks = config.trend_blocks or [list(range(self.design.shape[1]))]
        self.trend_blocks = [np.asarray(b, dtype=int) for b in blocks]
        step = config.trend_step
        self.trend_step = (0.1 * trend_prior.sd if step is None
                           else np.broadcast_to(np.asarray(step, float), trend_prior.sd.shape))
        self.level_step = np.array([config.step_for_level(m) for m in self.plan.depth])
        self.stats = {"level": MoveStats(), "trend": MoveStats(), "scale": MoveStats()}

    # -- state evaluation -------------------------------------------------

    def _loglik(self, Q, U, mu, sigma) -> float:
        if not self.config.use_likelihood:
            return 0.0
        return loglik_uniform(self.data.y, self.data.site_index, Q, U, mu, sigma, self.dtau)

    def _scale_lp(self, sigma) -> float:
        if self.config.scale_mode == "plugin":
            return 0.0
        return self.scale_prior.logpdf(sigma)

    def make_state(self, U, beta, sigma=None) -> ChainState:
        U = np.array(U, dtype=float)
        beta = np.array(beta, dtype=float)
        sigma = self.sigma0.copy() if sigma is None else np.array(sigma, dtype=float)
        row_lp, Z = uniform_row_terms(U, self.plan, self.corrs)
        W = ndtri(U)
        mu = self.design @ beta
        ll = self._loglik(mu + sigma * W, U, mu, sigma)
        return ChainState(U, Z, W, beta, sigma, mu, row_lp, ll,
                          self.trend_prior.logpdf(beta), self._scale_lp(sigma))

    def initial_state(self) -> ChainState:
        """Prior-mean start: every level at its own tau at every site, beta at its prior mean."""
        U = np.repeat(self.plan.levels[:, None], self.data.n_sites, axis=1)
        state = self.make_state(U, self.trend_prior.mean)
        parts = {"pyramid prior": state.row_lp.sum(), "likelihood": state.log_lik,
                 "trend prior": state.log_trend_prior, "scale prior": state.log_scale_prior}
        bad = [k for k, v in parts.items() if not np.isfinite(v)]
        if bad:
            raise InitializationError(f"non-finite log posterior at initialization: {bad}")
        return state

    def recompute(self, state: ChainState) -> ChainState:
        return self.make_state(state.U, state.beta, state.sigma)

    # -- moves ------------------------------------------------------------

    def update_quantile_level(self, state: ChainState, t: int, rng: np.random.Generator,
                              z_proposal: np.ndarray | None = None) -> ChainState:
        """Random-walk move of row ``t`` in latent space; neighbours stay fixed."""
        st = self.stats["level"]
        st.attempts += 1
        plan = self.plan
        if z_proposal is None:
            eta = rng.standard_normal(state.U.shape[1])
            z_proposal = state.Z[t] + self.level_step[t] * (self.corrs[t].chol @ eta)
        u_log = np.log(rng.random())
        if np.any(np.abs(z_proposal) >= Z_LIMIT):
            st.degenerate += 1
            return state
        S = state.U.shape[1]
        lo = state.U[plan.left[t] - 1] if plan.left[t] > 0 else np.zeros(S)
        hi = state.U[plan.right[t] - 1] if plan.right[t] <= plan.T else np.ones(S)
        row = forward_row(z_proposal, lo, hi, plan.a[t], plan.b[t])
        if np.any(row <= lo) or np.any(row >= hi):
            st.degenerate += 1
            return state
        U = state.U.copy()
        U[t] = row
        deps = plan.dependents[t]
        terms, z_deps = uniform_row_terms(U, plan, self.corrs, deps)
        if not np.all(np.isfinite(terms)):
            return state
        W = state.W.copy()
        W[t] = ndtri(row)
        Q = state.mu + state.sigma * W
        ll = self._loglik(Q, U, state.mu, state.sigma)
        row_lp = state.row_lp.copy()
        row_lp[deps] = terms
        # q(c|p)/q(p|c) in U coordinates: ratio of |dz_t/dU_t| at current over proposal
        log_q = self._log_dz(state.U, state.Z[t], t) - self._log_dz(U, z_deps[deps == t][0], t)
        log_alpha = (row_lp.sum() - state.row_lp.sum()) + (ll - state.log_lik) + log_q
        if u_log >= log_alpha:
            return state
        st.accepts += 1
        Z = state.Z.copy()
        Z[deps] = z_deps
        return replace(state, U=U, Z=Z, W=W, row_lp=row_lp, log_lik=ll)

    def _log_dz(self, U, z, t) -> float:
        plan = self.plan
        S = U.shape[1]
        lo = U[plan.left[t] - 1] if plan.left[t] > 0 else np.zeros(S)
        hi = U[plan.right[t] - 1] if plan.right[t] <= plan.T else np.ones(S)
        width = hi - lo
        r, rc = (U[t] - lo) / width, (hi - U[t]) / width
        return float(np.sum(0.5 * z * z + LOG_SQRT_2PI
                            + log_beta_pdf(r, plan.a[t], plan.b[t], rc) - np.log(width)))

    def update_trend(self, state: ChainState, block: np.ndarray,
                     rng: np.random.Generator) -> ChainState:
        st = self.stats["trend"]
        st.attempts += 1
        beta = state.beta.copy()
        beta[block] += self.trend_step[block] * rng.standard_normal(block.size)
        u_log = np.log(rng.random())
        mu = self.design @ beta
        ll = self._loglik(mu + state.sigma * state.W, state.U, mu, state.sigma)
        lp = self.trend_prior.logpdf(beta)
        if u_log >= (lp - state.log_trend_prior) + (ll - state.log_lik):
            return state
        st.accepts += 1
        return replace(state, beta=beta, mu=mu, log_lik=ll, log_trend_prior=lp)

    def update_scale(self, state: ChainState, rng: np.random.Generator) -> ChainState:
        """Per-site random walk on log sigma (no-op for plug-in scales)."""
        if self.config.scale_mode == "plugin":
            return state
        st = self.stats["scale"]
        for s in range(state.sigma.size):
            st.attempts += 1
            sigma = state.sigma.copy()
            sigma[s] *= np.exp(self.config.scale_step * rng.standard_normal())
            u_log = np.log(rng.random())
            ll = self._loglik(state.mu + sigma * state.W, state.U, state.mu, sigma)
            lp = self.scale_prior.logpdf(sigma)
            log_jac = np.log(sigma[s]) - np.log(state.sigma[s])
            if u_log < (lp - state.log_scale_prior) + (ll - state.log_lik) + log_jac:
                st.accepts += 1
                state = replace(state, sigma=sigma, log_lik=ll, log_scale_prior=lp)
        return state

    def sweep(self, state: ChainState, rng: np.random.Generator) -> ChainState:
        if self.config.update_levels:
            for t in self.plan.order:
                state = self.update_quantile_level(state, t, rng)
        if self.config.update_trend:
            for block in self.trend_blocks:
                state = self.update_trend(state, block, rng)
        return self.update_scale(state, rng)

    def run(self, check_every_state: bool = False) -> "PosteriorDraws":
        """Warmup, then keep every ``thin``-th state of ``iterations`` sweeps."""
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        state = self.initial_state()
        keep = cfg.iterations // cfg.thin
        T, S = state.U.shape
        out = {k: np.empty((keep,) + shape) for k, shape in
               (("U", (T, S)), ("Z", (T, S)), ("beta", state.beta.shape), ("sigma", (S,)),
                ("mu", (S,)), ("log_prior", ()), ("log_lik", ()))}
        j = 0
        for it in range(cfg.warmup + cfg.iterations):
            state = self.sweep(state, rng)
            if check_every_state:
                check_noncrossing(state.Q)
            kept = it >= cfg.warmup and (it - cfg.warmup + 1) % cfg.thin == 0
            if kept:
                check_noncrossing(state.Q)
                for k in ("U", "Z", "beta", "sigma", "mu"):
                    out[k][j] = getattr(state, k)
                out["log_prior"][j] = state.log_prior
                out["log_lik"][j] = state.log_lik
                j += 1
        rates = {k: {"attempts": v.attempts, "accepts": v.accepts, "degenerate": v.degenerate,
                     "rate": v.rate} for k, v in self.stats.items() if v.attempts}
        log.info("acceptance rates: %s", {k: round(v["rate"], 3) for k, v in rates.items()})
        return PosteriorDraws(tuple(self.plan.levels.tolist()), self.data.sites, out["U"], out["Z"],
                              out["beta"], out["sigma"], out["mu"], out["log_prior"],
                              out["log_lik"], rates, self.layout, self.trend,
                              self.data.site_counts().astype(float))


@dataclass
class PosteriorDraws:
    """Thinned chain output on the sites; arrays have the draw index first."""

    levels: tuple[float, ...]
    sites: np.ndarray
    U: np.ndarray
    Z: np.ndarray
    beta: np.ndarray
    sigma: np.ndarray
    mu: np.ndarray
    log_prior: np.ndarray
    log_lik: np.ndarray
    acceptance: dict = field(default_factory=dict)
    layout: PyramidLayout | None = field(default=None, repr=False)
    trend: str = "linear"
    site_weights: np.ndarray | None = None    # observation counts per site

    @property
    def n_draws(self) -> int:
        return self.U.shape[0]

    @property
    def Q(self) -> np.ndarray:
        return self.mu[:, None, :] + self.sigma[:, None, :] * ndtri(self.U)

    def surface(self, d: int) -> QuantileSurface:
        return QuantileSurface(self.Q[d], self.levels, "real", self.layout)

    def params(self, d: int) -> MappingParams:
        return MappingParams(self.mu[d], self.sigma[d], self.beta[d])

    def to_jsonl(self, path, meta: dict | None = None) -> None:
        header = {"levels": list(self.levels), "sites": self.sites.tolist(),
                  "trend": self.trend, "acceptance": self.acceptance,
                  "layout": self.layout.to_text() if self.layout else None,
                  "site_weights": (None if self.site_weights is None
                                   else self.site_weights.tolist())}
        header.update(meta or {})
        with open(path, "w") as fh:
            fh.write(json.dumps({"header": header}) + "\n")
            for d in range(self.n_draws):
                fh.write(json.dumps({
                    "U": self.U[d].tolist(), "Z": self.Z[d].tolist(),
                    "beta": self.beta[d].tolist(), "sigma": self.sigma[d].tolist(),
                    "log_prior": float(self.log_prior[d]), "log_lik": float(self.log_lik[d]),
                }) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> tuple["PosteriorDraws", dict]:
        with open(path) as fh:
            header = json.loads(fh.readline())["header"]
            rows = [json.loads(line) for line in fh if line.strip()]
        sites = np.asarray(header["sites"], dtype=float)
        trend = header.get("trend", "linear")
        beta = np.array([r["beta"] for r in rows])
        D = design_matrix(sites) if trend == "linear" else np.ones((sites.shape[0], 1))
        Z = np.array([r["Z"] if r.get("Z") is not None else np.full_like(r["U"], np.nan)
                      for r in rows])
        layout = PyramidLayout.from_text(header["layout"]) if header.get("layout") else None
        draws = cls(tuple(header["levels"]), sites, np.array([r["U"] for r in rows]), Z,
                    beta, np.array([r["sigma"] for r in rows]), beta @ D.T,
                    np.array([r["log_prior"] for r in rows]),
                    np.array([r["log_lik"] for r in rows]), header.get("acceptance", {}),
                    layout, trend, None if header.get("site_weights") is None
                    else np.asarray(header["site_weights"], dtype=float))
        return draws, header


def run_chain(data: Dataset, layout: PyramidLayout, kernels: KernelSpec,
              alphas: AlphaSchedule, trend_prior: TrendPrior, config: MCMCConfig,
              sigma=None, *, scale_prior: ScalePrior | None = None, trend: str = "linear",
              beta_rule: str = "martingale", check_every_state: bool = False) -> PosteriorDraws:
    """Run warmup plus ``config.iterations`` sweeps and keep every ``thin``-th state.

    ``sigma`` defaults to the per-site sample standard deviation.
    """
    if sigma is None:
        sigma = plugin_sigma(data)
    model = DQPModel(data, layout, kernels, alphas, trend_prior, sigma, config,
                     scale_prior=scale_prior, trend=trend, beta_rule=beta_rule)
    return model.run(check_every_state=check_every_state)


def plugin_sigma(data: Dataset) -> np.ndarray:
    """Per-site sample SD; sites with fewer than two points get the pooled SD."""
    sd = data.site_sd()
    if np.any(np.isnan(sd)):
        sd = np.where(np.isnan(sd), np.std(data.y, ddof=1), sd)
    return sd


def acceptance_rows(draws: PosteriorDraws) -> list[dict]:
    return [{"move": k, **v} for k, v in draws.acceptance.items()]

