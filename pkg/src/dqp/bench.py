"""Simulation-study harness, AMSE accounting and the cyclone analysis pipeline."""

from __future__ import annotations

import csv
import logging
import multiprocessing
import warnings
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import betaincinv, ndtri

from .inference import (
    LinearFit,
    coefficient_rows,
    linearize,
    posterior_mean_curves,
    quantile_summary_rows,
    slope_intervals,
    write_rows,
)
from .likelihood import Dataset
from .mcmc import MCMCConfig, PosteriorDraws, TrendPrior, plugin_sigma, run_chain
from .prior import design_matrix
from .pyramid import PyramidLayout, build_oblique_layout
from .stochastic import ConcentrationRule, CorrelationKernel, martingale_alphas

log = logging.getLogger(__name__)

LEVELS = {3: (0.25, 0.50, 0.75), 7: (0.05, 0.10, 0.25, 0.50, 0.75, 0.90, 0.95)}
CYCLONE_LEVELS = (0.05, 0.10, 0.20, 0.25, 0.30, 0.35, 0.40, 0.50,
                  0.60, 0.65, 0.70, 0.75, 0.80, 0.90, 0.95)
CYCLONE_RANGE = (29.8, 159.5)
GRID = np.arange(1.0, 11.0)
METHODS = ("DQP", "DQP-lm")
REPORT_COLUMNS = ("scenario", "T", "n", "method", "amse", "se")


# -- scenarios ---------------------------------------------------------------

def t_quantile(p, df: float) -> np.ndarray:
    """Student-t quantile through the inverse regularized incomplete beta function."""
    p = np.asarray(p, dtype=float)
    tail = np.minimum(p, 1.0 - p)
    x = betaincinv(0.5 * df, 0.5, 2.0 * tail)
    with np.errstate(divide="ignore"):
        mag = np.sqrt(df * (1.0 - x) / x)
    return np.where(p < 0.5, -mag, np.where(p > 0.5, mag, 0.0))


_SCENARIOS = {
    "1-1": ("linear", False, None), "1-2": ("linear", False, 20.0), "1-3": ("linear", False, 3.0),
    "2-1": ("linear", True, None), "2-2": ("linear", True, 20.0), "2-3": ("linear", True, 3.0),
    "3-1": ("sin", False, None), "3-2": ("exp_inv", False, None),
}


@dataclass(frozen=True)
class ScenarioSpec:
    """One simulation design: ``replicates`` responses at each x in 1..10."""

    id: str
    replicates: int = 10

    def __post_init__(self):
        if self.id not in _SCENARIOS:
            raise ValueError(f"unknown scenario {self.id!r}; choose from {sorted(_SCENARIOS)}")
        if self.replicates < 1:
            raise ValueError("replicates must be positive")

    @property
    def n(self) -> int:
        return GRID.size * self.replicates

    @property
    def df(self) -> float | None:
        """Degrees of freedom of the t error law; None for normal errors."""
        return _SCENARIOS[self.id][2]

    def trend(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        kind = _SCENARIOS[self.id][0]
        if kind == "sin":
            return np.sin(x)
        if kind == "exp_inv":
            return np.exp(1.0 / x)
        return x

    def scale(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if _SCENARIOS[self.id][1]:
            return np.where((x >= 5) & (x <= 6), np.sqrt(10.0), 1.0)
        return np.ones_like(x)

    def error_quantile(self, tau) -> np.ndarray:
        return ndtri(tau) if self.df is None else t_quantile(tau, self.df)


def true_quantiles(spec: ScenarioSpec, levels, x=GRID) -> np.ndarray:
    """Exact Q_x(tau) as a (T, len(x)) array."""
    levels = np.asarray(levels, dtype=float)
    x = np.asarray(x, dtype=float)
    return spec.trend(x)[None, :] + spec.scale(x)[None, :] * spec.error_quantile(levels)[:, None]


def generate(spec: ScenarioSpec, rng: np.random.Generator) -> Dataset:
    x = np.repeat(GRID, spec.replicates)
    eps = (rng.standard_normal(x.size) if spec.df is None
           else rng.standard_t(spec.df, size=x.size))
    return Dataset(x, spec.trend(x) + spec.scale(x) * eps)


# -- error accounting ----------------------------------------------------------

@dataclass(frozen=True)
class AMSEResult:
    amse: float
    se: float
    mse_tau: np.ndarray          # (T,)
    mse_x: np.ndarray            # (T, X)
    per_dataset: np.ndarray      # (S,)


def amse(estimates, truths, weights=None) -> AMSEResult:
    """AMSE of per-dataset estimates (S, T, X) against truths (T, X).

    ``weights`` over x default to 1/X (0.1 on the ten-point grid); the
    standard error is the SD of per-dataset AMSEs over sqrt(S).
    """
    est = np.asarray(estimates, dtype=float)
    truth = np.asarray(truths, dtype=float)
    if est.ndim != 3 or est.shape[1:] != truth.shape:
        raise ValueError(f"estimates {est.shape} do not align with truths {truth.shape}")
    X = truth.shape[1]
    w = np.full(X, 1.0 / X) if weights is None else np.asarray(weights, dtype=float)
    sq = (est - truth) ** 2
    mse_x = sq.mean(axis=0)
    mse_tau = mse_x @ w
    per_dataset = (sq @ w).mean(axis=1)
    S = est.shape[0]
    se = float(per_dataset.std(ddof=1) / np.sqrt(S)) if S > 1 else float("nan")
    return AMSEResult(float(mse_tau.mean()), se, mse_tau, mse_x, per_dataset)


def reference_table() -> list[dict]:
    """Published AMSE values of the six compared methods (static context rows)."""
    text = resources.files("dqp").joinpath("data/reference_amse.csv").read_text()
    rows = list(csv.DictReader(text.splitlines()))
    for r in rows:
        r["T"], r["n"] = int(r["T"]), int(r["n"])
        r["amse"], r["se"] = float(r["amse"]), float(r["se"])
    return rows


# -- fitting -------------------------------------------------------------------

@dataclass(frozen=True)
class FitSettings:
    """Prior and sampler settings shared by the study and the cyclone analysis."""

    levels: tuple[float, ...] = LEVELS[3]
    kernel: CorrelationKernel = CorrelationKernel("gaussian", 5.0)
    concentration: ConcentrationRule = ConcentrationRule()
    trend_prior: TrendPrior = field(default_factory=lambda: TrendPrior((5.0, 0.0), (3.0, 3.0)))
    sigma_mode: str = "site_sd"        # site_sd | pooled | ols | sample | fixed
    sigma_value: float | None = None
    trend: str = "linear"
    mcmc: MCMCConfig = field(default_factory=MCMCConfig)
    layout: PyramidLayout | None = None      # oblique over ``levels`` when absent
    beta_rule: str = "martingale"            # or "literal": (alpha_1, 1 - alpha_1)


def plug_in_scales(data: Dataset, mode: str, value: float | None = None) -> np.ndarray:
    """Per-site scale used by the normal mapping."""
    if mode == "fixed":
        if value is None or not value > 0:
            raise ValueError("fixed scale mode needs a positive value")
        return np.full(data.n_sites, float(value))
    if mode in ("site_sd", "sample"):
        return plugin_sigma(data)
    if mode == "pooled":
        counts = data.site_counts()
        resid = data.y - (np.bincount(data.site_index, data.y) / counts)[data.site_index]
        dof = data.n - data.n_sites
        if dof < 1:
            raise ValueError("pooled scale needs replicated sites")
        return np.full(data.n_sites, np.sqrt(np.sum(resid ** 2) / dof))
    if mode == "ols":
        sd = data.site_sd()
        ok = np.isfinite(sd)
        if ok.sum() < 2:
            raise ValueError("need at least two sites with replicates for the OLS scale model")
        D = design_matrix(data.sites)
        coef, *_ = np.linalg.lstsq(D[ok], sd[ok], rcond=None)
        fitted = D @ coef
        if np.any(fitted <= 0):
            raise ValueError(f"OLS scale model gives non-positive scales at "
                             f"{data.sites[fitted <= 0].ravel().tolist()}")
        return fitted
    raise ValueError(f"unknown sigma mode {mode!r}")


def fit_dqp(data: Dataset, settings: FitSettings, seed: int | None = None) -> PosteriorDraws:
    layout = settings.layout or build_oblique_layout(settings.levels)
    alphas = martingale_alphas(layout, settings.concentration)
    cfg = settings.mcmc if seed is None else replace(settings.mcmc, seed=int(seed))
    if settings.sigma_mode == "sample":
        cfg = replace(cfg, scale_mode="sample")
    sigma = plug_in_scales(data, settings.sigma_mode, settings.sigma_value)
    return run_chain(data, layout, settings.kernel, alphas, settings.trend_prior, cfg, sigma,
                     trend=settings.trend, beta_rule=settings.beta_rule)


def dqp_estimates(draws: PosteriorDraws) -> tuple[np.ndarray, np.ndarray]:
    """(DQP, DQP-lm) estimates on the sites: posterior mean and its linearization."""
    mean = posterior_mean_curves(draws).values
    fit = linearize(draws)
    return mean, fit.coef @ design_matrix(draws.sites).T


# -- the study -----------------------------------------------------------------

@dataclass(frozen=True)
class Cell:
    scenario: str
    T: int
    n: int

    def spec(self) -> ScenarioSpec:
        if self.n % GRID.size:
            raise ValueError("n must be a multiple of 10")
        return ScenarioSpec(self.scenario, self.n // GRID.size)


@dataclass
class StudyReport:
    rows: list[dict]
    failures: list[dict]
    results: dict = field(default_factory=dict, repr=False)

    def value(self, scenario: str, T: int, n: int, method: str) -> float:
        for r in self.rows:
            if (r["scenario"], r["T"], r["n"], r["method"]) == (scenario, T, n, method):
                return r["amse"]
        raise KeyError((scenario, T, n, method))

    def flagged(self) -> set[tuple]:
        return {(f["scenario"], f["T"], f["n"]) for f in self.failures}

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_rows(out / "amse_report.csv", self.rows)
        ref = reference_table()
        cells = {(r["scenario"], r["T"], r["n"]) for r in self.rows}
        write_rows(out / "reference_table.csv",
                   [r for r in ref if (r["scenario"], r["T"], r["n"]) in cells] or ref)
        with open(out / "failures.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["scenario", "T", "n", "dataset", "error"])
            w.writeheader()
            w.writerows(self.failures)


def _one_dataset(job):
    cell, settings, index, seed_seq = job
    data_seed, chain_seed = seed_seq.spawn(2)
    data = generate(cell.spec(), np.random.default_rng(data_seed))
    try:
        draws = fit_dqp(data, settings, int(chain_seed.generate_state(1)[0]))
    except Exception as exc:                      # recorded, the study goes on
        return index, None, f"{type(exc).__name__}: {exc}"
    return index, dqp_estimates(draws), draws.acceptance


def run_study(cells: Sequence[Cell], n_datasets: int, settings: FitSettings, seed: int = 0,
              processes: int = 1, full_scale: bool = False) -> StudyReport:
    """AMSE +- s.e. of DQP and DQP-lm for every cell.

    Each (cell, dataset) gets its own child of ``SeedSequence(seed)``, so results
    do not depend on ``processes``.
    """
    if full_scale:
        warnings.warn("full-scale settings (100 datasets, 100k iterates) take days on one core",
                      RuntimeWarning, stacklevel=2)
        settings = replace(settings, mcmc=replace(settings.mcmc, warmup=1000,
                                                  iterations=100_000, thin=100))
        n_datasets = 100
    if n_datasets < 1:
        raise ValueError("need at least one dataset per cell")
    root = np.random.SeedSequence(seed)
    cell_seeds = root.spawn(len(cells))
    jobs = []
    for cell, cs in zip(cells, cell_seeds):
        cell_settings = replace(settings, levels=LEVELS[cell.T])
        for i, ds in enumerate(cs.spawn(n_datasets)):
            jobs.append((cell, cell_settings, i, ds))
    if processes > 1:
        with multiprocessing.get_context("spawn").Pool(processes) as pool:
            outputs = pool.map(_one_dataset, jobs, chunksize=1)
    else:
        outputs = [_one_dataset(j) for j in jobs]

    rows, failures, results = [], [], {}
    for c, cell in enumerate(cells):
        mine = outputs[c * n_datasets:(c + 1) * n_datasets]
        ok = [o for o in mine if o[1] is not None]
        for index, _, err in (o for o in mine if o[1] is None):
            failures.append({"scenario": cell.scenario, "T": cell.T, "n": cell.n,
                             "dataset": index, "error": err})
            log.warning("cell %s dataset %d failed: %s", cell, index, err)
        if not ok:
            continue
        truth = true_quantiles(cell.spec(), LEVELS[cell.T])
        for m, method in enumerate(METHODS):
            res = amse(np.stack([o[1][m] for o in ok]), truth)
            results[(cell.scenario, cell.T, cell.n, method)] = res
            rows.append({"scenario": cell.scenario, "T": cell.T, "n": cell.n,
                         "method": method, "amse": res.amse, "se": res.se})
        log.info("cell %s done (%d/%d datasets)", cell, len(ok), n_datasets)
    return StudyReport(rows, failures, results)


# -- CSV inputs ----------------------------------------------------------------

class CsvFormatError(ValueError):
    pass


def read_numeric_csv(path, columns: Sequence[str]) -> np.ndarray:
    """Named numeric columns as an (rows, len(columns)) array; errors cite line numbers."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file") from None
        missing = [c for c in columns if c not in header]
        if missing:
            raise CsvFormatError(f"{path}:1: missing column(s) {missing}; header is {header}")
        idx = [header.index(c) for c in columns]
        out = []
        for row in reader:
            line = reader.line_num
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) != len(header):
                raise CsvFormatError(f"{path}:{line}: expected {len(header)} fields, "
                                     f"got {len(row)}")
            try:
                vals = [float(row[i]) for i in idx]
            except ValueError:
                raise CsvFormatError(f"{path}:{line}: non-numeric value in {row}") from None
            if not all(np.isfinite(vals)):
                raise CsvFormatError(f"{path}:{line}: non-finite value in {row}")
            out.append(vals)
    if not out:
        raise CsvFormatError(f"{path}: no data rows")
    return np.asarray(out)


def read_xy_csv(path) -> Dataset:
    a = read_numeric_csv(path, ("x", "y"))
    return Dataset(a[:, 0], a[:, 1])


# -- cyclone analysis ----------------------------------------------------------

def cyclone_settings(mcmc: MCMCConfig | None = None) -> FitSettings:
    """Prior choices for the wind-speed analysis (year counted from the first year)."""
    return FitSettings(levels=CYCLONE_LEVELS, kernel=CorrelationKernel("exponential", 5.0),
                       trend_prior=TrendPrior((75.0, 0.5), (15.0, 2.0)), sigma_mode="ols",
                       mcmc=mcmc or MCMCConfig(warmup=1000, iterations=20000, thin=20))


def read_cyclone_csv(path, year_origin: int | None = None) -> tuple[Dataset, int]:
    """Load ``year,wind_speed``; x = year - origin + 1 with origin defaulting to the first year."""
    a = read_numeric_csv(path, ("year", "wind_speed"))
    year, y = a[:, 0], a[:, 1]
    lo, hi = CYCLONE_RANGE
    if y.min() < lo or y.max() > hi:
        warnings.warn(f"wind speeds span [{y.min()}, {y.max()}], outside the expected "
                      f"[{lo}, {hi}]", UserWarning, stacklevel=2)
    origin = int(year.min()) if year_origin is None else int(year_origin)
    return Dataset(year - origin + 1.0, y), origin


@dataclass
class CycloneResult:
    draws: PosteriorDraws
    fit: LinearFit
    origin: int

    def slope(self, tau: float) -> float:
        return self.fit.slope(tau)


def cyclone_pipeline(path, settings: FitSettings | None = None, out_dir=None,
                     year_origin: int | None = None) -> CycloneResult:
    """Fit the 15-level model to the wind-speed file and summarize slopes."""
    settings = settings or cyclone_settings()
    data, origin = read_cyclone_csv(path, year_origin)
    log.info("cyclone data: %d rows, %d years", data.n, data.n_sites)
    draws = fit_dqp(data, settings)
    fit = slope_intervals(draws, 0.95)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_rows(out / "quantiles.csv", quantile_summary_rows(draws.Q, draws.sites,
                                                               draws.levels))
        write_rows(out / "slopes.csv", coefficient_rows(fit))
        draws.to_jsonl(out / "draws.jsonl", {"year_origin": origin})
    return CycloneResult(draws, fit, origin)
