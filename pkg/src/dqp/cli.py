"""Command-line front end: ``dqp <command> --config run.json [--seed N] [--out-dir D]``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
Results go to files in the output directory; stdout only carries progress.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench
from .config import ConfigError, RunConfig, config_from_dict, load_config, save_config
from .inference import (
    KrigingError,
    coefficient_rows,
    linearize,
    predict_new_x,
    quantile_summary_rows,
    slope_intervals,
    write_rows,
    MIN_INTERVAL_DRAWS,
)
from .likelihood import Dataset
from .mcmc import InitializationError, PosteriorDraws, acceptance_rows
from .prior import CrossingError, design_matrix, sample_fdqp_batch, uniform_to_real
from .pyramid import levy_distance, max_level_gap, random_cdf_pair
from .stochastic import CorrelationError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("dqp")


class NumericalFailure(RuntimeError):
    pass


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _progress(msg: str) -> None:
    print(msg, flush=True)


# -- sample-prior ------------------------------------------------------------

def cmd_sample_prior(cfg: RunConfig) -> Path:
    """Forward draws of the prior surface at ``prior_samples.x``."""
    layout = cfg.build_layout()
    alphas = cfg.build_alphas(layout)
    ps = cfg.prior_samples
    x = np.asarray(ps.x, dtype=float)
    rng = np.random.default_rng(cfg.seed)
    U = sample_fdqp_batch(layout, cfg.build_kernel(), alphas, x, rng, ps.draws, route=ps.route)
    beta = cfg.build_trend_prior().sample(rng, ps.draws)
    D = design_matrix(x) if cfg.trend == "linear" else np.ones((x.size, 1))
    sigma = cfg.sigma.value if cfg.sigma.value else 1.0
    Q = uniform_to_real(U, (beta @ D.T)[:, None, :], sigma)
    rows = [{"draw": d, "tau": tau, "x": x[j], "uniform": U[d, t, j], "value": Q[d, t, j]}
            for d in range(ps.draws) for t, tau in enumerate(cfg.levels) for j in range(x.size)]
    path = _out(cfg) / "prior_surfaces.csv"
    write_rows(path, rows)
    _progress(f"wrote {ps.draws} prior surfaces to {path}")
    return path


def read_prior_surfaces(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(levels, x, uniform, value) with the arrays shaped (draws, T, n)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    draws = sorted({int(r["draw"]) for r in rows})
    levels = sorted({float(r["tau"]) for r in rows})
    xs = sorted({float(r["x"]) for r in rows})
    U = np.full((len(draws), len(levels), len(xs)), np.nan)
    Q = U.copy()
    for r in rows:
        i, t, j = int(r["draw"]), levels.index(float(r["tau"])), xs.index(float(r["x"]))
        U[i, t, j] = float(r["uniform"])
        Q[i, t, j] = float(r["value"])
    return np.array(levels), np.array(xs), U, Q


# -- fit / linearize / predict ----------------------------------------------

def load_data(cfg: RunConfig) -> Dataset:
    if not cfg.data.path:
        raise ConfigError("data.path: a data file is required")
    if cfg.data.format == "cyclone":
        data, _ = bench.read_cyclone_csv(cfg.data.path, cfg.data.year_origin)
        return data
    return bench.read_xy_csv(cfg.data.path)


def _summaries(draws: PosteriorDraws, out: Path) -> None:
    write_rows(out / "quantiles.csv", quantile_summary_rows(draws.Q, draws.sites, draws.levels))
    if draws.n_draws >= MIN_INTERVAL_DRAWS:
        fit = slope_intervals(draws)
    else:
        log.warning("only %d draws: slopes reported without intervals", draws.n_draws)
        fit = linearize(draws)
    write_rows(out / "slopes.csv", coefficient_rows(fit))


def cmd_fit(cfg: RunConfig, data: Dataset | None = None) -> Path:
    data = load_data(cfg) if data is None else data
    out = _out(cfg)
    _progress(f"fitting {data.n} observations on {data.n_sites} sites, "
              f"{cfg.mcmc.warmup}+{cfg.mcmc.iterations} sweeps")
    draws = bench.fit_dqp(data, cfg.fit_settings())
    draws.to_jsonl(out / "draws.jsonl", {"seed": cfg.seed})
    write_rows(out / "acceptance.csv", acceptance_rows(draws))
    _summaries(draws, out)
    save_config(cfg, out / "config.json")
    rates = ", ".join(f"{k} {v['rate']:.3f}" for k, v in draws.acceptance.items())
    _progress(f"acceptance: {rates}; outputs in {out}")
    return out


def _load_draws(path) -> PosteriorDraws:
    if not path:
        raise ConfigError("predict.draws_path: a draws file is required")
    draws, _ = PosteriorDraws.from_jsonl(path)
    return draws


def cmd_linearize(cfg: RunConfig) -> Path:
    draws = _load_draws(cfg.predict.draws_path)
    out = _out(cfg)
    fit = slope_intervals(draws) if draws.n_draws >= MIN_INTERVAL_DRAWS else linearize(draws)
    write_rows(out / "slopes.csv", coefficient_rows(fit))
    _progress(f"linearized {draws.n_draws} draws into {out / 'slopes.csv'}")
    return out


def cmd_predict(cfg: RunConfig) -> Path:
    draws = _load_draws(cfg.predict.draws_path)
    if not cfg.predict.x_star:
        raise ConfigError("predict.x_star: at least one covariate value is required")
    if draws.layout is None and np.any(~np.isfinite(draws.Z)):
        raise NumericalFailure("draws carry neither latent values nor a layout to rebuild them")
    layout = draws.layout
    rng = np.random.default_rng(cfg.seed)
    pred = predict_new_x(draws, cfg.predict.x_star, cfg.build_kernel(),
                         cfg.build_alphas(layout), rng, beta_rule=cfg.beta_rule)
    out = _out(cfg)
    Q = pred.Q
    rows = [{"draw": d, "tau": tau, "x": pred.x_star[j, 0], "value": Q[d, t, j]}
            for d in range(Q.shape[0]) for t, tau in enumerate(pred.levels)
            for j in range(Q.shape[2])]
    write_rows(out / "predictive_draws.csv", rows)
    write_rows(out / "predictive_summary.csv",
               quantile_summary_rows(Q, pred.x_star, pred.levels))
    _progress(f"predicted {len(cfg.predict.x_star)} covariate values from {Q.shape[0]} draws")
    return out


# -- bench / levy-check ------------------------------------------------------

def cmd_bench(cfg: RunConfig) -> Path:
    settings = cfg.fit_settings()
    cells = cfg.cells()
    _progress(f"study: {len(cells)} cell(s) x {cfg.bench.datasets} dataset(s)")
    report = bench.run_study(cells, cfg.bench.datasets, settings, seed=cfg.seed,
                             processes=cfg.threads, full_scale=cfg.bench.full_scale)
    out = _out(cfg)
    report.write(out)
    for r in report.rows:
        _progress(f"{r['scenario']} T={r['T']} n={r['n']} {r['method']}: "
                  f"AMSE {r['amse']:.4f} ({r['se']:.4f})")
    if report.failures:
        _progress(f"{len(report.failures)} dataset fit(s) failed; see failures.csv")
    return out


def cmd_levy_check(cfg: RunConfig) -> Path:
    """Randomized check that quantile-sharing CDFs are within the max level gap."""
    lc = cfg.levy
    rng = np.random.default_rng(cfg.seed)
    rows, worst = [], -np.inf
    for i in range(lc.pairs):
        adversarial = bool(rng.random() < lc.adversarial_share)
        F, G, levels = random_cdf_pair(rng, int(rng.integers(1, lc.max_levels + 1)),
                                       adversarial=adversarial)
        eps = max_level_gap(levels)
        d = levy_distance(F, G)
        worst = max(worst, d - eps)
        rows.append({"pair": i, "n_levels": len(levels), "adversarial": int(adversarial),
                     "max_gap": eps, "distance": d})
    out = _out(cfg)
    write_rows(out / "levy_check.csv", rows)
    _progress(f"{lc.pairs} pairs, max(distance - gap) = {worst:.3e}")
    if worst > 1e-9:
        raise NumericalFailure(f"Levy bound violated by {worst:.3e}")
    return out


COMMANDS = {
    "sample-prior": cmd_sample_prior,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "linearize": cmd_linearize,
    "bench": cmd_bench,
    "levy-check": cmd_levy_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dqp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration (defaults apply when absent)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir")
        p.add_argument("--threads", type=int)
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "fit":
            p.add_argument("--data", help="CSV input (overrides data.path)")
        if name in ("predict", "linearize"):
            p.add_argument("--draws", help="draws.jsonl from a fit (overrides predict.draws_path)")
        if name == "predict":
            p.add_argument("--x-star", help="comma-separated covariate values")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    data = dataclasses.asdict(cfg)
    for key in ("seed", "out_dir", "threads"):
        if getattr(args, key, None) is not None:
            data[key] = getattr(args, key)
    if getattr(args, "data", None):
        data["data"]["path"] = args.data
    if getattr(args, "draws", None):
        data["predict"]["draws_path"] = args.draws
    if getattr(args, "x_star", None):
        try:
            data["predict"]["x_star"] = [float(v) for v in args.x_star.split(",")]
        except ValueError:
            raise ConfigError(f"--x-star: not a list of numbers: {args.x_star!r}") from None
    return config_from_dict(data)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (bench.CsvFormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalFailure, InitializationError, CrossingError, CorrelationError,
            KrigingError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
