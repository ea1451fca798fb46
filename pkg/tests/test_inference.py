import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats
from scipy.special import ndtr

from dqp.inference import (
    KrigingError,
    LinearFit,
    RankError,
    StreamingMean,
    _kriging,
    coefficient_rows,
    fit_from_rows,
    latent_from_draws,
    linearize,
    linearize_draws,
    ls_coefficients,
    posterior_mean_curves,
    predict_new_x,
    quantile_summary_rows,
    read_rows,
    slope_intervals,
    write_rows,
)
from dqp.likelihood import Dataset
from dqp.mcmc import MCMCConfig, PosteriorDraws, TrendPrior, run_chain
from dqp.prior import level_plan, row_correlations
from dqp.pyramid import build_oblique_layout
from dqp.stochastic import CorrelationKernel, martingale_alphas

LEVELS3 = (0.25, 0.5, 0.75)
GAUSS5 = CorrelationKernel("gaussian", 5.0)


def fake_draws(rng, D=50, sites=(1.0, 2.0, 4.0, 7.0), levels=LEVELS3, weights=None):
    S, T = len(sites), len(levels)
    U = np.sort(rng.uniform(0.02, 0.98, (D, T, S)), axis=1)
    beta = rng.normal([5.0, 0.5], 0.3, (D, 2))
    x = np.asarray(sites)[:, None]
    mu = beta @ np.column_stack([np.ones(S), x[:, 0]]).T
    sigma = rng.uniform(0.5, 2.0, (D, S))
    return PosteriorDraws(levels, x, U, np.full_like(U, np.nan), beta, sigma, mu,
                          np.zeros(D), np.zeros(D), site_weights=weights)


@pytest.fixture(scope="module")
def chain_draws():
    rng = np.random.default_rng(8)
    x = np.repeat([1.0, 3.0, 6.0, 9.0], 6)
    data = Dataset(x, 5 + 0.4 * x + rng.normal(0, 1, x.size))
    lay = build_oblique_layout(LEVELS3)
    return run_chain(data, lay, GAUSS5, martingale_alphas(lay), TrendPrior([5.0, 0.0], [3.0, 3.0]),
                     MCMCConfig(warmup=200, iterations=1000, thin=10, seed=3))


def test_mean_of_single_draw_is_the_draw(rng):
    d = fake_draws(rng, D=1)
    assert np.array_equal(posterior_mean_curves(d).values, d.Q[0])


@given(st.integers(0, 2**31), st.integers(1, 60))
def test_streaming_mean_matches_two_pass(seed, D):
    d = fake_draws(np.random.default_rng(seed), D=D)
    a = posterior_mean_curves(d).values
    b = posterior_mean_curves(d, streaming=True).values
    assert np.allclose(a, b, rtol=0, atol=1e-10)


def test_streaming_mean_accumulates():
    acc = StreamingMean()
    for v in ([1.0, 2.0], [3.0, 6.0], [5.0, 1.0]):
        acc.update(v)
    assert acc.count == 3 and np.allclose(acc.mean, [3.0, 3.0])


def test_exact_line_is_recovered():
    x = np.array([1.0, 2.0, 5.0, 9.0])
    vals = np.vstack([2 + 3 * x, 4 + 3 * x, 6 + 3 * x])
    fit = linearize(vals, sites=x, levels=LEVELS3, weights=[3, 1, 2, 5])
    assert np.allclose(fit.coef, [[2, 3], [4, 3], [6, 3]], atol=1e-10)
    assert fit.slope(0.5) == pytest.approx(3.0)


def test_constant_surface_has_zero_slope():
    vals = np.repeat([[1.2], [1.7], [2.9]], 4, axis=1)
    fit = linearize(vals, sites=[1.0, 2.0, 3.0, 4.0], levels=LEVELS3)
    assert np.allclose(fit.coef[:, 1], 0.0, atol=1e-12)
    assert np.allclose(fit.coef[:, 0], [1.2, 1.7, 2.9])


@given(st.integers(0, 2**31))
def test_weighted_fit_matches_lstsq(seed):
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(0, 10, 6))
    w = rng.integers(1, 20, 6).astype(float)
    vals = rng.normal(size=(3, 6))
    coef = ls_coefficients(vals, x, w)
    A = np.column_stack([np.ones(6), x]) * np.sqrt(w)[:, None]
    for t in range(3):
        ref = np.linalg.lstsq(A, vals[t] * np.sqrt(w), rcond=None)[0]
        assert np.allclose(coef[t], ref, atol=1e-9)


def test_fit_of_mean_equals_mean_of_fits(rng):
    d = fake_draws(rng, D=80, weights=np.array([5.0, 1.0, 3.0, 2.0]))
    assert np.allclose(linearize(d).coef, linearize_draws(d).mean(axis=0), atol=1e-10)


def test_intervals_match_percentile_oracle(rng):
    d = fake_draws(rng, D=200, weights=np.array([2.0, 2.0, 1.0, 4.0]))
    fit = slope_intervals(d, level=0.9)
    x, w = d.sites[:, 0], d.site_weights
    per = np.array([[np.polyfit(x, d.Q[k, t], 1, w=np.sqrt(w))[::-1] for t in range(3)]
                    for k in range(d.n_draws)])
    assert np.allclose(fit.lower, np.percentile(per, 5, axis=0), atol=1e-9)
    assert np.allclose(fit.upper, np.percentile(per, 95, axis=0), atol=1e-9)
    assert np.all(fit.lower <= fit.coef) and np.all(fit.coef <= fit.upper)


def test_intervals_need_enough_draws(rng):
    with pytest.raises(ValueError, match="at least"):
        slope_intervals(fake_draws(rng, D=10))


def test_single_site_is_rank_deficient():
    with pytest.raises(RankError):
        ls_coefficients(np.ones((3, 2)), [2.0, 2.0])
    with pytest.raises(RankError):
        ls_coefficients(np.ones((3, 3)), [1.0, 2.0, 3.0], weights=[0, 1, 0])


def test_prediction_at_a_site_reproduces_the_draw(chain_draws, rng):
    lay = chain_draws.layout
    pred = predict_new_x(chain_draws, [3.0], GAUSS5, martingale_alphas(lay), rng)
    s = int(np.flatnonzero(chain_draws.sites[:, 0] == 3.0)[0])
    assert np.allclose(pred.U[:, :, 0], chain_draws.U[:, :, s], atol=1e-8)
    assert np.allclose(pred.Q[:, :, 0], chain_draws.Q[:, :, s], atol=1e-6)


def test_latent_rebuild_matches_stored(chain_draws):
    lay = chain_draws.layout
    plan = level_plan(lay, martingale_alphas(lay))
    blank = PosteriorDraws(chain_draws.levels, chain_draws.sites, chain_draws.U,
                           np.full_like(chain_draws.Z, np.nan), chain_draws.beta,
                           chain_draws.sigma, chain_draws.mu, chain_draws.log_prior,
                           chain_draws.log_lik)
    Z = latent_from_draws(blank, plan, row_correlations(lay, GAUSS5, chain_draws.sites))
    assert np.allclose(Z, chain_draws.Z, atol=1e-8)


def test_far_prediction_follows_the_prior(chain_draws):
    # With a tiny range the new site is independent of the fitted ones.
    kern = CorrelationKernel("gaussian", 1e-3)
    lay = chain_draws.layout
    rng = np.random.default_rng(1)
    many = PosteriorDraws(chain_draws.levels, chain_draws.sites,
                          np.repeat(chain_draws.U, 50, axis=0), np.repeat(chain_draws.Z, 50, axis=0),
                          np.repeat(chain_draws.beta, 50, axis=0),
                          np.repeat(chain_draws.sigma, 50, axis=0),
                          np.repeat(chain_draws.mu, 50, axis=0), np.zeros(5000), np.zeros(5000),
                          layout=lay)
    pred = predict_new_x(many, [4.5], kern, martingale_alphas(lay), rng)
    assert stats.kstest(pred.Z[:, 1, 0], "norm").pvalue > 0.001
    assert stats.kstest(pred.U[:, 1, 0], stats.beta(18, 18).cdf).pvalue > 0.001


def test_conditional_variance_lies_in_unit_interval():
    sites = np.array([[1.0], [2.0], [4.0]])
    xs = np.linspace(0, 6, 25)[:, None]
    kr = _kriging(GAUSS5, sites, xs)
    var = np.sum(kr.root ** 2, axis=1)
    assert np.all(var >= -1e-12) and np.all(var <= 1 + 1e-12)
    on_site = np.flatnonzero(np.isin(xs[:, 0], sites[:, 0]))
    assert np.allclose(var[on_site], 0.0, atol=1e-8)


def test_invalid_kernel_raises_kriging_error():
    sites, xs = np.array([[0.0]]), np.array([[1.0]])

    def bad(a, b):
        if a is b:
            return np.eye(len(a)) * (1.0 if a is sites else 0.5)
        return np.full((len(a), len(b)), 0.9)

    with pytest.raises(KrigingError):
        _kriging(bad, sites, xs)


def test_predicted_marginal_variance_is_bounded(chain_draws, rng):
    lay = chain_draws.layout
    pred = predict_new_x(chain_draws, [2.0, 20.0], GAUSS5, martingale_alphas(lay), rng)
    assert pred.Q.shape == (chain_draws.n_draws, 3, 2)
    assert np.all(np.diff(pred.Q, axis=1) > 0)
    assert np.all(np.abs(pred.Z) < 8)
    grid = pred.grid(0, 0)
    assert np.allclose(grid.values, pred.Q[0, :, 0])


def test_coefficient_csv_round_trip(tmp_path, rng):
    fit = slope_intervals(fake_draws(rng, D=60))
    path = tmp_path / "slopes.csv"
    write_rows(path, coefficient_rows(fit))
    back = fit_from_rows(read_rows(path))
    assert back.levels == fit.levels
    for k in ("coef", "lower", "upper"):
        assert np.array_equal(getattr(back, k), getattr(fit, k))
    plain = fit_from_rows(coefficient_rows(LinearFit(LEVELS3, np.ones((3, 2)))))
    assert plain.lower is None


def test_quantile_summary_rows(rng):
    d = fake_draws(rng, D=40)
    rows = quantile_summary_rows(d.Q, d.sites, d.levels)
    assert len(rows) == 3 * 4
    r = rows[5]
    t, s = 1, 1
    assert (r["tau"], r["x"]) == (0.5, 2.0)
    assert r["mean"] == pytest.approx(d.Q[:, t, s].mean())
    assert r["lower"] <= r["mean"] <= r["upper"]
