import numpy as np
import pytest
from scipy import stats

from dqp.likelihood import Dataset
from dqp.mcmc import (
    DQPModel,
    InitializationError,
    MCMCConfig,
    PosteriorDraws,
    ScalePrior,
    TrendPrior,
    acceptance_rows,
    plugin_sigma,
    run_chain,
)
from dqp.pyramid import build_oblique_layout
from dqp.stochastic import ConcentrationRule, CorrelationKernel, martingale_alphas

LEVELS3 = (0.25, 0.5, 0.75)
GAUSS5 = CorrelationKernel("gaussian", 5.0)


def small_data(seed=3, sites=(1.0, 4.0, 8.0), per_site=8):
    rng = np.random.default_rng(seed)
    x = np.repeat(sites, per_site)
    return Dataset(x, 5 + 0.3 * x + rng.normal(0, 1, x.size))


def model(data, config, levels=LEVELS3, trend_prior=None, sigma=1.0, **kw):
    lay = build_oblique_layout(levels)
    tp = trend_prior or TrendPrior([5.0, 0.0], [3.0, 3.0])
    return DQPModel(data, lay, GAUSS5, martingale_alphas(lay), tp, sigma, config, **kw)


def test_same_seed_gives_identical_chains():
    data = small_data()
    cfg = MCMCConfig(warmup=20, iterations=60, thin=3, seed=11)
    a = model(data, cfg).run()
    b = model(data, cfg).run()
    for k in ("U", "Z", "beta", "sigma", "log_lik"):
        assert np.array_equal(getattr(a, k), getattr(b, k))
    c = model(data, MCMCConfig(warmup=20, iterations=60, thin=3, seed=12)).run()
    assert not np.array_equal(a.U, c.U)


def test_proposing_the_current_point_is_always_accepted(rng):
    m = model(small_data(), MCMCConfig(warmup=0, iterations=1, thin=1))
    state = m.initial_state()
    for _ in range(5):
        state = m.sweep(state, rng)
    for t in range(3):
        new = m.update_quantile_level(state, t, rng, z_proposal=state.Z[t].copy())
        assert np.allclose(new.U, state.U, atol=1e-12)
        assert new.log_posterior == pytest.approx(state.log_posterior, abs=1e-9)
    assert m.stats["level"].accepts >= 3


def test_zero_trend_step_leaves_beta_unchanged(rng):
    m = model(small_data(), MCMCConfig(warmup=0, iterations=1, thin=1, trend_step=0.0))
    state = m.initial_state()
    for _ in range(10):
        state = m.update_trend(state, m.trend_blocks[0], rng)
    assert np.array_equal(state.beta, m.trend_prior.mean)
    assert m.stats["trend"].rate == 1.0


def test_cached_terms_match_full_recompute(rng):
    cfg = MCMCConfig(warmup=0, iterations=1, thin=1, scale_mode="sample")
    m = model(small_data(), cfg, levels=(0.1, 0.25, 0.5, 0.75, 0.9), sigma=[1.0, 1.2, 0.9])
    state = m.initial_state()
    for _ in range(300):
        state = m.sweep(state, rng)
        fresh = m.recompute(state)
        assert np.allclose(fresh.row_lp, state.row_lp, atol=1e-8)
        assert fresh.log_lik == pytest.approx(state.log_lik, abs=1e-8)
        assert fresh.log_trend_prior == pytest.approx(state.log_trend_prior, abs=1e-8)
        assert fresh.log_scale_prior == pytest.approx(state.log_scale_prior, abs=1e-8)
        assert np.allclose(fresh.Z, state.Z, atol=1e-8)


def test_trend_matches_conjugate_normal_posterior():
    # One level at the median with U pinned at 0.5: the likelihood is exactly normal.
    rng = np.random.default_rng(5)
    y = rng.normal(1.5, 1.0, 30)
    data = Dataset(np.ones(30), y)
    prior = TrendPrior([0.0], [4.0])
    cfg = MCMCConfig(warmup=500, iterations=40_000, thin=10, trend_step=0.6,
                     update_levels=False, seed=2)
    draws = model(data, cfg, levels=(0.5,), trend_prior=prior, trend="constant").run()
    post_var = 1 / (1 / 4.0 + 30)
    post_mean = post_var * y.sum()
    b = draws.beta[:, 0]
    se = np.sqrt(post_var / 1000)  # conservative effective size
    assert abs(b.mean() - post_mean) < 4 * se
    assert b.var() == pytest.approx(post_var, rel=0.1)


def test_prior_is_recovered_without_likelihood():
    data = Dataset([2.0], [0.0])
    cfg = MCMCConfig(warmup=200, iterations=60_000, thin=20, use_likelihood=False,
                     level_steps=[1.0, 0.8], trend_step=1.5, seed=4)
    draws = model(data, cfg).run()
    assert stats.kstest(draws.U[:, 1, 0], stats.beta(18, 18).cdf).pvalue > 0.001
    ratio = draws.U[:, 0, 0] / draws.U[:, 1, 0]
    assert stats.kstest(ratio, stats.beta(12.25, 12.25).cdf).pvalue > 0.001
    assert stats.kstest(draws.beta[:, 0], stats.norm(5, np.sqrt(3)).cdf).pvalue > 0.001


def test_sampled_scales_recover_lognormal_prior():
    data = Dataset([1.0, 2.0], [0.0, 0.0])
    cfg = MCMCConfig(warmup=200, iterations=20_000, thin=10, use_likelihood=False,
                     scale_mode="sample", scale_step=0.8, seed=9)
    m = model(data, cfg, sigma=[2.0, 0.5], scale_prior=ScalePrior([2.0, 0.5], 0.5))
    draws = m.run()
    for s, c in enumerate((2.0, 0.5)):
        logs = np.log(draws.sigma[:, s])
        assert stats.kstest(logs, stats.norm(np.log(c), 0.5).cdf).pvalue > 0.001


def test_plugin_scale_update_is_a_no_op(rng):
    m = model(small_data(), MCMCConfig(warmup=0, iterations=1, thin=1))
    state = m.initial_state()
    assert m.update_scale(state, rng) is state
    assert m.stats["scale"].attempts == 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_start_raises():
    data = Dataset([1.0, 1.0], [0.0, 1e200])
    with pytest.raises(InitializationError, match="likelihood"):
        model(data, MCMCConfig(warmup=0, iterations=1, thin=1)).initial_state()


def test_thin_must_divide_iterations():
    with pytest.raises(ValueError):
        MCMCConfig(iterations=100, thin=7)


def test_plugin_sigma_falls_back_to_pooled_sd():
    data = Dataset([1.0, 1.0, 2.0], [0.0, 2.0, 5.0])
    sd = plugin_sigma(data)
    assert sd[0] == pytest.approx(np.sqrt(2.0))
    assert sd[1] == pytest.approx(np.std([0.0, 2.0, 5.0], ddof=1))


def test_every_state_is_non_crossing():
    draws = run_chain(small_data(), build_oblique_layout((0.1, 0.5, 0.9)), GAUSS5,
                      martingale_alphas(build_oblique_layout((0.1, 0.5, 0.9))),
                      TrendPrior([5.0, 0.0], [3.0, 3.0]),
                      MCMCConfig(warmup=50, iterations=200, thin=2), check_every_state=True)
    assert np.all(np.diff(draws.Q, axis=1) > 0)
    assert {r["move"] for r in acceptance_rows(draws)} == {"level", "trend"}


def test_jsonl_round_trip(tmp_path):
    draws = model(small_data(), MCMCConfig(warmup=5, iterations=20, thin=2, seed=1)).run()
    path = tmp_path / "draws.jsonl"
    draws.to_jsonl(path, {"seed": 1})
    back, header = PosteriorDraws.from_jsonl(path)
    assert header["seed"] == 1
    assert back.levels == draws.levels
    for k in ("U", "Z", "beta", "sigma", "mu", "log_prior", "log_lik", "sites", "site_weights"):
        assert np.array_equal(getattr(back, k), getattr(draws, k)), k
    assert back.layout.to_text() == draws.layout.to_text()
