import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import special

from dqp.bench import (
    CYCLONE_LEVELS,
    GRID,
    LEVELS,
    Cell,
    CsvFormatError,
    FitSettings,
    ScenarioSpec,
    amse,
    cyclone_pipeline,
    cyclone_settings,
    dqp_estimates,
    fit_dqp,
    generate,
    plug_in_scales,
    read_cyclone_csv,
    read_numeric_csv,
    reference_table,
    run_study,
    t_quantile,
    true_quantiles,
)
from dqp.inference import read_rows
from dqp.likelihood import Dataset
from dqp.mcmc import MCMCConfig

QUICK = MCMCConfig(warmup=50, iterations=200, thin=4)


@given(st.floats(1e-6, 1 - 1e-6), st.sampled_from([1.0, 3.0, 20.0, 2.5]))
def test_t_quantile_matches_scipy(p, df):
    assert t_quantile(p, df) == pytest.approx(special.stdtrit(df, p), rel=1e-10, abs=1e-12)


def test_t_quantile_median_is_zero():
    assert t_quantile(0.5, 3.0) == 0.0


@pytest.mark.parametrize("sid", ["1-1", "1-3", "2-1", "2-2", "3-1", "3-2"])
def test_generated_data_follow_true_quantiles(sid):
    spec = ScenarioSpec(sid, replicates=4000)
    data = generate(spec, np.random.default_rng(7))
    levels = LEVELS[7]
    truth = true_quantiles(spec, levels)
    for j, x in enumerate(GRID):
        y = data.y[data.x[:, 0] == x]
        cover = (y[:, None] <= truth[:, j]).mean(axis=0)
        assert np.all(np.abs(cover - levels) < 4 * np.sqrt(0.25 / y.size))


def test_scenario_two_scale_bump():
    s = ScenarioSpec("2-1")
    assert s.scale([4, 5, 6, 7]).tolist() == [1.0, np.sqrt(10), np.sqrt(10), 1.0]
    assert s.n == 100 and ScenarioSpec("1-1", 50).n == 500


def test_unknown_scenario_is_rejected():
    with pytest.raises(ValueError, match="unknown scenario"):
        ScenarioSpec("4-1")


def test_amse_trivial_cases():
    truth = np.arange(6.0).reshape(2, 3)
    exact = amse(np.stack([truth, truth]), truth)
    assert exact.amse == 0.0 and exact.se == 0.0
    shifted = amse(np.stack([truth + 0.5] * 4), truth)
    assert shifted.amse == pytest.approx(0.25) and shifted.se == pytest.approx(0.0)
    assert np.isnan(amse(truth[None], truth).se)


@given(st.integers(0, 2**31))
def test_amse_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    S, T, X = int(rng.integers(2, 6)), int(rng.integers(1, 5)), int(rng.integers(2, 11))
    est, truth = rng.normal(size=(S, T, X)), rng.normal(size=(T, X))
    res = amse(est, truth)
    total, per = 0.0, []
    for s in range(S):
        acc = 0.0
        for t in range(T):
            for x in range(X):
                acc += (est[s, t, x] - truth[t, x]) ** 2 / X
        per.append(acc / T)
        total += acc
    assert res.amse == pytest.approx(total / (S * T), abs=1e-12)
    assert res.se == pytest.approx(np.std(per, ddof=1) / np.sqrt(S), abs=1e-12)


def test_reference_table_holds_published_values():
    ref = reference_table()
    assert len(ref) == 192
    look = {(r["scenario"], r["T"], r["n"], r["method"]): (r["amse"], r["se"]) for r in ref}
    assert look[("1-1", 3, 100, "DQP-lm")] == (0.0301, 0.0031)
    assert look[("1-1", 7, 100, "DQP")] == (0.1076, 0.0058)
    assert look[("1-2", 3, 100, "qrjoint")] == (0.0304, 0.0028)
    methods = {r["method"] for r in ref}
    assert methods == {"quantreg", "bayesQR", "qrjoint", "JSQR-GP", "DQP", "DQP-lm"}


def test_plug_in_scales():
    data = Dataset([1, 1, 2, 2, 3, 3], [0.0, 2.0, 1.0, 1.0, 0.0, 4.0])
    assert np.allclose(plug_in_scales(data, "site_sd"), [np.sqrt(2), 0.0, np.sqrt(8)])
    pooled = np.sqrt((2 + 0 + 8) / 3)
    assert np.allclose(plug_in_scales(data, "pooled"), pooled)
    assert np.allclose(plug_in_scales(data, "fixed", 2.0), 2.0)
    ols = plug_in_scales(Dataset([1, 1, 2, 2, 3, 3], [0, 1, 0, 2, 0, 3.0]), "ols")
    sd = np.array([1, 2, 3]) / np.sqrt(2)
    assert np.allclose(ols, sd)
    with pytest.raises(ValueError):
        plug_in_scales(data, "fixed")
    with pytest.raises(ValueError):
        plug_in_scales(data, "median")


def test_estimates_have_site_shape():
    data = generate(ScenarioSpec("1-1"), np.random.default_rng(0))
    draws = fit_dqp(data, FitSettings(mcmc=QUICK), seed=1)
    mean, lm = dqp_estimates(draws)
    assert mean.shape == lm.shape == (3, 10)
    slopes = np.diff(lm, axis=1)
    assert np.allclose(slopes, slopes[:, :1])


def test_small_study_is_deterministic_and_writes_reports(tmp_path):
    settings = FitSettings(mcmc=QUICK)
    cells = [Cell("1-1", 3, 100), Cell("2-1", 7, 100)]
    a = run_study(cells, 2, settings, seed=5)
    b = run_study(cells, 2, settings, seed=5)
    assert a.rows == b.rows
    assert len(a.rows) == 4 and not a.failures
    assert a.value("2-1", 7, 100, "DQP") > 0
    a.write(tmp_path)
    rows = read_rows(tmp_path / "amse_report.csv")
    assert [r["method"] for r in rows] == ["DQP", "DQP-lm", "DQP", "DQP-lm"]
    ref = read_rows(tmp_path / "reference_table.csv")
    assert {(r["scenario"], int(r["T"])) for r in ref} == {("1-1", 3), ("2-1", 7)}
    assert (tmp_path / "failures.csv").read_text().startswith("scenario,T,n,dataset,error")


def test_failed_fit_is_recorded_not_fatal():
    bad = FitSettings(mcmc=QUICK, sigma_mode="fixed", sigma_value=None)
    report = run_study([Cell("1-1", 3, 100)], 2, bad, seed=0)
    assert report.rows == [] and len(report.failures) == 2
    assert report.flagged() == {("1-1", 3, 100)}
    assert "ValueError" in report.failures[0]["error"]


def test_csv_errors_cite_line_numbers(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("x,y\n1,2\n3,oops\n")
    with pytest.raises(CsvFormatError, match=r"d.csv:3"):
        read_numeric_csv(p, ("x", "y"))
    p.write_text("x,z\n1,2\n")
    with pytest.raises(CsvFormatError, match="missing column"):
        read_numeric_csv(p, ("x", "y"))
    p.write_text("x,y\n1,2\n4\n")
    with pytest.raises(CsvFormatError, match=r"d.csv:3: expected 2 fields"):
        read_numeric_csv(p, ("x", "y"))


def synthetic_cyclone(path, rng, years=range(1981, 2007)):
    rows = ["year,wind_speed"]
    for yr in years:
        for _ in range(int(rng.integers(8, 14))):
            rows.append(f"{yr},{np.clip(rng.normal(70 + 0.8 * (yr - 1981), 20), 30, 159):.1f}")
    path.write_text("\n".join(rows) + "\n")


def test_cyclone_reader_origin_and_range(tmp_path, rng):
    p = tmp_path / "c.csv"
    synthetic_cyclone(p, rng)
    data, origin = read_cyclone_csv(p)
    assert origin == 1981 and data.x.min() == 1.0 and data.x.max() == 26.0
    _, origin = read_cyclone_csv(p, year_origin=1980)
    assert origin == 1980
    p.write_text("year,wind_speed\n1990,20\n1991,80\n")
    with pytest.warns(UserWarning, match="outside"):
        read_cyclone_csv(p)


def test_cyclone_pipeline_on_synthetic_file(tmp_path, rng):
    p = tmp_path / "c.csv"
    synthetic_cyclone(p, rng)
    settings = cyclone_settings(MCMCConfig(warmup=100, iterations=800, thin=10))
    res = cyclone_pipeline(p, settings, out_dir=tmp_path / "out")
    assert res.fit.coef.shape == (len(CYCLONE_LEVELS), 2)
    assert res.fit.lower is not None
    assert 0.0 < res.slope(0.5) < 2.0
    for name in ("quantiles.csv", "slopes.csv", "draws.jsonl"):
        assert (tmp_path / "out" / name).exists()
