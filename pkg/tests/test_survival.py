import numpy as np
import pytest
from scipy import stats

from accelmix.errors import CollinearDesign, DegenerateContrast, NonIdentifiable
from accelmix.survival import (
    SurvivalRecord, cox_fit, design_matrix, kaplan_meier, log_rank_test, mixed_group_label,
    partial_loglik, read_survival_csv, summary_text, with_group, write_forest_csv, write_km_csv,
    write_survival_csv,
)


def recs(times, events, groups=None, **cov):
    groups = groups or ["a"] * len(times)
    out = []
    for k, (t, e, g) in enumerate(zip(times, events, groups)):
        out.append(SurvivalRecord(f"p{k}", float(t), bool(e), g,
                                  {n: v[k] for n, v in cov.items()}))
    return out


def test_km_all_events():
    S = kaplan_meier(recs([1, 2, 3], [1, 1, 1]))["a"]
    np.testing.assert_allclose(S.survival, [2 / 3, 1 / 3, 0.0], atol=1e-15)


def test_km_all_censored():
    S = kaplan_meier(recs([1, 2, 3], [0, 0, 0]))["a"]
    assert np.all(S.survival == 1.0)


def test_km_duplication_invariant(rng):
    t = rng.exponential(size=20).round(1) + 0.1
    e = rng.uniform(size=20) < 0.7
    a = kaplan_meier(recs(t, e))["a"]
    b = kaplan_meier(recs(np.r_[t, t], np.r_[e, e]))["a"]
    np.testing.assert_allclose(a.survival, b.survival, atol=1e-15)


def test_km_rebuilds_from_table(rng):
    t = rng.exponential(size=30) + 0.01
    c = kaplan_meier(recs(t, rng.uniform(size=30) < 0.6))["a"]
    np.testing.assert_array_equal(np.cumprod(1 - c.n_events / c.n_at_risk), c.survival)


def test_km_greenwood_single_step():
    c = kaplan_meier(recs([1, 2, 3, 4], [1, 0, 0, 0]))["a"]
    # S = 3/4, var = S^2 * 1/(4*3)
    assert c.greenwood_var[0] == pytest.approx(0.75 ** 2 / 12)
    lo, hi = c.confidence_band()
    assert lo[0] <= c.survival[0] <= hi[0]


def test_km_left_truncation():
    rs = [SurvivalRecord("a", 5.0, True, "g", entry=0.0), SurvivalRecord("b", 8.0, True, "g", entry=6.0),
          SurvivalRecord("c", 9.0, False, "g", entry=0.0)]
    c = kaplan_meier(rs, left_truncation=True)["g"]
    # b enters after the first event, so the risk set at t=5 is {a, c}
    assert c.n_at_risk[0] == 2 and c.survival[0] == 0.5


def test_logrank_identical_groups(rng):
    t = rng.exponential(size=15) + 0.1
    e = rng.uniform(size=15) < 0.7
    lr = log_rank_test(recs(np.r_[t, t], np.r_[e, e], ["a"] * 15 + ["b"] * 15))
    assert lr.statistic == pytest.approx(0.0, abs=1e-12) and lr.p_value == pytest.approx(1.0)


def test_logrank_label_swap(rng):
    t = rng.exponential(size=30) + 0.1
    e = rng.uniform(size=30) < 0.7
    g = ["a" if k % 3 else "b" for k in range(30)]
    lr1 = log_rank_test(recs(t, e, g))
    lr2 = log_rank_test(recs(t, e, ["b" if x == "a" else "a" for x in g]))
    assert lr1.statistic == pytest.approx(lr2.statistic, rel=1e-12)


def test_logrank_needs_two_groups():
    with pytest.raises(DegenerateContrast):
        log_rank_test(recs([1, 2], [1, 1]))


def test_logrank_three_groups_df(rng):
    t = rng.exponential(size=60) + 0.1
    lr = log_rank_test(recs(t, np.ones(60), [str(k % 3) for k in range(60)]))
    assert lr.df == 2 and 0 <= lr.p_value <= 1
    assert lr.observed.sum() == pytest.approx(lr.expected.sum())


def test_cox_identical_groups(rng):
    t = rng.exponential(size=20) + 0.1
    e = rng.uniform(size=20) < 0.8
    fit = cox_fit(recs(np.r_[t, t], np.r_[e, e], ["a"] * 20 + ["b"] * 20), references={"group": "a"})
    assert abs(fit.beta[0]) < 1e-6 and fit.hazard_ratio[0] == pytest.approx(1.0, abs=1e-6)


def test_cox_time_scale_invariant(rng):
    t = rng.exponential(size=40) + 0.1
    e = rng.uniform(size=40) < 0.8
    g = ["a", "b"] * 20
    a = cox_fit(recs(t, e, g))
    b = cox_fit(recs(10 * t, e, g))
    np.testing.assert_allclose(a.beta, b.beta, rtol=1e-10)


def test_cox_matches_statsmodels(rng):
    sm = pytest.importorskip("statsmodels.api")
    n = 120
    t = rng.exponential(size=n).round(2) + 0.01  # includes ties
    e = rng.uniform(size=n) < 0.7
    g = rng.choice(["x", "y", "z"], size=n)
    age = rng.normal(50, 5, size=n)
    rs = recs(t, e, list(g), age=list(age))
    ours = cox_fit(rs, terms=("group", "age"), references={"group": "x"})
    X = np.column_stack([g == "y", g == "z", age]).astype(float)
    ref = sm.PHReg(t, X, status=e.astype(int), ties="breslow").fit()
    np.testing.assert_allclose(ours.beta, ref.params, rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(ours.se, ref.bse, rtol=1e-5)


def test_cox_left_truncation_matches_statsmodels(rng):
    sm = pytest.importorskip("statsmodels.api")
    n = 100
    entry = rng.uniform(0, 1, n)
    t = entry + rng.exponential(size=n) + 0.01
    e = rng.uniform(size=n) < 0.8
    g = rng.choice(["a", "b"], size=n)
    rs = [SurvivalRecord(f"p{k}", t[k], bool(e[k]), g[k], entry=entry[k]) for k in range(n)]
    ours = cox_fit(rs, references={"group": "a"}, left_truncation=True)
    ref = sm.PHReg(t, (g == "b").astype(float)[:, None], status=e.astype(int), entry=entry,
                   ties="breslow").fit()
    np.testing.assert_allclose(ours.beta, ref.params, rtol=1e-6)


def test_cox_loglik_improves_and_ci(rng):
    t = rng.exponential(size=50) + 0.1
    fit = cox_fit(recs(t, np.ones(50), ["a", "b"] * 25))
    assert fit.loglik >= fit.loglik_null
    lo, hi = fit.ci
    assert np.all(lo <= fit.hazard_ratio) and np.all(fit.hazard_ratio <= hi)
    assert np.all((fit.p_values >= 0) & (fit.p_values <= 1))


def test_cox_separation_is_nonidentifiable():
    rs = recs([1, 2, 3, 4, 5, 6], [1, 1, 1, 0, 0, 0], ["a", "a", "a", "b", "b", "b"])
    with pytest.raises(NonIdentifiable):
        cox_fit(rs, references={"group": "b"})


def test_cox_collinear_design():
    rs = recs([1, 2, 3, 4], [1, 1, 1, 1], ["a", "b", "a", "b"], x=[1.0, 2.0, 1.0, 2.0])
    with pytest.raises(CollinearDesign):
        cox_fit(rs, terms=("group", "x"), references={"group": "a"})


def test_design_matrix_dummy_coding():
    rs = recs([1, 2, 3], [1, 1, 1], ["b", "a", "c"])
    X, names, refs = design_matrix(rs, ("group",), {"group": "a"})
    assert names == ["group[b]", "group[c]"] and refs == {"group": "a"}
    np.testing.assert_array_equal(X, [[1, 0], [0, 0], [0, 1]])


def test_mixed_labels():
    rs = recs([1, 2, 3], [1, 1, 0], shift=["regular", "late", None])
    out, skipped = mixed_group_label(rs, {"p0": 1, "p1": 3, "p2": 2})
    assert [r.group for r in out] == ["c1:regular", "c3:late"] and skipped == 1


def test_mixed_label_cardinality(rng):
    n = 200
    rs = recs(np.ones(n), np.ones(n), shift=list(rng.choice(["regular", "late"], n)))
    out, _ = mixed_group_label(rs, {f"p{k}": int(rng.integers(1, 5)) for k in range(n)})
    assert len({r.group for r in out}) <= 8


def test_io_round_trip(tmp_path, rng):
    rs = recs(rng.exponential(size=5) + 0.1, [1, 0, 1, 1, 0], ["a", "b"] * 2 + ["a"],
              shift=["late"] * 5)
    write_survival_csv(rs, tmp_path / "s.csv", covariate_cols=("shift",))
    back = read_survival_csv(tmp_path / "s.csv", covariate_cols=("shift",))
    assert [(r.time, r.event, r.group, r.covariates["shift"]) for r in back] == \
        [(r.time, r.event, r.group, "late") for r in rs]
    fit = cox_fit(back, references={"group": "a"})
    write_forest_csv(fit, tmp_path / "f.csv")
    write_km_csv(kaplan_meier(back), tmp_path / "k.csv")
    assert (tmp_path / "f.csv").read_text().startswith("term,HR,lower,upper,p")
    assert "log-rank" in summary_text("x", log_rank_test(back), fit)


def test_with_group_skips_missing():
    rs = recs([1, 2], [1, 1])
    assert [r.group for r in with_group(rs, {"p1": 2})] == ["2"]


def test_score_test_matches_chi2_tail(rng):
    t = rng.exponential(size=40) + 0.1
    fit = cox_fit(recs(t, np.ones(40), ["a", "b"] * 20))
    assert fit.score_p == pytest.approx(stats.chi2.sf(fit.score_statistic, 1))
