import numpy as np
import pytest

from saeboost import simlab
from saeboost.core import CensusFrame, SurveySample

TINY = simlab.get_scenario("Linear-Normal").scaled(D=6, N_d=30)


def test_scenario_table():
    cp = simlab.get_scenario("Complex-Pareto")
    assert (cp.sigma_v, cp.error, cp.x1_sd, cp.x2_sd) == (1000.0, ("pareto", 3.0, 800.0), 2.0, 2.0)
    assert cp.mean_fn(np.array(1.0), np.array(2.0)) == 20000 - 1000 - 1000
    assert set(simlab.SCENARIOS) == {"Linear-Normal", "Complex-Normal", "Linear-Pareto", "Complex-Pareto"}
    with pytest.raises(ValueError, match="unknown scenario"):
        simlab.get_scenario("Cubic")


def test_pareto_inverse_cdf_points():
    assert simlab.pareto_from_uniform(1.0, 3.0, 800.0) == 800.0
    assert simlab.pareto_from_uniform(1 / 8, 3.0, 800.0) == pytest.approx(1600.0, rel=1e-15)
    with pytest.raises(ValueError):
        simlab.sample_pareto(1.0, 800.0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        simlab.sample_pareto(3.0, 0.0, np.random.default_rng(0))


def test_pareto_large_sample_moments():
    draws = simlab.sample_pareto(3.0, 800.0, np.random.default_rng(1), 1_000_000)
    assert draws.min() >= 800.0
    assert draws.mean() == pytest.approx(1200.0, rel=0.02)
    assert np.median(draws) == pytest.approx(800 * 2 ** (1 / 3), rel=0.005)
    t = np.geomspace(800.0, 8000.0, 12)
    surv = np.array([(draws[:100_000] > c).mean() for c in t])
    slope = np.polyfit(np.log(t), np.log(surv), 1)[0]
    assert slope == pytest.approx(-3.0, rel=0.05)


def test_noiseless_population_is_the_mean_function():
    spec = simlab.ScenarioSpec("noiseless", simlab.SCENARIOS["Linear-Normal"].mean_fn, 3.0, 3.0, 0.0,
                               ("normal", 0.0), D=4, N_d=25)
    pop = simlab.generate_population(spec, 3)
    x1, x2 = pop.census.x.T
    assert np.array_equal(pop.census.y, 5000 - 500 * x1 - 500 * x2)
    for d, rows in enumerate(pop.census.area_index.values()):
        assert pop.true_means[d] == pop.census.y[rows].mean()


def test_linear_normal_population_variance():
    spec = simlab.get_scenario("Linear-Normal").scaled(D=1000, N_d=1000)
    pop = simlab.generate_population(spec, 8)
    # covariates within areas, covariate means across areas, area effect, unit error
    expected = 500 ** 2 * 9 * 2 + 500 ** 2 * (1 / 3) * 2 + 500 ** 2 + 1000 ** 2
    assert np.var(pop.census.y) == pytest.approx(expected, rel=0.02)


def test_population_is_reproducible_and_labelled():
    a = simlab.generate_population(TINY, 5)
    b = simlab.generate_population(TINY, 5)
    assert np.array_equal(a.census.y, b.census.y) and np.array_equal(a.census.x, b.census.x)
    assert a.census.areas == tuple(str(d) for d in range(1, 7))
    assert a.census.N_d.tolist() == [30] * 6


def test_default_allocation():
    alloc = simlab.default_allocation()
    assert alloc.sum() == 1410 and alloc.min() == 6 and alloc.max() == 49
    assert alloc.mean() == pytest.approx(28.2)
    assert np.all(np.diff(alloc) >= 0)
    assert np.array_equal(alloc, simlab.default_allocation())


def test_desk_allocation_is_capped():
    alloc = simlab.desk_allocation(50, 20)
    assert alloc.max() == 20 and alloc.min() >= 1


def test_stratified_sampling_edge_cases():
    pop = simlab.generate_population(TINY, 2)
    full = simlab.draw_stratified_sample(pop, [30] * 6, 0)
    for area, rows in pop.census.area_index.items():
        assert sorted(full.y[full.area_index[area]]) == sorted(pop.census.y[rows])
    assert np.all(full.pi == 1.0)

    one = simlab.draw_stratified_sample(pop, [1] * 6, 0)
    assert len(one) == 6 and one.D_s == 6
    assert np.allclose(one.pi, 1 / 30)

    part = simlab.draw_stratified_sample(pop, {"2": 3, "5": 4}, 0)
    assert part.areas == ("2", "5") and part.n_d.tolist() == [3, 4]
    assert not np.any(pop.census.in_sample(part)[[0, 2, 3, 5]])

    with pytest.raises(ValueError):
        simlab.draw_stratified_sample(pop, [31] + [1] * 5, 0)


def test_ht_estimators():
    s = SurveySample(np.array(["a", "a"], dtype=object), np.zeros((2, 1)), np.array([10.0, 20.0]),
                     np.array([0.5, 0.5]), ("x",))
    assert simlab.ht_area_means(s).tolist() == [30.0]
    assert simlab.ht_area_means(s, "N").tolist() == [15.0]
    ones = SurveySample(np.array(["a", "b", "a"], dtype=object), np.zeros((3, 1)), np.array([1.0, 5.0, 4.0]),
                        np.ones(3), ("x",))
    assert simlab.ht_area_means(ones).tolist() == [2.5, 5.0]
    assert np.isnan(simlab.ht_for_areas(ones, ["a", "z"])[1])
    with pytest.raises(ValueError, match="inclusion"):
        simlab.ht_area_means(SurveySample(s.area_ids, s.x, s.y, None, ("x",)))


def test_metric_examples():
    tru = np.array([[100.0], [100.0]])
    est = np.array([[110.0], [90.0]])
    assert simlab.metric_rb(est, tru).tolist() == [0.0]
    assert simlab.metric_rrmse(est, tru).tolist() == [0.1]
    assert simlab.metric_rb(tru, tru).tolist() == [0.0] and simlab.metric_rrmse(tru, tru).tolist() == [0.0]
    emp = simlab.empirical_rmse(est, tru)
    assert emp.tolist() == [10.0]
    mse = np.full((2, 1), 100.0)
    assert simlab.metric_rb_rmse(mse, emp).tolist() == [0.0]
    assert simlab.metric_rrmse_rmse(mse, emp).tolist() == [0.0]


def test_metric_degeneracies():
    rng = np.random.default_rng(0)
    tru = rng.uniform(50, 100, size=(1, 5))
    est = tru + rng.normal(size=(1, 5))
    assert np.all(simlab.metric_rrmse(est, tru) >= np.abs(est - tru)[0] / tru[0] - 1e-15)
    assert np.all(np.sign(simlab.metric_rb(est, tru)) == np.sign(est - tru)[0])
    mse = np.tile(rng.uniform(1, 4, size=5), (3, 1))
    emp = rng.uniform(1, 2, size=5)
    assert np.all(simlab.metric_rrmse_rmse(mse, emp) >= np.abs(simlab.metric_rb_rmse(mse, emp)) - 1e-12)
    with pytest.raises(ValueError):
        simlab.metric_rb(est, np.zeros((1, 5)))
    with pytest.raises(ValueError):
        simlab.metric_rb_rmse(mse, np.zeros(5))


def test_full_census_sample_makes_ht_exact():
    res = simlab.run_monte_carlo(TINY, ["HT"], 1, 4, allocation=[30] * 6)
    assert np.allclose(res.estimates["HT"], res.truths, rtol=1e-14)
    assert res.n_mc == 1 and not res.failures


def test_monte_carlo_determinism_and_output(tmp_path):
    a = simlab.run_monte_carlo(TINY, ["HT", "BHF", "MEGB"], 2, 9, allocation=[5] * 6)
    b = simlab.run_monte_carlo(TINY, ["HT", "BHF", "MEGB"], 2, 9, allocation=[5] * 6, n_jobs=2)
    for est in a.estimators:
        assert np.array_equal(a.estimates[est], b.estimates[est])
    assert np.array_equal(a.truths, b.truths)
    assert a.estimates["MEGB"].shape == (2, 6)
    simlab.write_long_csv([a], tmp_path / "long.csv")
    simlab.write_summary_csv([a], tmp_path / "summary.csv")
    assert len((tmp_path / "long.csv").read_text().splitlines()) == 1 + 3 * 2 * 6
    summary = (tmp_path / "summary.csv").read_text().splitlines()
    assert summary[0] == "metric,estimator,Linear-Normal mean,Linear-Normal median"
    assert {line.split(",")[0] for line in summary[1:]} == {"RB", "RRMSE"}


def test_monte_carlo_rejects_bad_requests():
    with pytest.raises(ValueError, match="supported estimators"):
        simlab.run_monte_carlo(TINY, ["EBP-BC"], 1, 0)
    with pytest.raises(ValueError):
        simlab.run_monte_carlo(TINY, ["HT"], 0, 0)
    with pytest.raises(ValueError, match="MEGB"):
        simlab.run_monte_carlo(TINY, ["HT"], 1, 0, B=2)


def test_truths_match_census_means():
    pop = simlab.generate_population(TINY, 1)
    c = CensusFrame(pop.census.area_ids, pop.census.x, pop.census.y, None, pop.census.covariate_names)
    assert np.array_equal(pop.true_means, [c.y[r].mean() for r in c.area_index.values()])
