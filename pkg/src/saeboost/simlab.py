"""Model-based simulation: data-generating scenarios, stratified sampling,
evaluation metrics, the Horvitz-Thompson direct estimator and a Monte-Carlo
harness comparing HT, BHF and MEGB.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import lmm, megb, rebb
from .core import CensusFrame, Hyperparams, SurveySample, substream

log = logging.getLogger(__name__)

ESTIMATORS = ("HT", "BHF", "MEGB", "MEGB-tuned")


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    mean_fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    x1_sd: float
    x2_sd: float
    sigma_v: float
    error: tuple  # ("normal", sd) or ("pareto", shape, scale)
    mu_range: tuple[float, float] = (-1.0, 1.0)
    D: int = 50
    N_d: int = 1000

    def scaled(self, D: int | None = None, N_d: int | None = None) -> "ScenarioSpec":
        return ScenarioSpec(self.name, self.mean_fn, self.x1_sd, self.x2_sd, self.sigma_v,
                            self.error, self.mu_range, D or self.D, N_d or self.N_d)


def _linear(x1, x2):
    return 5000 - 500 * x1 - 500 * x2


def _complex_normal(x1, x2):
    return 15000 - 500 * x1 * x2 - 250 * x2 ** 2


def _complex_pareto(x1, x2):
    return 20000 - 500 * x1 * x2 - 250 * x2 ** 2


SCENARIOS = {
    "Linear-Normal": ScenarioSpec("Linear-Normal", _linear, 3.0, 3.0, 500.0, ("normal", 1000.0)),
    "Complex-Normal": ScenarioSpec("Complex-Normal", _complex_normal, 4.0, 2.0, 500.0, ("normal", 1000.0)),
    "Linear-Pareto": ScenarioSpec("Linear-Pareto", _linear, 3.0, 3.0, 500.0, ("pareto", 3.0, 800.0)),
    "Complex-Pareto": ScenarioSpec("Complex-Pareto", _complex_pareto, 2.0, 2.0, 1000.0, ("pareto", 3.0, 800.0)),
}


def get_scenario(name: str) -> ScenarioSpec:
    try:
        return SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose one of {sorted(SCENARIOS)}") from None


def pareto_from_uniform(u, k: float, a: float):
    """Inverse CDF of the Pareto(k, a) law: ``a * u**(-1/k)``, support ``[a, inf)``."""
    return a * np.power(u, -1.0 / k)


def sample_pareto(k: float, a: float, rng: np.random.Generator, size=None):
    if not k > 1 or not a > 0:
        raise ValueError("Pareto sampling needs shape k > 1 and scale a > 0")
    # 1 - U lies in (0, 1]
    return pareto_from_uniform(1.0 - rng.random(size), k, a)


@dataclass(frozen=True, eq=False)
class PopulationRealization:
    census: CensusFrame
    true_means: np.ndarray


def _errors(spec: ScenarioSpec, rng, size):
    kind = spec.error[0]
    if kind == "normal":
        return rng.normal(0.0, spec.error[1], size)
    if kind == "pareto":
        return sample_pareto(spec.error[1], spec.error[2], rng, size)
    raise ValueError(f"unknown error law {kind!r}")


def generate_population(spec: ScenarioSpec, rng) -> PopulationRealization:
    rng = np.random.default_rng(rng)
    D, N_d = spec.D, spec.N_d
    lo, hi = spec.mu_range
    mu1 = rng.uniform(lo, hi, D)
    mu2 = rng.uniform(lo, hi, D)
    v = rng.normal(0.0, spec.sigma_v, D)
    area = np.repeat(np.arange(D), N_d)
    x1 = rng.normal(mu1[area], spec.x1_sd)
    x2 = rng.normal(mu2[area], spec.x2_sd)
    y = spec.mean_fn(x1, x2) + v[area] + _errors(spec, rng, D * N_d)
    labels = np.array([f"{d + 1}" for d in range(D)], dtype=object)[area]
    census = CensusFrame(labels, np.column_stack([x1, x2]), y, None, ("x1", "x2"))
    return PopulationRealization(census, megb._area_means(census.y, census))


def default_allocation(D: int = 50, lo: int = 6, hi: int = 49, total: int = 1410) -> np.ndarray:
    """Fixed per-area sample sizes: a rounded linear ramp from ``lo`` to ``hi``
    with +/-1 adjustments on evenly spaced interior areas so the sizes sum to
    ``total``. Only areas whose adjustment keeps the ramp non-decreasing are used."""
    ramp = np.rint(np.linspace(lo, hi, D)).astype(np.int64)
    gap = int(total - ramp.sum())
    if gap:
        step = np.sign(gap)
        # a decrement needs a strict rise from the left neighbour, an increment one to the right
        inner = np.arange(1, D - 1)
        rise = ramp[inner] > ramp[inner - 1] if step < 0 else ramp[inner + 1] > ramp[inner]
        ok = inner[rise]
        if abs(gap) > len(ok):
            raise ValueError("cannot reach the requested total with +/-1 interior adjustments")
        ramp[ok[np.rint(np.linspace(0, len(ok) - 1, abs(gap))).astype(np.int64)]] += step
    return ramp


def desk_allocation(D: int, N_d: int, total: int = 1410, lo: int = 6, hi: int = 49) -> np.ndarray:
    """Default ramp for ``D`` areas rescaled to about ``total`` and capped at ``N_d``."""
    ramp = np.linspace(lo, hi, D)
    ramp *= total / ramp.sum()
    return np.clip(np.rint(ramp), 1, N_d).astype(np.int64)


def draw_stratified_sample(pop: PopulationRealization | CensusFrame, allocation, rng) -> SurveySample:
    """SRSWOR of ``allocation[area]`` units within each area.

    ``allocation`` is a mapping area -> n_d or a sequence aligned with the
    population's areas. Areas missing from a mapping (or with size 0) stay
    out of sample. Records carry ``pi = n_d / N_d``.
    """
    census = pop.census if isinstance(pop, PopulationRealization) else pop
    if census.y is None:
        raise ValueError("population needs responses to draw a survey sample")
    rng = np.random.default_rng(rng)
    if isinstance(allocation, dict):
        sizes = {str(k): int(v) for k, v in allocation.items()}
    else:
        allocation = np.asarray(allocation)
        if len(allocation) != census.n_areas:
            raise ValueError("allocation length does not match the number of areas")
        sizes = dict(zip(census.areas, allocation.tolist()))
    unknown = set(sizes) - set(census.areas)
    if unknown:
        raise ValueError(f"allocation names areas not in the population: {sorted(unknown)}")
    rows, pis = [], []
    for area, idx in census.area_index.items():
        n = sizes.get(area, 0)
        if n == 0:
            continue
        if not 0 < n <= len(idx):
            raise ValueError(f"area {area!r}: sample size {n} outside 1..{len(idx)}")
        pick = np.sort(rng.choice(len(idx), size=n, replace=False))
        rows.append(idx[pick])
        pis.append(np.full(n, n / len(idx)))
    rows = np.concatenate(rows)
    return SurveySample(census.area_ids[rows], census.x[rows], census.y[rows],
                        np.concatenate(pis), census.covariate_names)


def ht_area_means(sample: SurveySample, denominator: str = "n") -> np.ndarray:
    """Horvitz-Thompson area means aligned with ``sample.areas``.

    ``denominator="n"`` gives ``n_d^-1 sum_i y_di / pi_di``; ``"N"`` divides
    ``sum_i y_di / pi_di`` by the estimated size ``sum_i 1 / pi_di`` instead,
    which is the usual estimator of a mean (equal to the sample mean under SRSWOR).
    """
    if sample.pi is None:
        raise ValueError("HT estimation needs inclusion probabilities")
    if denominator == "n":
        return megb._area_means(sample.y / sample.pi, sample)
    if denominator == "N":
        return megb._area_means(sample.y / sample.pi, sample) / megb._area_means(1.0 / sample.pi, sample)
    raise ValueError("denominator must be 'n' or 'N'")


def ht_for_areas(sample: SurveySample, areas, denominator: str = "N") -> np.ndarray:
    """HT mean estimates for ``areas``; NaN for areas without sample units."""
    est = dict(zip(sample.areas, ht_area_means(sample, denominator)))
    return np.array([est.get(a, np.nan) for a in areas])


# ---------------------------------------------------------------------------
# metrics; inputs are (n_MC, D) arrays


def _runs(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return a.reshape(-1, 1) if a.ndim == 1 else a


def metric_rb(estimates, truths) -> np.ndarray:
    est, tru = _runs(estimates), _runs(truths)
    if np.any(tru == 0):
        raise ValueError("relative bias needs nonzero truths")
    return np.mean((est - tru) / tru, axis=0)


def metric_rrmse(estimates, truths) -> np.ndarray:
    est, tru = _runs(estimates), _runs(truths)
    denom = np.mean(tru, axis=0)
    if np.any(denom == 0):
        raise ValueError("RRMSE needs a nonzero mean truth")
    return np.sqrt(np.mean((est - tru) ** 2, axis=0)) / denom


def empirical_rmse(estimates, truths) -> np.ndarray:
    est, tru = _runs(estimates), _runs(truths)
    return np.sqrt(np.mean((est - tru) ** 2, axis=0))


def metric_rb_rmse(mse_estimates, rmse_emp) -> np.ndarray:
    mse, emp = _runs(mse_estimates), np.asarray(rmse_emp, dtype=float)
    if np.any(emp <= 0):
        raise ValueError("RB-RMSE needs a positive empirical RMSE")
    return (np.sqrt(np.mean(mse, axis=0)) - emp) / emp * 100


def metric_rrmse_rmse(mse_estimates, rmse_emp) -> np.ndarray:
    mse, emp = _runs(mse_estimates), np.asarray(rmse_emp, dtype=float)
    if np.any(emp <= 0):
        raise ValueError("RRMSE-RMSE needs a positive empirical RMSE")
    return np.sqrt(np.mean((np.sqrt(mse) - emp) ** 2, axis=0)) / emp * 100


# ---------------------------------------------------------------------------
# Monte-Carlo harness


@dataclass(eq=False)
class McResult:
    scenario: str
    areas: tuple[str, ...]
    estimators: tuple[str, ...]
    estimates: dict[str, np.ndarray]
    truths: np.ndarray
    mse: np.ndarray | None = None
    failures: list[tuple[int, str, str]] = field(default_factory=list)

    @property
    def n_mc(self) -> int:
        return self.truths.shape[0]

    def summary(self) -> list[dict]:
        """Mean/median over areas of each metric, per estimator (RB and RRMSE in %)."""
        rows = []
        for est in self.estimators:
            e = self.estimates[est]
            keep = ~np.any(np.isnan(e), axis=0)
            if not keep.any():
                continue
            for name, values in (("RB", 100 * metric_rb(e[:, keep], self.truths[:, keep])),
                                 ("RRMSE", 100 * metric_rrmse(e[:, keep], self.truths[:, keep]))):
                rows.append({"metric": name, "estimator": est,
                             "mean": float(np.mean(values)), "median": float(np.median(values))})
        if self.mse is not None and "MEGB" in self.estimates:
            emp = empirical_rmse(self.estimates["MEGB"], self.truths)
            for name, fn in (("RB-RMSE", metric_rb_rmse), ("RRMSE-RMSE", metric_rrmse_rmse)):
                values = fn(self.mse, emp)
                rows.append({"metric": name, "estimator": "MEGB",
                             "mean": float(np.mean(values)), "median": float(np.median(values))})
        return rows

    def long_rows(self):
        for est in self.estimators:
            for j in range(self.n_mc):
                for d, area in enumerate(self.areas):
                    mse = ""
                    if est == "MEGB" and self.mse is not None:
                        mse = repr(float(self.mse[j, d]))
                    yield [self.scenario, est, j, area, repr(float(self.estimates[est][j, d])),
                           repr(float(self.truths[j, d])), mse]

    def write_long_csv(self, path) -> None:
        write_long_csv([self], path)


def write_long_csv(results: list[McResult], path) -> None:
    """Per-run, per-area estimates of all results, one row per (estimator, run, area)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "estimator", "run", "area", "estimate", "truth", "mse_est"])
        for res in results:
            w.writerows(res.long_rows())


def write_summary_csv(results: list[McResult], path) -> None:
    """Metric summary with one row per (metric, estimator) and a mean and median
    column per scenario."""
    scenarios = [r.scenario for r in results]
    cells: dict[tuple[str, str], dict[str, tuple[float, float]]] = {}
    for res in results:
        for row in res.summary():
            cells.setdefault((row["metric"], row["estimator"]), {})[res.scenario] = (row["mean"], row["median"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "estimator"] + [f"{s} {stat}" for s in scenarios for stat in ("mean", "median")])
        for (metric, est), by in cells.items():
            line = [metric, est]
            for s in scenarios:
                mean, median = by.get(s, (math.nan, math.nan))
                line += [f"{mean:.6f}", f"{median:.6f}"]
            w.writerow(line)


@dataclass(frozen=True)
class McConfig:
    scenario: ScenarioSpec
    estimators: tuple[str, ...]
    allocation: tuple[int, ...]
    params: Hyperparams = Hyperparams()
    em: megb.EmConfig = megb.EmConfig()
    B: int | None = None
    tune_grid: tuple | None = None


def check_estimators(names) -> tuple[str, ...]:
    names = tuple(names)
    bad = [n for n in names if n not in ESTIMATORS]
    if bad:
        raise ValueError(f"unsupported estimator(s) {bad}; supported estimators are {list(ESTIMATORS)}")
    return names


def run_once(cfg: McConfig, master_seed: int, j: int):
    """One Monte-Carlo run: (truths, {estimator: estimates}, mse or None, failures)."""
    pop = generate_population(cfg.scenario, substream(master_seed, "simulate", j, 0))
    sample = draw_stratified_sample(pop, np.asarray(cfg.allocation), substream(master_seed, "simulate", j, 1))
    census = pop.census
    out, failures, mse = {}, [], None
    model = None
    for est in cfg.estimators:
        try:
            if est == "HT":
                out[est] = ht_for_areas(sample, census.areas)
            elif est == "BHF":
                out[est] = lmm.bhf_area_means(sample, census)
            elif est == "MEGB":
                model = megb.fit_megb(sample, cfg.params, cfg.em, substream(master_seed, "fit", j))
                out[est] = megb.area_means(model, census)
            elif est == "MEGB-tuned":
                grid = dict(cfg.tune_grid) if cfg.tune_grid else megb.DEFAULT_GRID
                tuned = megb.tune_sequential(sample, grid, seed=substream(master_seed, "tune", j),
                                             base=cfg.params)
                m = megb.fit_megb(sample, tuned, cfg.em, substream(master_seed, "fit", j))
                out[est] = megb.area_means(m, census)
        except Exception as exc:  # recorded, run continues
            log.warning("run %d, estimator %s failed: %s", j, est, exc)
            failures.append((j, est, f"{type(exc).__name__}: {exc}"))
            out[est] = np.full(census.n_areas, np.nan)
    if cfg.B:
        mse = np.full(census.n_areas, np.nan)
        if model is not None:
            try:
                mse = rebb.bootstrap_mse(model, sample, census, cfg.B,
                                         substream(master_seed, "bootstrap", j)).mse
            except Exception as exc:
                log.warning("run %d, bootstrap failed: %s", j, exc)
                failures.append((j, "MEGB-bootstrap", f"{type(exc).__name__}: {exc}"))
    return pop.true_means, out, mse, failures


def _run_star(args):
    return run_once(*args)


def run_monte_carlo(scenario: ScenarioSpec | str, estimators, n_mc: int, master_seed: int,
                    B: int | None = None, allocation=None, params: Hyperparams = Hyperparams(),
                    em: megb.EmConfig = megb.EmConfig(), n_jobs: int = 1,
                    tune_grid: dict | None = None) -> McResult:
    """Repeat population generation, sampling and estimation ``n_mc`` times.

    Every run draws from streams derived from ``(master_seed, run)``, so the
    result does not depend on ``n_jobs``. With ``B`` set, MEGB runs are
    followed by a bootstrap MSE estimate.
    """
    spec = get_scenario(scenario) if isinstance(scenario, str) else scenario
    estimators = check_estimators(estimators)
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    if B is not None and "MEGB" not in estimators:
        raise ValueError("bootstrap MSE estimation requires the MEGB estimator")
    if allocation is None:
        allocation = (default_allocation() if spec.D == 50 and spec.N_d >= 49
                      else desk_allocation(spec.D, spec.N_d))
    cfg = McConfig(spec, estimators, tuple(int(a) for a in allocation), params, em, B,
                   tuple(sorted(tune_grid.items())) if tune_grid else None)
    jobs = [(cfg, master_seed, j) for j in range(n_mc)]
    if n_jobs == 1:
        results = []
        for job in jobs:
            results.append(_run_star(job))
            log.info("%s: run %d/%d done", spec.name, job[2] + 1, n_mc)
    else:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_run_star, jobs))
    truths = np.array([r[0] for r in results])
    estimates = {e: np.array([r[1][e] for r in results]) for e in estimators}
    mse = np.array([r[2] for r in results]) if B else None
    failures = [f for r in results for f in r[3]]
    areas = tuple(str(d + 1) for d in range(spec.D))
    return McResult(spec.name, areas, estimators, estimates, truths, mse, failures)
