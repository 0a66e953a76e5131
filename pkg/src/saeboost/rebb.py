"""Random effect block bootstrap (REBB) MSE estimation for MEGB area means.

Marginal residuals ``e = y - f(x) - beta0`` are split into area averages
(level 2) and within-area deviations (level 1). Each set is rescaled to the
fitted variance component and centred, then resampled with replacement to
build bootstrap populations over the census. A sample with the original
per-area sizes is drawn from every bootstrap population, MEGB is refitted
with the point-estimate settings, and

    mse_d = B^-1 sum_b (mu_d^(b) - muhat_d^(b))^2.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import megb
from .core import CensusFrame, SurveySample, check_compatible, substream

log = logging.getLogger(__name__)


class DegenerateResidualsError(ValueError):
    """Residuals have zero spread, so they cannot be rescaled to a positive variance."""


class ReplicateError(RuntimeError):
    def __init__(self, index: int, cause: Exception):
        super().__init__(f"bootstrap replicate {index} failed: {type(cause).__name__}: {cause}")
        self.index = index


@dataclass(frozen=True, eq=False)
class ResidualDecomposition:
    areas: tuple[str, ...]
    level2_raw: np.ndarray
    level1_raw: tuple[np.ndarray, ...]
    level2_scaled: np.ndarray
    level1_scaled: tuple[np.ndarray, ...]

    @property
    def level1_pooled(self) -> np.ndarray:
        return np.concatenate(self.level1_scaled)

    @property
    def n_d(self) -> np.ndarray:
        return np.array([len(r) for r in self.level1_scaled])


def scale_center(r: np.ndarray, target_var: float) -> np.ndarray:
    """Multiply by ``sqrt(target_var) / sd(r)`` (denominator n), then centre."""
    r = np.asarray(r, dtype=float)
    if target_var == 0:
        return np.zeros_like(r)
    sd = np.std(r)
    if not sd > 0:
        raise DegenerateResidualsError("residuals have zero spread; cannot rescale them")
    scaled = r * (np.sqrt(target_var) / sd)
    return scaled - scaled.mean()


def decompose_residuals(model: megb.MegbModel, sample: SurveySample) -> ResidualDecomposition:
    e = sample.y - model.fixed_part(sample.x)
    index = sample.area_index
    level2 = np.array([e[rows].mean() for rows in index.values()])
    level1 = tuple(e[rows] - m for rows, m in zip(index.values(), level2))

    pooled = np.concatenate(level1)
    s1 = scale_center(pooled, model.sigma_eps2)
    splits = np.cumsum([len(r) for r in level1])[:-1]
    if len(level2) > 1 and np.std(level2) > 0:
        s2 = scale_center(level2, model.sigma_v2)
    else:
        # a single area (or identical area means) carries no level-2 spread
        s2 = np.zeros_like(level2)
    return ResidualDecomposition(sample.areas, level2, level1, s2, tuple(np.split(s1, splits)))


def sample_bootstrap_errors(dec: ResidualDecomposition, rng, n_level2: int | None = None,
                            level1_sizes=None, donors: str = "pooled"):
    """Draw level-2 and level-1 bootstrap errors with replacement.

    By default returns ``D_s`` level-2 draws and ``n_d`` level-1 draws per
    sampled area. ``n_level2`` and ``level1_sizes`` override the draw sizes
    (the bootstrap population needs one level-2 draw per census area and
    ``N_d`` level-1 draws).

    ``donors="pooled"`` draws level-1 errors from the scaled residuals of all
    areas; ``donors="area"`` draws area ``d``'s errors from its own residuals,
    falling back to the pool for positions beyond the sampled areas.
    """
    if donors not in ("pooled", "area"):
        raise ValueError("donors must be 'pooled' or 'area'")
    rng = np.random.default_rng(rng)
    n2 = len(dec.level2_scaled) if n_level2 is None else int(n_level2)
    sizes = dec.n_d if level1_sizes is None else np.asarray(level1_sizes, dtype=np.int64)
    level2 = rng.choice(dec.level2_scaled, size=n2, replace=True)
    pooled = dec.level1_pooled
    level1 = []
    for d, s in enumerate(sizes):
        pool = dec.level1_scaled[d] if donors == "area" and d < len(dec.level1_scaled) else pooled
        level1.append(rng.choice(pool, size=int(s), replace=True))
    return level2, level1


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    areas: tuple[str, ...]
    truth: np.ndarray     # (B, D) bootstrap population means
    estimate: np.ndarray  # (B, D) bootstrap MEGB estimates

    @property
    def B(self) -> int:
        return self.truth.shape[0]

    @property
    def mse(self) -> np.ndarray:
        return np.mean((self.truth - self.estimate) ** 2, axis=0)

    @property
    def rmse(self) -> np.ndarray:
        return np.sqrt(self.mse)

    def pairs(self, area) -> list[tuple[float, float]]:
        d = self.areas.index(area)
        return list(zip(self.truth[:, d].tolist(), self.estimate[:, d].tolist()))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["area_id", "mse", "rmse", "B"])
            for area, m, r in zip(self.areas, self.mse.tolist(), self.rmse.tolist()):
                w.writerow([area, repr(m), repr(r), self.B])


def replicate(model: megb.MegbModel, sample: SurveySample, census: CensusFrame,
              dec: ResidualDecomposition, seed, b: int, donors: str = "pooled"):
    """Bootstrap replicate ``b``: (population means, MEGB estimates) per census area."""
    rng = np.random.default_rng(substream(seed, "replicate", b))
    index = census.area_index
    if donors == "area":
        # align each census area with its own residual block; unsampled areas use the pool
        pos = {a: k for k, a in enumerate(dec.areas)}
        blocks = tuple(dec.level1_scaled[pos[a]] if a in pos else dec.level1_pooled for a in census.areas)
        dec = dataclasses.replace(dec, level1_scaled=blocks)
    level2, level1 = sample_bootstrap_errors(dec, rng, census.n_areas, census.N_d, donors)
    y = model.fixed_part(census.x)
    for d, rows in enumerate(index.values()):
        y[rows] += level2[d] + level1[d]
    pop = CensusFrame(census.area_ids, census.x, y, None, census.covariate_names)
    truth = megb._area_means(y, pop)

    rows = []
    for area, n in zip(sample.areas, sample.n_d):
        idx = index[area]
        rows.append(idx[np.sort(rng.choice(len(idx), size=int(n), replace=False))])
    rows = np.concatenate(rows)
    boot = SurveySample(census.area_ids[rows], census.x[rows], y[rows], None, census.covariate_names)
    refit = megb.fit_megb(boot, model.params, model.em, substream(seed, "refit", b))
    return truth, megb.area_means(refit, census)


def _replicate_star(args):
    model, sample, census, dec, seed, b, donors = args
    try:
        return replicate(model, sample, census, dec, seed, b, donors)
    except Exception as exc:
        raise ReplicateError(b, exc) from exc


def bootstrap_mse(model: megb.MegbModel, sample: SurveySample, census: CensusFrame, B: int,
                  seed=0, n_jobs: int = 1, donors: str = "pooled") -> BootstrapResult:
    """REBB MSE estimates for every census area.

    Replicate ``b`` uses streams derived from ``(seed, b)`` only, so the
    result is the same for any ``n_jobs``. ``donors`` selects pooled or
    per-area level-1 residual donors (see :func:`sample_bootstrap_errors`).
    """
    if int(B) != B or B < 1:
        raise ValueError("B must be a positive integer")
    check_compatible(sample, census)
    missing = [a for a in sample.areas if a not in set(census.areas)]
    if missing:
        raise ValueError(f"census lacks sampled area(s) {missing}")
    dec = decompose_residuals(model, sample)
    if donors not in ("pooled", "area"):
        raise ValueError("donors must be 'pooled' or 'area'")
    jobs = [(model, sample, census, dec, seed, b, donors) for b in range(int(B))]
    if n_jobs == 1:
        out = []
        for job in jobs:
            out.append(_replicate_star(job))
            log.info("bootstrap replicate %d/%d done", job[5] + 1, B)
    else:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            out = []
            for b, res in enumerate(pool.map(_replicate_star, jobs)):
                out.append(res)
                log.info("bootstrap replicate %d/%d done", b + 1, B)
    truth = np.array([t for t, _ in out])
    est = np.array([e for _, e in out])
    return BootstrapResult(census.areas, truth, est)
