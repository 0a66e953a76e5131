"""Mixed effect gradient boosting (MEGB) for unit-level small area estimation.

The fixed part ``f(x)`` is a boosted tree ensemble, the random part a
per-area intercept. Fitting alternates the two by EM:

1. ``y* = y - beta0 - v[area]``; boost on ``y*`` to get ``f``.
2. ``y** = y - f(x)``; fit an intercept-only random-intercept LMM on ``y**``
   to update ``beta0``, the area effects ``v`` and both variances.
3. Stop when the relative change of the generalized log-likelihood (GLL)
   drops below ``tol``.
"""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import gbdt, lmm
from .core import CensusFrame, Hyperparams, SurveySample, substream

log = logging.getLogger(__name__)

FORMAT_TAG = "# saeboost megb model v1"


@dataclass(frozen=True)
class EmConfig:
    tol: float = 1e-4
    iter_max: int = 100

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if int(self.iter_max) != self.iter_max or self.iter_max < 1:
            raise ValueError("iter_max must be a positive integer")
        object.__setattr__(self, "iter_max", int(self.iter_max))


@dataclass(frozen=True, eq=False)
class MegbModel:
    ensemble: gbdt.BoostedEnsemble
    beta0: float
    areas: tuple[str, ...]
    vartheta: np.ndarray
    sigma_eps2: float
    sigma_v2: float
    trace: tuple[float, ...]
    iterations: int
    converged: bool
    params: Hyperparams = Hyperparams()
    em: EmConfig = EmConfig()

    @property
    def effects(self) -> dict[str, float]:
        return dict(zip(self.areas, self.vartheta.tolist()))

    def effect_for(self, area_ids) -> np.ndarray:
        """Random effect per label in ``area_ids``; unsampled areas get 0."""
        eff = self.effects
        return np.array([eff.get(a, 0.0) for a in area_ids], dtype=float)

    def fixed_part(self, x) -> np.ndarray:
        """``f(x) + beta0``."""
        return gbdt.predict(self.ensemble, x) + self.beta0

    def __eq__(self, other):
        if not isinstance(other, MegbModel):
            return NotImplemented
        return (self.ensemble == other.ensemble and self.beta0 == other.beta0
                and self.areas == other.areas and np.array_equal(self.vartheta, other.vartheta)
                and self.sigma_eps2 == other.sigma_eps2 and self.sigma_v2 == other.sigma_v2
                and self.trace == other.trace and self.iterations == other.iterations
                and self.converged == other.converged)


def em_rng(seed, iteration: int) -> np.random.Generator:
    """Boosting generator for EM iteration ``iteration``.

    Every iteration gets a fresh generator on the same ``boost`` stream, so
    successive boosting fits share their holdout split and subsamples and the
    GLL trace reflects changes in the working response only.
    """
    return np.random.default_rng(substream(seed, "boost"))


def _gll(resid, v_rows, s2e, s2v) -> float:
    if not s2e > 0 or s2v < 0:
        raise ValueError(f"invalid variance components ({s2e}, {s2v})")
    total = resid @ resid / s2e + len(resid) * math.log(s2e)
    if s2v > 0:
        total += v_rows @ v_rows / s2v + len(resid) * math.log(s2v)
    return float(total)


def gll(model: MegbModel, sample: SurveySample) -> float:
    """Generalized log-likelihood, summed over units.

    Each unit contributes ``e^2/s2e + v^2/s2v + log s2v + log s2e`` with
    ``e = y - f(x) - beta0 - v``. When ``s2v == 0`` the terms involving ``v``
    are dropped.
    """
    v_rows = model.effect_for(sample.area_ids)
    resid = sample.y - model.fixed_part(sample.x) - v_rows
    return _gll(resid, v_rows, model.sigma_eps2, model.sigma_v2)


def _relative_change(cur: float, prev: float) -> float:
    if prev == 0:
        return abs(cur - prev)
    return abs((cur - prev) / prev)


def fit_megb(sample: SurveySample, params: Hyperparams = Hyperparams(),
             em: EmConfig = EmConfig(), seed=0) -> MegbModel:
    """Fit MEGB by EM; ``seed`` is an int or :class:`numpy.random.SeedSequence`."""
    if sample.D_s < 2:
        raise ValueError("MEGB needs at least two sampled areas")
    y, x, codes = sample.y, sample.x, sample.codes
    ones = np.ones((len(y), 1))
    beta0 = 0.0
    v = np.zeros(sample.D_s)
    trace: list[float] = []
    converged = False
    for it in range(1, em.iter_max + 1):
        ystar = y - beta0 - v[codes]
        ens = gbdt.fit_boosted(x, ystar, params, em_rng(seed, it))
        fhat = gbdt.predict(ens, x)
        fit = lmm.fit_ml(y - fhat, ones, codes)
        beta0 = float(fit.beta[0])
        # fit.areas are the integer codes in first-appearance order, i.e. 0..D-1
        v = np.asarray(fit.vartheta, dtype=float)
        s2e, s2v = fit.sigma_eps2, fit.sigma_v2
        v_rows = v[codes]
        trace.append(_gll(y - fhat - beta0 - v_rows, v_rows, s2e, s2v))
        if it == 1:
            # tol = inf means a single pass
            converged = math.isinf(em.tol)
        else:
            converged = _relative_change(trace[-1], trace[-2]) < em.tol
        log.debug("EM iteration %d: GLL=%.6f rounds=%d s2e=%.4g s2v=%.4g",
                  it, trace[-1], ens.n_rounds_used, s2e, s2v)
        if converged:
            break
    return MegbModel(ens, beta0, sample.areas, v, s2e, s2v, tuple(trace), len(trace),
                     converged, params, em)


def predict_units(model: MegbModel, census: CensusFrame) -> np.ndarray:
    """``f(x) + beta0 + v_d`` per census row; out-of-sample areas omit ``v_d``."""
    return model.fixed_part(census.x) + model.effect_for(census.area_ids)


def _area_means(values: np.ndarray, data) -> np.ndarray:
    return np.array([values[rows].mean() for rows in data.area_index.values()])


def area_means(model: MegbModel, census: CensusFrame) -> np.ndarray:
    """Estimated area means aligned with ``census.areas``.

    ``beta0 + mean_i f(x_di) + v_d``; ``beta0`` is added because the EM
    removes it from the response before boosting. Agrees with the area mean
    of :func:`predict_units` up to rounding.
    """
    if census.p != model.ensemble.n_features:
        raise ValueError(f"census has {census.p} covariates, model expects {model.ensemble.n_features}")
    f = gbdt.predict(model.ensemble, census.x)
    return model.beta0 + _area_means(f, census) + model.effect_for(census.areas)


def area_totals(model: MegbModel, census: CensusFrame) -> np.ndarray:
    return census.N_d * area_means(model, census)


# ---------------------------------------------------------------------------
# sequential grid search

TUNE_ORDER = ("eta", "max_depth", "min_child_weight", "subsample",
              "colsample_bytree", "reg_lambda", "gamma")

DEFAULT_GRID = {
    "eta": [0.01, 0.05, 0.1],
    "max_depth": [2, 3, 4, 6],
    "min_child_weight": [1, 3, 5],
    "subsample": [0.5, 0.75, 1.0],
    "reg_lambda": [0.0, 1.0, 5.0],
    "gamma": [0.0, 0.9, 5.0],
}


def holdout_score(sample: SurveySample, params: Hyperparams, seed=0) -> float:
    """Best holdout RMSE of a plain boosted fit (no random effects)."""
    ens = gbdt.fit_boosted(sample.x, sample.y, params, np.random.default_rng(substream(seed, "tune")))
    return min(ens.holdout_rmse)


def tune_sequential(sample: SurveySample, grid: dict, order=None, seed=0,
                    base: Hyperparams | None = None, log_steps: list | None = None) -> Hyperparams:
    """Tune one hyperparameter at a time, in ``order``, keeping the best value.

    Every candidate is scored by :func:`holdout_score` with the same seed, so
    all candidates see the same holdout split. Ties keep the earlier
    candidate. If ``log_steps`` is given, one ``(name, value, rmse)`` tuple is
    appended per evaluated candidate.
    """
    params = base or Hyperparams()
    order = tuple(order) if order is not None else tuple(k for k in TUNE_ORDER if k in grid)
    valid = {f.name for f in fields(Hyperparams)}
    for name in order:
        if name not in valid:
            raise ValueError(f"unknown hyperparameter {name!r}")
        candidates = list(grid.get(name, ()))
        if not candidates:
            raise ValueError(f"empty candidate list for {name!r}")
        best_value, best_score = None, math.inf
        for value in candidates:
            score = holdout_score(sample, params.replace(**{name: value}), seed)
            if log_steps is not None:
                log_steps.append((name, value, score))
            if score < best_score:
                best_value, best_score = value, score
        params = params.replace(**{name: best_value})
    return params


# ---------------------------------------------------------------------------
# persistence


def save_model(model: MegbModel, fh) -> None:
    fh.write(FORMAT_TAG + "\n")
    fh.write(f"beta0\t{model.beta0!r}\n")
    fh.write(f"sigma_eps2\t{model.sigma_eps2!r}\n")
    fh.write(f"sigma_v2\t{model.sigma_v2!r}\n")
    fh.write(f"iterations\t{model.iterations}\n")
    fh.write(f"converged\t{str(model.converged).lower()}\n")
    fh.write("trace\t" + ",".join(repr(float(t)) for t in model.trace) + "\n")
    for key, value in asdict(model.params).items():
        fh.write(f"param.{key}\t{value!r}\n")
    fh.write(f"em.tol\t{model.em.tol!r}\n")
    fh.write(f"em.iter_max\t{model.em.iter_max}\n")
    fh.write(f"n_areas\t{len(model.areas)}\n")
    for area, value in zip(model.areas, model.vartheta.tolist()):
        fh.write(f"vartheta\t{json.dumps(area)}\t{value!r}\n")
    gbdt.dump_ensemble(model.ensemble, fh)


def model_to_text(model: MegbModel) -> str:
    buf = io.StringIO()
    save_model(model, buf)
    return buf.getvalue()


def load_model(fh) -> MegbModel:
    lines = iter(fh.read().splitlines())
    if next(lines, "").strip() != FORMAT_TAG:
        raise ValueError("not a saeboost model file")
    kv: dict[str, str] = {}
    areas, effects = [], []
    for line in lines:
        if line == "[ensemble]":
            ensemble = gbdt.load_ensemble([line, *lines])
            break
        parts = line.split("\t")
        if parts[0] == "vartheta":
            areas.append(json.loads(parts[1]))
            effects.append(float(parts[2]))
        else:
            kv[parts[0]] = parts[1] if len(parts) > 1 else ""
    else:
        raise ValueError("model file has no [ensemble] block")
    if len(areas) != int(kv["n_areas"]):
        raise ValueError("model file lists the wrong number of area effects")
    types = {f.name: f.type for f in fields(Hyperparams)}
    params = {}
    for key, raw in kv.items():
        if key.startswith("param."):
            name = key[len("param."):]
            params[name] = int(raw) if types[name] in ("int", int) else float(raw)
    trace = tuple(float(t) for t in kv["trace"].split(",") if t)
    return MegbModel(
        ensemble, float(kv["beta0"]), tuple(areas), np.array(effects),
        float(kv["sigma_eps2"]), float(kv["sigma_v2"]), trace, int(kv["iterations"]),
        kv["converged"] == "true", Hyperparams(**params),
        EmConfig(float(kv["em.tol"]), int(kv["em.iter_max"])),
    )
