"""Random-intercept linear mixed model: Gaussian ML fit, BLUP, and the BHF estimator.

Model: ``y_di = x_di' beta + v_d + e_di`` with ``v_d ~ N(0, sigma_v2)`` and
``e_di ~ N(0, sigma_eps2)``, all independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq, minimize

from .core import CensusFrame, SurveySample, check_compatible

LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True, eq=False)
class LmmFit:
    beta: np.ndarray
    sigma_eps2: float
    sigma_v2: float
    areas: tuple
    vartheta: np.ndarray
    loglik: float
    n_d: np.ndarray

    @property
    def shrinkage(self) -> np.ndarray:
        """``n_d sigma_v2 / (sigma_eps2 + n_d sigma_v2)`` per area."""
        return _shrinkage(self.n_d, self.sigma_eps2, self.sigma_v2)

    def effect(self, area) -> float:
        return float(self.vartheta[self.areas.index(area)])


def _shrinkage(n_d, s2e, s2v):
    n_d = np.asarray(n_d, dtype=float)
    if s2v == 0.0:
        return np.zeros_like(n_d)
    return n_d * s2v / (s2e + n_d * s2v)


def _groups(area_ids):
    """Areas in first-appearance order and per-row codes."""
    ids = np.asarray(area_ids)
    _, first, inverse = np.unique(ids, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    codes = rank[inverse.reshape(-1)]
    areas = tuple(ids[np.sort(first)].tolist())
    return areas, codes


class _Problem:
    """Per-area sufficient statistics for the profile likelihood.

    With ``c_d = n_d sigma_eps2 / (sigma_eps2 + n_d sigma_v2)`` the GLS pieces are
    ``X'V^-1 X = (Wxx + sum_d c_d xbar_d xbar_d') / sigma_eps2`` and likewise for
    ``X'V^-1 y`` and ``y'V^-1 y``, where ``W..`` are within-area cross products.
    """

    def __init__(self, y, x, codes, n_areas):
        self.y = y
        self.x = x
        self.codes = codes
        self.n_d = np.bincount(codes, minlength=n_areas).astype(float)
        self.n = len(y)
        self.ybar = np.bincount(codes, y, minlength=n_areas) / self.n_d
        self.xbar = np.stack(
            [np.bincount(codes, x[:, j], minlength=n_areas) for j in range(x.shape[1])], axis=1
        ) / self.n_d[:, None]
        yw = y - self.ybar[codes]
        xw = x - self.xbar[codes]
        self.wxx = xw.T @ xw
        self.wxy = xw.T @ yw
        self.wyy = float(yw @ yw)

    def gls(self, s2e, s2v):
        """GLS beta and the quadratic form r' V^-1 r at the given variances."""
        c = self.n_d * s2e / (s2e + self.n_d * s2v)
        xc = self.xbar * c[:, None]
        a = self.wxx + xc.T @ self.xbar
        b = self.wxy + xc.T @ self.ybar
        if a.shape == (1, 1):
            # intercept-only design, as used inside the EM loop
            if not a[0, 0] > 0:
                raise np.linalg.LinAlgError("Singular matrix")
            beta = b / a[0, 0]
        else:
            beta = np.linalg.solve(a, b)
        quad = self.wyy + float(c @ self.ybar ** 2) - float(b @ beta)
        return beta, max(quad, 0.0) / s2e

    def loglik(self, s2e, s2v):
        beta, quad = self.gls(s2e, s2v)
        logdet = float(np.sum((self.n_d - 1) * np.log(s2e) + np.log(s2e + self.n_d * s2v)))
        return -0.5 * (self.n * LOG_2PI + logdet + quad), beta

    def ratio_score(self, tau):
        """Derivative of the profile log-likelihood (sigma_eps2 profiled out) in
        ``tau = sigma_v2 / sigma_eps2``, and the profiled ``sigma_eps2``."""
        beta, quad = self.gls(1.0, tau)
        rbar = self.ybar - self.xbar @ beta
        if not quad > 0:
            raise np.linalg.LinAlgError("profile quadratic form vanished")
        k = 1.0 + self.n_d * tau
        dquad = -float(np.sum((self.n_d * rbar / k) ** 2))
        return -0.5 * (self.n * dquad / quad + float(np.sum(self.n_d / k))), quad / self.n

    def polish(self, tau):
        """Refine ``tau`` by bracketing a root of :meth:`ratio_score` near it."""
        score = lambda t: self.ratio_score(t)[0]
        lo, hi = tau * 0.99, tau * 1.01
        try:
            for _ in range(20):
                if score(lo) > 0 > score(hi):
                    return brentq(score, lo, hi, xtol=1e-15 * tau, rtol=4 * np.finfo(float).eps)
                lo, hi = lo * 0.5, hi * 2.0
        except np.linalg.LinAlgError:
            pass
        return None

    def profile_scan(self, taus):
        """Best ``(loglik, sigma_eps2, sigma_v2)`` over variance ratios ``taus``,
        with ``sigma_eps2`` at its profiled value."""
        best = (-np.inf, None, None)
        for tau in taus:
            try:
                _, quad = self.gls(1.0, tau)
            except np.linalg.LinAlgError:
                continue
            if not quad > 0:
                continue
            s2e = quad / self.n
            logdet = self.n * np.log(s2e) + float(np.sum(np.log1p(self.n_d * tau)))
            ll = -0.5 * (self.n * LOG_2PI + logdet + self.n)
            if ll > best[0]:
                best = (ll, s2e, tau * s2e)
        return best

    def anova_start(self, beta):
        resid = self.y - self.x @ beta
        rbar = np.bincount(self.codes, resid, minlength=len(self.n_d)) / self.n_d
        within = resid - rbar[self.codes]
        D = len(self.n_d)
        dfw = self.n - D
        s2e = float(within @ within) / dfw if dfw > 0 else float(np.var(resid))
        s2e = max(s2e, 1e-12 * max(float(np.var(self.y)), 1.0))
        between = float(np.sum(self.n_d * (rbar - rbar.mean()) ** 2)) / max(D - 1, 1)
        nbar = (self.n - np.sum(self.n_d ** 2) / self.n) / max(D - 1, 1)
        s2v = (between - s2e) / nbar
        if not s2v > 0:
            s2v = 0.1 * s2e
        return s2e, s2v


def loglik(y, x_fixed, area_ids, sigma_eps2, sigma_v2):
    """Marginal Gaussian log-likelihood profiled over beta (beta set to GLS)."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x_fixed, dtype=float).reshape(len(y), -1)
    areas, codes = _groups(area_ids)
    ll, _ = _Problem(y, x, codes, len(areas)).loglik(float(sigma_eps2), float(sigma_v2))
    return ll


def _blup_from(prob: _Problem, beta, s2e, s2v):
    gam = _shrinkage(prob.n_d, s2e, s2v)
    return gam * (prob.ybar - prob.xbar @ beta)


def fit_ml(y, x_fixed, area_ids, *, xatol: float = 1e-8) -> LmmFit:
    """Maximum likelihood fit of the random-intercept model.

    Nelder-Mead on log-variances, started from ANOVA moment estimates (and
    restarted from a profile-likelihood scan if that finds a better point),
    refined by a bracketed root of the profile score in the variance ratio,
    then compared with the ``sigma_v2 = 0`` boundary, which wins ties.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x_fixed, dtype=float).reshape(len(y), -1)
    areas, codes = _groups(area_ids)
    if len(areas) < 2:
        raise ValueError("at least two areas are needed to identify sigma_v2")
    if np.linalg.matrix_rank(x) < x.shape[1]:
        raise ValueError("fixed-effect design is rank deficient")
    prob = _Problem(y, x, codes, len(areas))

    beta_ols, *_ = np.linalg.lstsq(x, y, rcond=None)
    s2e0, s2v0 = prob.anova_start(beta_ols)

    theta0 = np.log([s2e0, s2v0])

    def nll(theta):
        if np.any(np.abs(theta - theta0) > 60):
            return np.inf
        try:
            ll, _ = prob.loglik(np.exp(theta[0]), np.exp(theta[1]))
        except np.linalg.LinAlgError:
            # extreme variance ratios make the GLS system numerically singular
            return np.inf
        return -ll

    # the profile likelihood carries rounding noise of a few ulps of |f|, so an
    # absolute fatol would never be met on large samples
    fatol = 1e-12 * max(1.0, abs(nll(theta0)))
    opts = {"xatol": xatol, "fatol": fatol, "maxiter": 4000, "maxfev": 8000}
    res = minimize(nll, theta0, method="Nelder-Mead", options=opts)
    # small samples can have a second mode; a coarse profile scan over the
    # variance ratio catches it and restarts the simplex there
    ll_scan, s2e_scan, s2v_scan = prob.profile_scan(np.geomspace(1e-6, 1e6, 49))
    if ll_scan > -res.fun + 1e-9 * abs(res.fun):
        res2 = minimize(nll, np.log([s2e_scan, s2v_scan]), method="Nelder-Mead", options=opts)
        if res2.fun < res.fun:
            res = res2
    s2e, s2v = (float(v) for v in np.exp(res.x))
    ll, beta = prob.loglik(s2e, s2v)
    # the simplex only resolves the flat optimum to ~1e-7, so finish on the score equation
    if s2v > 1e-10 * s2e:
        tau = prob.polish(s2v / s2e)
        if tau is not None:
            s2e_p = prob.ratio_score(tau)[1]
            ll_p, beta_p = prob.loglik(s2e_p, tau * s2e_p)
            if ll_p >= ll - 1e-9 * abs(ll):
                s2e, s2v, ll, beta = s2e_p, tau * s2e_p, ll_p, beta_p

    # boundary: with sigma_v2 = 0 the ML variance is RSS/n from OLS
    r = y - x @ beta_ols
    s2e_b = float(r @ r) / len(y)
    if s2e_b > 0:
        ll_b, beta_b = prob.loglik(s2e_b, 0.0)
        if ll_b >= ll or s2v < 1e-10 * s2e:
            s2e, s2v, ll, beta = s2e_b, 0.0, ll_b, beta_b
    if not s2e > 0:
        raise ValueError("degenerate fit: unit-level variance is zero")

    vartheta = _blup_from(prob, beta, s2e, s2v)
    return LmmFit(beta, s2e, s2v, areas, vartheta, float(ll), prob.n_d.astype(np.int64))


def blup(fit: LmmFit, y, x_fixed, area_ids) -> np.ndarray:
    """Random-intercept BLUP per area of ``fit.areas`` (areas absent from the data get 0)."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x_fixed, dtype=float).reshape(len(y), -1)
    index = {a: k for k, a in enumerate(fit.areas)}
    try:
        codes = np.array([index[a] for a in np.asarray(area_ids).tolist()], dtype=np.int64)
    except KeyError as exc:
        raise KeyError(f"unknown area {exc.args[0]!r}") from None
    D = len(fit.areas)
    n_d = np.bincount(codes, minlength=D).astype(float)
    resid = y - x @ fit.beta
    rsum = np.bincount(codes, resid, minlength=D)
    rbar = np.divide(rsum, n_d, out=np.zeros(D), where=n_d > 0)
    return _shrinkage(n_d, fit.sigma_eps2, fit.sigma_v2) * rbar


def _with_intercept(x):
    return np.column_stack([np.ones(len(x)), x])


def fit_bhf(sample: SurveySample) -> LmmFit:
    return fit_ml(sample.y, _with_intercept(sample.x), sample.area_ids)


def bhf_area_means(sample: SurveySample, census: CensusFrame, fit: LmmFit | None = None) -> np.ndarray:
    """BHF (nested-error EBLUP) area means, aligned with ``census.areas``.

    ``mu_d = Xbar_d' beta + v_d`` with census covariate means; areas without
    sample rows get the synthetic part only.
    """
    check_compatible(sample, census)
    if fit is None:
        fit = fit_bhf(sample)
    codes = census.codes
    D = census.n_areas
    N_d = census.N_d.astype(float)
    xbar = np.stack([np.bincount(codes, census.x[:, j], minlength=D) for j in range(census.p)], axis=1)
    xbar /= N_d[:, None]
    mu = _with_intercept(xbar) @ fit.beta
    effects = dict(zip(fit.areas, fit.vartheta))
    return mu + np.array([effects.get(a, 0.0) for a in census.areas])
