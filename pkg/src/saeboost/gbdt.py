"""Regularized gradient-boosted regression trees under squared-error loss.

Splits are found by exact greedy search over midpoints of adjacent distinct
feature values, scored with the second-order regularized gain

    gain = 0.5 * [G_L^2/(H_L+lambda) + G_R^2/(H_R+lambda) - G^2/(H+lambda)] - gamma

and leaves carry weight -G/(H+lambda). A row goes left iff
``x[feature] < threshold``. Among equal-gain splits the lowest feature index
wins, then the smallest threshold.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numba
import numpy as np

from .core import Hyperparams, make_rng

LEAF = -1


@dataclass(frozen=True, eq=False)
class RegressionTree:
    """Binary tree stored as parallel node arrays; node 0 is the root.

    Leaves have ``feature == -1`` and ``left == right == -1``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def __post_init__(self):
        for name, dt in (("feature", np.int64), ("threshold", float), ("left", np.int64),
                         ("right", np.int64), ("value", float)):
            a = np.array(getattr(self, name), dtype=dt)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature == LEAF

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for k in range(self.n_nodes):
            if self.feature[k] != LEAF:
                depth[self.left[k]] = depth[self.right[k]] = depth[k] + 1
        return int(depth.max())

    def leaf_weights(self) -> np.ndarray:
        return self.value[self.is_leaf]

    def apply(self, x) -> np.ndarray:
        """Leaf node id reached by every row of ``x``."""
        x = np.ascontiguousarray(x, dtype=float)
        return _apply_tree(x, self.feature, self.threshold, self.left, self.right)

    def predict(self, x) -> np.ndarray:
        return self.value[self.apply(x)]

    def __eq__(self, other):
        if not isinstance(other, RegressionTree):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("feature", "threshold", "left", "right", "value"))


@dataclass(frozen=True, eq=False)
class BoostedEnsemble:
    base_score: float
    trees: tuple[RegressionTree, ...]
    eta: float
    n_features: int
    max_rounds: int | None = None
    holdout_rmse: tuple[float, ...] = field(default=(), compare=False)
    train_rmse: tuple[float, ...] = field(default=(), compare=False)

    @property
    def n_rounds_used(self) -> int:
        return len(self.trees)

    def predict(self, x) -> np.ndarray:
        return predict(self, x)

    def truncate(self, n_trees: int) -> "BoostedEnsemble":
        return BoostedEnsemble(self.base_score, self.trees[:n_trees], self.eta,
                               self.n_features, self.max_rounds, self.holdout_rmse, self.train_rmse)

    def __eq__(self, other):
        if not isinstance(other, BoostedEnsemble):
            return NotImplemented
        return (self.base_score == other.base_score and self.eta == other.eta
                and self.n_features == other.n_features and self.trees == other.trees)


@dataclass(frozen=True, eq=False)
class GradHess:
    g: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        g = np.ascontiguousarray(self.g, dtype=float)
        h = np.ascontiguousarray(self.h, dtype=float)
        if g.shape != h.shape or g.ndim != 1:
            raise ValueError("g and h must be 1-D arrays of equal length")
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "h", h)

    @classmethod
    def squared_error(cls, pred, y) -> "GradHess":
        g = np.asarray(pred, dtype=float) - np.asarray(y, dtype=float)
        return cls(g, np.ones_like(g))


# ---------------------------------------------------------------------------
# kernels

@numba.njit(cache=True)
def _apply_tree(x, feature, threshold, left, right):
    n = x.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        k = 0
        while feature[k] != -1:
            if x[i, feature[k]] < threshold[k]:
                k = left[k]
            else:
                k = right[k]
        out[i] = k
    return out


@numba.njit(cache=True)
def _add_tree(x, feature, threshold, left, right, value, scale, out):
    for i in range(x.shape[0]):
        k = 0
        while feature[k] != -1:
            if x[i, feature[k]] < threshold[k]:
                k = left[k]
            else:
                k = right[k]
        out[i] += scale * value[k]


@numba.njit(cache=True)
def _grow(x, order, g, h, active, cols, max_depth, min_child_weight, lam, gamma):
    n = x.shape[0]
    max_nodes = 2 ** (max_depth + 1) - 1
    feature = np.full(max_nodes, -1, dtype=np.int64)
    threshold = np.zeros(max_nodes)
    left = np.full(max_nodes, -1, dtype=np.int64)
    right = np.full(max_nodes, -1, dtype=np.int64)
    value = np.zeros(max_nodes)
    G = np.zeros(max_nodes)
    H = np.zeros(max_nodes)
    is_open = np.zeros(max_nodes, dtype=np.bool_)

    pos = np.full(n, -1, dtype=np.int64)
    for r in range(n):
        if active[r]:
            pos[r] = 0
            G[0] += g[r]
            H[0] += h[r]
    is_open[0] = True
    n_nodes = 1

    GL = np.zeros(max_nodes)
    HL = np.zeros(max_nodes)
    prev = np.zeros(max_nodes)
    seen = np.zeros(max_nodes, dtype=np.bool_)
    best_gain = np.full(max_nodes, -np.inf)
    best_feat = np.full(max_nodes, -1, dtype=np.int64)
    best_thr = np.zeros(max_nodes)

    for depth in range(max_depth):
        for k in range(n_nodes):
            best_gain[k] = -np.inf
            best_feat[k] = -1
        for c in range(cols.shape[0]):
            f = cols[c]
            for k in range(n_nodes):
                GL[k] = 0.0
                HL[k] = 0.0
                seen[k] = False
            for i in range(n):
                r = order[f, i]
                k = pos[r]
                if k < 0 or not is_open[k]:
                    continue
                xv = x[r, f]
                if seen[k] and xv > prev[k]:
                    hl = HL[k]
                    hr = H[k] - hl
                    if hl >= min_child_weight and hr >= min_child_weight:
                        gl = GL[k]
                        gr = G[k] - gl
                        gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam)
                                      - G[k] * G[k] / (H[k] + lam)) - gamma
                        if gain > best_gain[k]:
                            best_gain[k] = gain
                            best_feat[k] = f
                            thr = 0.5 * (prev[k] + xv)
                            if not prev[k] < thr:
                                thr = xv
                            best_thr[k] = thr
                GL[k] += g[r]
                HL[k] += h[r]
                prev[k] = xv
                seen[k] = True

        any_split = False
        level_end = n_nodes
        for k in range(level_end):
            if not is_open[k]:
                continue
            is_open[k] = False
            if best_feat[k] >= 0 and best_gain[k] > 0.0:
                feature[k] = best_feat[k]
                threshold[k] = best_thr[k]
                left[k] = n_nodes
                right[k] = n_nodes + 1
                is_open[n_nodes] = True
                is_open[n_nodes + 1] = True
                n_nodes += 2
                any_split = True
        if not any_split:
            break
        for j in range(level_end, n_nodes):
            G[j] = 0.0
            H[j] = 0.0
        for r in range(n):
            k = pos[r]
            if k >= 0 and feature[k] >= 0 and left[k] >= level_end:
                if x[r, feature[k]] < threshold[k]:
                    k = left[k]
                else:
                    k = right[k]
                pos[r] = k
                G[k] += g[r]
                H[k] += h[r]

    for k in range(n_nodes):
        if feature[k] == -1:
            value[k] = -G[k] / (H[k] + lam)
    return feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes]


# ---------------------------------------------------------------------------


def _presort(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.argsort(x, axis=0, kind="stable").T).astype(np.int64)


def fit_tree(x, gh: GradHess, params: Hyperparams, active_rows=None, active_cols=None,
             _order=None) -> RegressionTree:
    """Grow one tree on the rows ``active_rows`` using features ``active_cols``.

    Both default to everything. Degenerate inputs yield a single leaf.
    """
    x = np.ascontiguousarray(x, dtype=float)
    n, p = x.shape
    if len(gh.g) != n:
        raise ValueError("gradient length does not match the number of rows")
    active = np.zeros(n, dtype=np.bool_)
    if active_rows is None:
        active[:] = True
    else:
        active[np.asarray(active_rows, dtype=np.int64)] = True
    cols = np.arange(p) if active_cols is None else np.unique(np.asarray(active_cols, dtype=np.int64))
    if not active.any() or cols.size == 0:
        raise ValueError("fit_tree needs at least one active row and one active column")
    order = _presort(x) if _order is None else _order
    arrays = _grow(x, order, gh.g, gh.h, active, cols, params.max_depth,
                   float(params.min_child_weight), float(params.reg_lambda), float(params.gamma))
    return RegressionTree(*arrays)


def holdout_split(n: int, cv_fraction: float, rng: np.random.Generator):
    """Random (train, holdout) index split; both sides sorted."""
    n_hold = int(round(cv_fraction * n))
    if n_hold < 1 or n - n_hold < 1:
        raise ValueError(f"cv_fraction={cv_fraction} leaves an empty side on {n} rows")
    perm = rng.permutation(n)
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


@numba.njit(cache=True)
def _rmse_nb(a, b):
    acc = 0.0
    for i in range(a.shape[0]):
        d = a[i] - b[i]
        acc += d * d
    return np.sqrt(acc / a.shape[0])


@numba.njit(cache=True)
def _boost(xt, order, yt, xh, yh, base, rows, cols, max_depth, min_child_weight, lam, gamma,
           eta, patience):
    n = xt.shape[0]
    n_rounds = rows.shape[0]
    max_nodes = 2 ** (max_depth + 1) - 1
    feat = np.full((n_rounds, max_nodes), -1, dtype=np.int64)
    thr = np.zeros((n_rounds, max_nodes))
    left = np.full((n_rounds, max_nodes), -1, dtype=np.int64)
    right = np.full((n_rounds, max_nodes), -1, dtype=np.int64)
    val = np.zeros((n_rounds, max_nodes))
    sizes = np.zeros(n_rounds, dtype=np.int64)
    hist_h = np.empty(n_rounds + 1)
    hist_t = np.empty(n_rounds + 1)

    pred_t = np.full(n, base)
    pred_h = np.full(xh.shape[0], base)
    g = np.empty(n)
    h = np.ones(n)
    active = np.zeros(n, dtype=np.bool_)
    hist_h[0] = _rmse_nb(pred_h, yh)
    hist_t[0] = _rmse_nb(pred_t, yt)
    best = hist_h[0]
    best_round = 0
    done = 0
    for t in range(n_rounds):
        for i in range(n):
            g[i] = pred_t[i] - yt[i]
            active[i] = False
        for j in range(rows.shape[1]):
            active[rows[t, j]] = True
        f, th, lo, hi, v = _grow(xt, order, g, h, active, cols[t], max_depth,
                                 min_child_weight, lam, gamma)
        k = f.shape[0]
        sizes[t] = k
        feat[t, :k] = f
        thr[t, :k] = th
        left[t, :k] = lo
        right[t, :k] = hi
        val[t, :k] = v
        _add_tree(xt, f, th, lo, hi, v, eta, pred_t)
        _add_tree(xh, f, th, lo, hi, v, eta, pred_h)
        hist_h[t + 1] = _rmse_nb(pred_h, yh)
        hist_t[t + 1] = _rmse_nb(pred_t, yt)
        done = t + 1
        if hist_h[t + 1] < best:
            best = hist_h[t + 1]
            best_round = t + 1
        elif t + 1 - best_round >= patience:
            break
    return feat, thr, left, right, val, sizes, hist_h[:done + 1], hist_t[:done + 1], best_round


def _draw_subsets(rng, n_rounds: int, n: int, k: int) -> np.ndarray:
    """Row ``t`` holds ``k`` distinct indices from ``range(n)``, sorted."""
    if k >= n:
        return np.tile(np.arange(n, dtype=np.int64), (n_rounds, 1))
    keys = rng.random((n_rounds, n))
    return np.sort(np.argpartition(keys, k - 1, axis=1)[:, :k], axis=1).astype(np.int64)


def fit_boosted(x, y, params: Hyperparams, rng=None) -> BoostedEnsemble:
    """Boost trees on ``y`` with early stopping on a random holdout.

    Each round fits the squared-error gradient ``pred - y`` (hessian 1) on a
    subsample of the training rows drawn without replacement, using a random
    subset of the columns. The returned ensemble is truncated at the round
    with the lowest holdout RMSE, round 0 being the constant ``mean(y)``.
    """
    rng = make_rng(rng)
    x = np.ascontiguousarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("x must be 2-D with one row per response")
    if len(y) < 2:
        raise ValueError("boosting needs at least two rows")
    train, hold = holdout_split(len(y), params.cv_fraction, rng)
    xt, yt = np.ascontiguousarray(x[train]), y[train]
    xh, yh = np.ascontiguousarray(x[hold]), y[hold]
    n, p = xt.shape
    base = float(np.mean(y))
    R = params.max_rounds
    rows = _draw_subsets(rng, R, n, max(1, int(round(params.subsample * n))))
    cols = _draw_subsets(rng, R, p, max(1, int(round(params.colsample_bytree * p))))
    feat, thr, left, right, val, sizes, hist_h, hist_t, best_round = _boost(
        xt, _presort(xt), yt, xh, yh, base, rows, cols, params.max_depth,
        float(params.min_child_weight), float(params.reg_lambda), float(params.gamma),
        float(params.eta), params.early_stop_patience)
    trees = tuple(
        RegressionTree(feat[t, :k], thr[t, :k], left[t, :k], right[t, :k], val[t, :k])
        for t, k in enumerate(sizes[:best_round])
    )
    return BoostedEnsemble(base, trees, float(params.eta), p, R,
                           tuple(hist_h.tolist()), tuple(hist_t.tolist()))


def predict(ensemble: BoostedEnsemble, x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != ensemble.n_features:
        raise ValueError(
            f"expected {ensemble.n_features} covariates, got array of shape {x.shape}"
        )
    out = np.full(len(x), float(ensemble.base_score))
    for tree in ensemble.trees:
        _add_tree(x, tree.feature, tree.threshold, tree.left, tree.right, tree.value, ensemble.eta, out)
    return out


# ---------------------------------------------------------------------------
# text format: one node per line, "id kind feature threshold_or_weight left right"


def dump_ensemble(ensemble: BoostedEnsemble, fh) -> None:
    fh.write("[ensemble]\n")
    fh.write(f"base_score\t{ensemble.base_score!r}\n")
    fh.write(f"eta\t{ensemble.eta!r}\n")
    fh.write(f"n_features\t{ensemble.n_features}\n")
    fh.write(f"n_trees\t{len(ensemble.trees)}\n")
    for t, tree in enumerate(ensemble.trees):
        fh.write(f"tree\t{t}\t{tree.n_nodes}\n")
        for k in range(tree.n_nodes):
            if tree.feature[k] == LEAF:
                fh.write(f"{k}\tleaf\t-\t{float(tree.value[k])!r}\t-\t-\n")
            else:
                fh.write(f"{k}\tsplit\t{tree.feature[k]}\t{float(tree.threshold[k])!r}"
                         f"\t{tree.left[k]}\t{tree.right[k]}\n")


def _expect(line: str, key: str) -> str:
    parts = line.rstrip("\n").split("\t")
    if parts[0] != key:
        raise ValueError(f"expected {key!r} line, got {line!r}")
    return parts[1]


def load_ensemble(lines) -> BoostedEnsemble:
    """Inverse of :func:`dump_ensemble`; ``lines`` is an iterator over text lines."""
    it = iter(lines)
    header = next(it).strip()
    if header != "[ensemble]":
        raise ValueError(f"expected '[ensemble]', got {header!r}")
    base = float(_expect(next(it), "base_score"))
    eta = float(_expect(next(it), "eta"))
    p = int(_expect(next(it), "n_features"))
    n_trees = int(_expect(next(it), "n_trees"))
    trees = []
    for t in range(n_trees):
        parts = next(it).rstrip("\n").split("\t")
        if parts[0] != "tree" or int(parts[1]) != t:
            raise ValueError(f"malformed tree header {parts!r}")
        n_nodes = int(parts[2])
        feat = np.full(n_nodes, LEAF, dtype=np.int64)
        thr = np.zeros(n_nodes)
        left = np.full(n_nodes, LEAF, dtype=np.int64)
        right = np.full(n_nodes, LEAF, dtype=np.int64)
        val = np.zeros(n_nodes)
        for _ in range(n_nodes):
            k, kind, f, num, lo, hi = next(it).rstrip("\n").split("\t")
            k = int(k)
            if kind == "leaf":
                val[k] = float(num)
            elif kind == "split":
                feat[k], thr[k], left[k], right[k] = int(f), float(num), int(lo), int(hi)
            else:
                raise ValueError(f"unknown node kind {kind!r}")
        trees.append(RegressionTree(feat, thr, left, right, val))
    return BoostedEnsemble(base, tuple(trees), eta, p)


def ensemble_to_text(ensemble: BoostedEnsemble) -> str:
    buf = io.StringIO()
    dump_ensemble(ensemble, buf)
    return buf.getvalue()
