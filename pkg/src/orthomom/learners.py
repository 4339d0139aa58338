"""First-step regression learners and K-fold cross-fitting.

All learners fit an intercept. ``fit`` returns an immutable
:class:`FittedLearner`; ``predict`` is a pure function of it.

The l1 learner minimises ``(1/2n)||y - a - X b||^2 + lam ||b||_1`` over
standardised columns (population sd) by cyclic coordinate descent on the Gram
matrix; coefficients are reported on the original scale. ``lam`` is fixed,
``lam_ratio`` sets it to a fraction of the smallest penalty that zeroes every
coefficient, and with neither it is chosen by K-fold cross-validation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.spatial import cKDTree

from .errors import BadSpec, DimensionMismatch, NonFinite, RankDeficient, TooFewRows

METHODS = ("least-squares", "ridge", "l1", "kernel", "boosted-stumps", "knn")

_DEFAULTS = {
    "least-squares": {},
    "ridge": {"lam": 1.0},
    "l1": {"lam": None, "lam_ratio": None, "cv_folds": 4, "n_lambdas": 30, "seed": 0},
    "kernel": {"bandwidth": None},
    "boosted-stumps": {"rounds": 100, "depth": 1, "learning_rate": 0.1, "min_leaf": 5},
    "knn": {"k": 10},
}


@dataclass(frozen=True)
class LearnerSpec:
    method: str
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise BadSpec(f"unknown learner method {self.method!r}; choose from {METHODS}")
        merged = dict(_DEFAULTS[self.method])
        unknown = set(self.params) - set(merged)
        if unknown:
            raise BadSpec(f"unknown parameters for {self.method}: {sorted(unknown)}")
        merged.update(self.params)
        p = merged
        if self.method == "ridge" and p["lam"] < 0:
            raise BadSpec("ridge lam must be >= 0")
        if self.method == "l1":
            if p["lam"] is not None and p["lam"] < 0:
                raise BadSpec("l1 lam must be >= 0")
            if p["lam_ratio"] is not None and not 0 <= p["lam_ratio"] <= 1:
                raise BadSpec("l1 lam_ratio must lie in [0, 1]")
            if p["cv_folds"] < 2:
                raise BadSpec("cv_folds must be >= 2")
        if self.method == "kernel" and p["bandwidth"] is not None:
            if np.any(np.asarray(p["bandwidth"], dtype=float) <= 0):
                raise BadSpec("bandwidth must be > 0")
        if self.method == "boosted-stumps":
            if p["rounds"] < 1 or p["depth"] < 1:
                raise BadSpec("rounds and depth must be >= 1")
        if self.method == "knn" and p["k"] < 1:
            raise BadSpec("k must be >= 1")
        object.__setattr__(self, "params", p)

    @classmethod
    def from_dict(cls, d: Mapping) -> "LearnerSpec":
        d = dict(d)
        try:
            method = d.pop("method")
        except KeyError:
            raise BadSpec("learner spec needs a 'method'") from None
        params = d.pop("params", {})
        params = {**params, **d}
        return cls(method, params)

    def to_dict(self) -> dict:
        return {"method": self.method, **{k: v for k, v in self.params.items()}}


@dataclass(frozen=True, eq=False)
class FittedLearner:
    method: str
    d: int
    state: Mapping


def _as_matrix(features, n=None):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None] if n is None or x.shape[0] == n else x[None, :]
    if x.ndim != 2:
        raise DimensionMismatch("features must be a 2-d array")
    return x


def _freeze(**arrays):
    for v in arrays.values():
        if isinstance(v, np.ndarray):
            v.flags.writeable = False
    return arrays


# -- linear learners ----------------------------------------------------------

def _fit_least_squares(x, y):
    n, d = x.shape
    design = np.column_stack([np.ones(n), x])
    if n < d + 1:
        raise RankDeficient(f"least squares needs n > d (n={n}, d={d}); use ridge or l1")
    q, r = np.linalg.qr(design)
    diag = np.abs(np.diag(r))
    if diag.min() <= 1e-10 * diag.max():
        raise RankDeficient("least-squares design matrix is singular")
    coef = np.linalg.solve(r, q.T @ y)
    return _freeze(intercept=coef[0], coef=coef[1:].copy())


def _fit_ridge(x, y, lam):
    xm, ym = x.mean(axis=0), y.mean()
    xc = x - xm
    gram = xc.T @ xc + lam * np.eye(x.shape[1])
    rhs = xc.T @ (y - ym)
    coef = np.linalg.lstsq(gram, rhs, rcond=None)[0] if lam == 0 else np.linalg.solve(gram, rhs)
    return _freeze(intercept=ym - xm @ coef, coef=coef)


def soft_threshold(z, lam):
    return np.sign(z) * np.maximum(np.abs(z) - lam, 0.0)


def lasso_objective(gram, cov, yy, beta, lam):
    """Objective in Gram form: ``yy/2 - cov'b + b'Gb/2 + lam |b|_1``."""
    return 0.5 * yy - cov @ beta + 0.5 * beta @ gram @ beta + lam * np.abs(beta).sum()


def lasso_cd(gram, cov, lam, beta0=None, tol=1e-8, max_sweeps=10_000, history=None):
    """Cyclic coordinate descent for ``min b'Gb/2 - cov'b + lam |b|_1``.

    Stops when the largest coefficient change in a sweep is below ``tol`` or
    after ``max_sweeps`` sweeps. If ``history`` is a list, the objective after
    each sweep is appended (``yy`` term omitted).
    """
    d = cov.shape[0]
    beta = np.zeros(d) if beta0 is None else np.array(beta0, dtype=float)
    gb = gram @ beta
    diag = np.diag(gram)
    for _ in range(max_sweeps):
        max_change = 0.0
        for j in range(d):
            if diag[j] <= 0:
                continue
            old = beta[j]
            rho = cov[j] - gb[j] + diag[j] * old
            new = soft_threshold(rho, lam) / diag[j]
            if new != old:
                gb += gram[:, j] * (new - old)
                beta[j] = new
                max_change = max(max_change, abs(new - old))
        if history is not None:
            history.append(lasso_objective(gram, cov, 0.0, beta, lam))
        if max_change < tol:
            break
    return beta


def _standardize(x):
    xm = x.mean(axis=0)
    sd = x.std(axis=0)
    scale = np.where(sd > 0, sd, 1.0)
    return (x - xm) / scale, xm, scale, sd > 0


def _lasso_path(x, y, lams):
    """Fit on standardised ``x`` over a decreasing ``lams`` grid with warm starts."""
    n = x.shape[0]
    xs, xm, scale, live = _standardize(x)
    xs = xs[:, live]
    ym = y.mean()
    gram = xs.T @ xs / n
    cov = xs.T @ (y - ym) / n
    beta = np.zeros(xs.shape[1])
    fits = []
    for lam in lams:
        beta = lasso_cd(gram, cov, lam, beta0=beta)
        coef = np.zeros(x.shape[1])
        coef[live] = beta / scale[live]
        fits.append((ym - xm @ coef, coef))
    return fits


def lambda_max(x, y):
    n = x.shape[0]
    xs, _, _, live = _standardize(x)
    if not live.any():
        return 0.0
    return float(np.max(np.abs(xs[:, live].T @ (y - y.mean()))) / n)


def _fit_l1(x, y, p):
    if x.shape[1] == 0:
        return _freeze(intercept=y.mean(), coef=np.zeros(0), lam=0.0)
    if p["lam"] is not None:
        intercept, coef = _lasso_path(x, y, [float(p["lam"])])[0]
        return _freeze(intercept=intercept, coef=coef, lam=float(p["lam"]))
    lmax = lambda_max(x, y)
    if p["lam_ratio"] is not None:
        lam = float(p["lam_ratio"]) * lmax
        intercept, coef = _lasso_path(x, y, [lam])[0]
        return _freeze(intercept=intercept, coef=coef, lam=lam)
    if lmax == 0.0:
        return _freeze(intercept=y.mean(), coef=np.zeros(x.shape[1]), lam=0.0)
    lams = lmax * np.logspace(0.0, -4.0, int(p["n_lambdas"]))
    folds = make_plan(x.shape[0], int(p["cv_folds"]), int(p["seed"])).assignment
    err = np.zeros(lams.size)
    for k in range(int(p["cv_folds"])):
        tr, te = folds != k, folds == k
        for i, (a, b) in enumerate(_lasso_path(x[tr], y[tr], lams)):
            err[i] += np.sum((y[te] - a - x[te] @ b) ** 2)
    best = float(lams[int(np.argmin(err))])
    intercept, coef = _lasso_path(x, y, [best])[0]
    return _freeze(intercept=intercept, coef=coef, lam=best)


def _predict_linear(state, x):
    return state["intercept"] + x @ state["coef"]


# -- kernel smoother ------------------------------------------------------------

def silverman_bandwidth(x):
    n = x.shape[0]
    sd = x.std(axis=0, ddof=1) if n > 1 else np.zeros(x.shape[1])
    h = 1.06 * sd * n ** (-0.2)
    return np.where(h > 0, h, 1.0)


def _fit_kernel(x, y, p):
    if p["bandwidth"] is None:
        h = silverman_bandwidth(x)
    else:
        h = np.broadcast_to(np.asarray(p["bandwidth"], dtype=float), (x.shape[1],)).copy()
    return _freeze(x=x.copy(), y=y.copy(), h=h)


def _predict_kernel(state, x, chunk=512):
    xt, yt, h = state["x"], state["y"], state["h"]
    if xt.shape[1] == 0:
        return np.full(x.shape[0], yt.mean())
    out = np.empty(x.shape[0])
    xs_t = xt / h
    for s in range(0, x.shape[0], chunk):
        q = x[s:s + chunk] / h
        d2 = ((q[:, None, :] - xs_t[None, :, :]) ** 2).sum(axis=2)
        logw = -0.5 * d2
        logw -= logw.max(axis=1, keepdims=True)
        w = np.exp(logw)
        out[s:s + chunk] = (w @ yt) / w.sum(axis=1)
    return out


# -- boosted regression trees -------------------------------------------------

def _best_split(x, r, rows, order, min_leaf):
    """Best variance-reducing split of ``rows``; returns (gain, feature, threshold)."""
    best = (0.0, -1, 0.0)
    m = rows.sum()
    if m < 2 * min_leaf:
        return best
    total = r[rows].sum()
    base = total * total / m
    for j in range(x.shape[1]):
        idx = order[:, j][rows[order[:, j]]]
        xv = x[idx, j]
        cs = np.cumsum(r[idx])
        nl = np.arange(1, m)
        sl = cs[:-1]
        valid = (xv[1:] > xv[:-1]) & (nl >= min_leaf) & (m - nl >= min_leaf)
        if not valid.any():
            continue
        gain = sl**2 / nl + (total - sl) ** 2 / (m - nl) - base
        gain = np.where(valid, gain, -np.inf)
        i = int(np.argmax(gain))
        if gain[i] > best[0] + 1e-12:
            best = (float(gain[i]), j, 0.5 * (xv[i] + xv[i + 1]))
    return best


def _grow(x, r, rows, order, depth, min_leaf, nodes):
    node = len(nodes)
    nodes.append([-1, 0.0, -1, -1, float(r[rows].mean()) if rows.any() else 0.0])
    if depth == 0:
        return node
    gain, j, thr = _best_split(x, r, rows, order, min_leaf)
    if j < 0:
        return node
    left_rows = rows & (x[:, j] <= thr)
    right_rows = rows & (x[:, j] > thr)
    nodes[node][0], nodes[node][1] = j, thr
    nodes[node][2] = _grow(x, r, left_rows, order, depth - 1, min_leaf, nodes)
    nodes[node][3] = _grow(x, r, right_rows, order, depth - 1, min_leaf, nodes)
    return node


def _tree_predict(tree, x):
    feat, thr, left, right, value = tree
    node = np.zeros(x.shape[0], dtype=int)
    while True:
        f = feat[node]
        internal = f >= 0
        if not internal.any():
            return value[node]
        rows = np.nonzero(internal)[0]
        go_left = x[rows, f[rows]] <= thr[node[rows]]
        node[rows] = np.where(go_left, left[node[rows]], right[node[rows]])


def _fit_boost(x, y, p):
    n = x.shape[0]
    order = np.argsort(x, axis=0, kind="stable") if x.shape[1] else np.empty((n, 0), dtype=int)
    f0 = float(y.mean())
    pred = np.full(n, f0)
    rows = np.ones(n, dtype=bool)
    trees = []
    lr = float(p["learning_rate"])
    for _ in range(int(p["rounds"])):
        r = y - pred
        nodes = []
        _grow(x, r, rows, order, int(p["depth"]), int(p["min_leaf"]), nodes)
        arr = np.asarray(nodes, dtype=float)
        tree = (arr[:, 0].astype(int), arr[:, 1], arr[:, 2].astype(int), arr[:, 3].astype(int), lr * arr[:, 4])
        if len(nodes) == 1 and abs(tree[4][0]) < 1e-15:
            break
        trees.append(tree)
        pred = pred + _tree_predict(tree, x)
    return {"f0": f0, "trees": tuple(trees)}


def _predict_boost(state, x):
    out = np.full(x.shape[0], state["f0"])
    for tree in state["trees"]:
        out += _tree_predict(tree, x)
    return out


# -- k nearest neighbours -------------------------------------------------------

def _fit_knn(x, y, p):
    return {"tree": cKDTree(x) if x.shape[1] else None, "y": y.copy(), "k": min(int(p["k"]), x.shape[0])}


def _predict_knn(state, x):
    if state["tree"] is None:
        return np.full(x.shape[0], state["y"].mean())
    _, idx = state["tree"].query(x, k=state["k"])
    idx = idx.reshape(x.shape[0], -1)
    return state["y"][idx].mean(axis=1)


# -- public API ---------------------------------------------------------------------

def fit(spec: LearnerSpec, features, target) -> FittedLearner:
    y = np.asarray(target, dtype=np.float64).reshape(-1)
    x = _as_matrix(features, y.shape[0])
    if x.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"features have {x.shape[0]} rows, target has {y.shape[0]}")
    if y.shape[0] < 1:
        raise TooFewRows("need at least one row")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise NonFinite("features or target contain non-finite values")
    p = spec.params
    if spec.method == "least-squares":
        state = _fit_least_squares(x, y)
    elif spec.method == "ridge":
        state = _fit_ridge(x, y, float(p["lam"]))
    elif spec.method == "l1":
        state = _fit_l1(x, y, p)
    elif spec.method == "kernel":
        state = _fit_kernel(x, y, p)
    elif spec.method == "boosted-stumps":
        state = _fit_boost(x, y, p)
    else:
        state = _fit_knn(x, y, p)
    return FittedLearner(spec.method, x.shape[1], state)


def predict(model: FittedLearner, features) -> np.ndarray:
    x = _as_matrix(features)
    if x.shape[1] != model.d:
        raise DimensionMismatch(f"model was trained on {model.d} features, got {x.shape[1]}")
    if model.method in ("least-squares", "ridge", "l1"):
        return _predict_linear(model.state, x)
    if model.method == "kernel":
        return _predict_kernel(model.state, x)
    if model.method == "boosted-stumps":
        return _predict_boost(model.state, x)
    return _predict_knn(model.state, x)


# -- cross-fitting --------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CrossFitPlan:
    k: int
    assignment: np.ndarray
    seed: int

    def folds(self):
        for j in range(self.k):
            yield self.assignment != j, self.assignment == j


def make_plan(n: int, k: int, seed: int) -> CrossFitPlan:
    """Seeded uniform partition of ``range(n)`` into ``k`` folds of near-equal size."""
    if k < 2:
        raise BadSpec("K must be >= 2")
    if n < k:
        raise TooFewRows(f"cannot split {n} rows into {k} non-empty folds")
    perm = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=int)
    assignment[perm] = np.arange(n) % k
    assignment.flags.writeable = False
    return CrossFitPlan(k, assignment, int(seed))


@dataclass(frozen=True, eq=False)
class OofPredictions:
    values: np.ndarray
    plan: CrossFitPlan | None
    learner: LearnerSpec | None


def cross_fit(spec: LearnerSpec, features, target, k: int = 5, seed: int = 0,
              plan: CrossFitPlan | None = None) -> OofPredictions:
    """Out-of-fold predictions: row ``i`` is predicted by a model that never saw its fold."""
    y = np.asarray(target, dtype=np.float64).reshape(-1)
    x = _as_matrix(features, y.shape[0])
    if plan is None:
        plan = make_plan(y.shape[0], k, seed)
    elif plan.assignment.shape[0] != y.shape[0]:
        raise DimensionMismatch("cross-fit plan does not match the number of rows")
    out = np.empty(y.shape[0])
    for train, test in plan.folds():
        model = fit(spec, x[train], y[train])
        out[test] = predict(model, x[test])
    out.flags.writeable = False
    return OofPredictions(out, plan, spec)
