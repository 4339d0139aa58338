"""Orthogonal tests and estimates for interaction coefficients in an IV model.

Model: ``Y1 = theta0 Y2 + eta01 + eta02'(X - eta03) + eta04'Y2 (X - eta03) + e``
with ``E[e | W] = 0`` and ``W = (X, Z2)``. For the coefficient ``eta04_l`` write

* ``Q_l  = (Y2, 1, X - eta03, Y2 (X_{-l} - eta03_{-l}))``
* ``xi_l = E[Q_l | W]`` (``p(W) = E[Y2|W]`` replaces ``Y2``)
* ``zeta_l = p(W) (X_l - eta03_l)`` and ``phi = zeta_l - Proj(zeta_l | xi_l)``.

The test moment is ``(Y1 - gamma'Q_l - eta_bar Y2 (X_l - eta03_l)) phi`` where
``gamma`` is the coefficient of the projection of ``Y1 - eta_bar Y2 (X_l - eta03_l)``
on ``xi_l``. Column ``l`` is a 0-based index or a column name.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset
from .errors import BadSpec, DegenerateInstrument, DegenerateVariance, DimensionMismatch, IndexOutOfRange
from .learners import LearnerSpec, OofPredictions, cross_fit, fit, make_plan, predict
from .plm import moment_t_statistic, two_sided

PHI_FLOOR = 1e-6          # sd(phi) / sd(zeta) below this: no identifying variation
RELEVANCE_TOL = 1e-8
CI_POINTS = 241
CI_HALF_WIDTH = 6.0       # in standard errors


@dataclass(frozen=True)
class HteConfig:
    l: int | str = 0
    null: float = 0.0
    level: float = 0.05
    learner_p: LearnerSpec = field(default_factory=lambda: LearnerSpec("least-squares"))
    learner_gamma: LearnerSpec | None = None   # None: l1 if d_X > n/10, else least squares
    learner_phi: LearnerSpec | None = None     # same rule
    k: int = 5
    k_phi: int | None = 5                      # None projects zeta on xi in-sample
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.level < 1.0:
            raise BadSpec("level must lie in (0, 1)")

    def with_(self, **changes) -> "HteConfig":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(changes)
        return HteConfig(**d)


@dataclass(frozen=True, eq=False)
class HteResult:
    statistic: float
    p_value: float
    reject: bool
    eta4_hat: float
    se: float
    gamma: np.ndarray
    phi: np.ndarray
    xi: np.ndarray
    q: np.ndarray
    moment_values: np.ndarray
    null: float
    level: float
    ci: tuple | None = None
    ci_status: str = "not-computed"
    ci_min_p_point: float | None = None
    degenerate: bool = False


def column_index(data: Dataset, l) -> int:
    names = data.x_names
    if isinstance(l, str):
        if l not in names:
            raise IndexOutOfRange(f"{l!r} is not a control column")
        return names.index(l)
    l = int(l)
    if not 0 <= l < len(names):
        raise IndexOutOfRange(f"l={l} outside 0..{len(names) - 1}")
    return l


def _values(p, n):
    p = p.values if isinstance(p, OofPredictions) else np.asarray(p, dtype=float)
    p = p.reshape(-1)
    if p.shape[0] != n:
        raise DimensionMismatch(f"p has {p.shape[0]} entries, data has {n} rows")
    return p


def _centered(data, eta3):
    x = data.x
    eta3 = np.asarray(eta3, dtype=float).reshape(-1)
    if eta3.shape[0] != x.shape[1]:
        raise DimensionMismatch(f"eta3 has {eta3.shape[0]} entries, X has {x.shape[1]} columns")
    return x - eta3


def _blocks(lead, xc, l):
    n = xc.shape[0]
    others = np.delete(xc, l, axis=1)
    return np.column_stack([lead, np.ones(n), xc, lead[:, None] * others])


def build_ql(data: Dataset, l, eta3) -> np.ndarray:
    """``(Y2, 1, X - eta3, Y2 (X_{-l} - eta3_{-l}))``, shape ``n x (2 d_X + 1)``."""
    l = column_index(data, l)
    return _blocks(data.y2, _centered(data, eta3), l)


def build_xi(data: Dataset, p, l, eta3) -> np.ndarray:
    """``Q_l`` with ``p(W)`` substituted for ``Y2``."""
    l = column_index(data, l)
    return _blocks(_values(p, data.n), _centered(data, eta3), l)


def zeta_hte(data: Dataset, p, l, eta3) -> np.ndarray:
    l = column_index(data, l)
    return _values(p, data.n) * _centered(data, eta3)[:, l]


def _auto(spec, data):
    if spec is not None:
        return spec
    d = len(data.x_names)
    return LearnerSpec("l1") if d > data.n / 10 else LearnerSpec("least-squares")


def _lstsq_predict(a_train, y_train, a_test):
    coef = np.linalg.lstsq(a_train, y_train, rcond=None)[0]
    return a_test @ coef


def project_on(features: np.ndarray, target: np.ndarray, spec: LearnerSpec,
               k: int | None = None, seed: int = 0) -> np.ndarray:
    """Fitted values of ``target`` on ``features`` (whose column 1 is the constant).

    Least squares uses a minimum-norm solve, so collinear dictionaries are fine.
    ``k=None`` fits in-sample; otherwise predictions are out-of-fold.
    """
    n = features.shape[0]
    if spec.method == "least-squares":
        if k is None:
            return _lstsq_predict(features, target, features)
        out = np.empty(n)
        for train, test in make_plan(n, k, seed).folds():
            out[test] = _lstsq_predict(features[train], target[train], features[test])
        return out
    free = np.delete(features, 1, axis=1)
    if k is None:
        return predict(fit(spec, free, target), free)
    return cross_fit(spec, free, target, k=k, seed=seed).values


def _coefficients(features, target, spec):
    """Coefficient vector on all columns of ``features`` (column 1 is the constant)."""
    if spec.method == "least-squares":
        return np.linalg.lstsq(features, target, rcond=None)[0]
    if spec.method not in ("ridge", "l1"):
        raise BadSpec("the Step-2 coefficient needs a linear learner (least-squares, ridge or l1)")
    model = fit(spec, np.delete(features, 1, axis=1), target)
    return np.insert(model.state["coef"], 1, model.state["intercept"])


def orthogonal_instrument_hte(data: Dataset, p, l, eta3, spec: LearnerSpec | None = None,
                              k: int | None = 5, seed: int = 0) -> np.ndarray:
    """``phi = zeta_l - Proj(zeta_l | xi_l)``, the residual out-of-fold when ``k`` is set."""
    xi = build_xi(data, p, l, eta3)
    zeta = zeta_hte(data, p, l, eta3)
    return zeta - project_on(xi, zeta, _auto(spec, data), k, seed)


@dataclass(frozen=True, eq=False)
class _Parts:
    q: np.ndarray
    xi: np.ndarray
    phi: np.ndarray
    zeta: np.ndarray
    y2xl: np.ndarray
    y1: np.ndarray
    gamma_spec: LearnerSpec


def _prepare(data: Dataset, config: HteConfig, oracle: dict | None) -> _Parts:
    l = column_index(data, config.l)
    if oracle is not None:
        p = _values(oracle["p"], data.n)
        eta3 = np.asarray(oracle.get("eta3", data.x.mean(axis=0)), dtype=float)
    else:
        eta3 = data.x.mean(axis=0)
        p = cross_fit(config.learner_p, data.w, data.y2, k=config.k, seed=config.seed).values
    q = build_ql(data, l, eta3)
    xi = build_xi(data, p, l, eta3)
    zeta = zeta_hte(data, p, l, eta3)
    phi = zeta - project_on(xi, zeta, _auto(config.learner_phi, data), config.k_phi, config.seed + 1)
    if float(np.std(phi)) < PHI_FLOOR * float(np.std(zeta)) or not np.any(zeta):
        raise DegenerateInstrument(
            "the instrument is (numerically) spanned by the exogenous projections; "
            "the interaction coefficient is not identified by this moment"
        )
    y2xl = data.y2 * (data.x[:, l] - eta3[l])
    return _Parts(q, xi, phi, zeta, y2xl, data.y1, _auto(config.learner_gamma, data))


def _moment_fn(parts: _Parts):
    """Return ``eta_bar -> per-observation test moment``.

    With least squares the Step-2 coefficient is linear in ``eta_bar``, so the
    moment is ``u - eta_bar v`` and is computed once.
    """
    q, xi, phi = parts.q, parts.xi, parts.phi
    if parts.gamma_spec.method == "least-squares":
        ga = _coefficients(xi, parts.y1, parts.gamma_spec)
        gb = _coefficients(xi, parts.y2xl, parts.gamma_spec)
        u = (parts.y1 - q @ ga) * phi
        v = (parts.y2xl - q @ gb) * phi
        return lambda eta_bar: u - eta_bar * v, lambda eta_bar: ga - eta_bar * gb

    def gamma(eta_bar):
        return _coefficients(xi, parts.y1 - eta_bar * parts.y2xl, parts.gamma_spec)

    def moment(eta_bar):
        g = gamma(eta_bar)
        return (parts.y1 - q @ g - eta_bar * parts.y2xl) * phi

    return moment, gamma


def _iv_estimate(parts: _Parts):
    """Estimation variant: project ``Y1`` on ``(xi, zeta)``, then IV with ``phi``."""
    n = parts.y1.shape[0]
    design = np.column_stack([parts.xi, parts.zeta])
    coef = _coefficients(design, parts.y1, parts.gamma_spec)
    gamma = coef[:-1]
    y1_star = parts.y1 - parts.q @ gamma
    den = float(np.dot(parts.phi, parts.y2xl))
    if abs(den) / n <= RELEVANCE_TOL * float(np.std(parts.phi)) * float(np.std(parts.y2xl)):
        raise DegenerateInstrument("instrument is uncorrelated with the interaction regressor")
    eta = float(np.dot(parts.phi, y1_star)) / den
    g = (y1_star - eta * parts.y2xl) * parts.phi
    se = float(np.std(g, ddof=1)) / (math.sqrt(n) * abs(den / n))
    return eta, se, gamma, g


def hte_test(data: Dataset, config: HteConfig = HteConfig(), oracle: dict | None = None) -> HteResult:
    """Test ``H0: eta04_l = config.null`` with the orthogonal moment.

    ``oracle`` may carry the true ``p`` (length n) and ``eta3`` to bypass Step 1.
    """
    parts = _prepare(data, config, oracle)
    moment, gamma = _moment_fn(parts)
    g = moment(config.null)
    test = two_sided(moment_t_statistic(g), config.level)
    eta, se, _, _ = _iv_estimate(parts)
    return HteResult(test.statistic, test.p_value, test.reject, eta, se, gamma(config.null),
                     parts.phi, parts.xi, parts.q, g, config.null, config.level)


def hte_estimate(data: Dataset, config: HteConfig = HteConfig(), oracle: dict | None = None) -> HteResult:
    """IV estimate of ``eta04_l`` with instrument ``phi``; the test fields refer to ``config.null``."""
    parts = _prepare(data, config, oracle)
    eta, se, gamma, g = _iv_estimate(parts)
    moment, _ = _moment_fn(parts)
    test = two_sided(moment_t_statistic(moment(config.null)), config.level)
    return HteResult(test.statistic, test.p_value, test.reject, eta, se, gamma,
                     parts.phi, parts.xi, parts.q, g, config.null, config.level)


def _interval(parts, moment, grid, level):
    p_values = np.empty(grid.shape[0])
    for i, eta_bar in enumerate(grid):
        try:
            p_values[i] = two_sided(moment_t_statistic(moment(eta_bar)), level).p_value
        except DegenerateVariance:
            p_values[i] = 0.0
    accepted = grid[p_values >= level]
    if accepted.size == 0:
        return None, float(grid[int(np.argmax(p_values))])
    return (float(accepted.min()), float(accepted.max())), None


def hte_ci(data: Dataset, config: HteConfig = HteConfig(), grid=None,
           oracle: dict | None = None) -> HteResult:
    """Confidence set by test inversion, reported as ``[min, max]`` of accepted grid values.

    The default grid has 241 points over the point estimate plus/minus six
    standard errors. If nothing is accepted, ``ci`` is ``None``,
    ``ci_status`` is ``"EmptyInterval"`` and ``ci_min_p_point`` holds the grid
    point with the largest p-value.
    """
    parts = _prepare(data, config, oracle)
    eta, se, gamma, g = _iv_estimate(parts)
    if grid is None:
        grid = np.linspace(eta - CI_HALF_WIDTH * se, eta + CI_HALF_WIDTH * se, CI_POINTS)
    else:
        grid = np.sort(np.asarray(grid, dtype=float))
        if grid[0] > eta - CI_HALF_WIDTH * se or grid[-1] < eta + CI_HALF_WIDTH * se:
            raise BadSpec("the grid must cover the estimate plus/minus six standard errors")
    moment, _ = _moment_fn(parts)
    ci, min_p = _interval(parts, moment, grid, config.level)
    test = two_sided(moment_t_statistic(moment(config.null)), config.level)
    return HteResult(test.statistic, test.p_value, test.reject, eta, se, gamma,
                     parts.phi, parts.xi, parts.q, g, config.null, config.level,
                     ci=ci, ci_status="ok" if ci is not None else "EmptyInterval",
                     ci_min_p_point=min_p)
