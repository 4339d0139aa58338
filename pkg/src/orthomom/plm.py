"""Partly linear IV model ``Y1 = theta Y2 + eta(X) + e`` with ``E[e | X, Z2] = 0``.

The orthogonal moment is ``(Y1~ - theta Y2~) zeta*(W)`` where ``V~ = V - E[V|X]``
and ``zeta*(W) = E[Y2|W] - E[Y2|X]``. All conditional means are cross-fitted
with a shared fold plan, or injected exactly through :class:`PlmNuisances`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .dataset import Dataset
from .errors import BadSpec, DegenerateVariance, IrrelevantInstrument, NonBinaryInstrument
from .learners import LearnerSpec, OofPredictions, cross_fit, fit, make_plan, predict

ESTIMATORS = ("lr-2sls", "fs2sls", "nlr", "plug-in")

# sd(zeta) below this fraction of sd(Y2) is treated as an identically-zero instrument
DEGENERATE_SD = 1e-8
# |mean(zeta * Y2~)| below this multiple of sd(zeta) sd(Y2~) means no identification
RELEVANCE_TOL = 1e-8

DEFAULT_LEARNER = LearnerSpec("least-squares")


@dataclass(frozen=True, eq=False)
class PlmNuisances:
    """Known conditional means ``r1 = E[Y1|X]``, ``r2 = E[Y2|X]``, ``mu = E[Y2|W]``."""

    r1: np.ndarray
    r2: np.ndarray
    mu: np.ndarray

    @classmethod
    def from_oracle(cls, oracle: dict) -> "PlmNuisances":
        return cls(oracle["r1"], oracle["r2"], oracle["mu"])


@dataclass(frozen=True, eq=False)
class PlmComponents:
    y1: np.ndarray
    y2: np.ndarray
    y1_tilde: np.ndarray
    y2_tilde: np.ndarray
    zeta: np.ndarray
    z2: np.ndarray
    degenerate: bool


@dataclass(frozen=True, eq=False)
class PlmFit:
    theta_hat: float
    se: float
    moment_values: np.ndarray
    instrument: np.ndarray
    relevance_denominator: float
    estimator: str
    degenerate: bool

    @property
    def n(self):
        return self.moment_values.shape[0]


@dataclass(frozen=True)
class ScoreTest:
    statistic: float
    p_value: float
    reject: bool


def residualize(data: Dataset, spec: LearnerSpec = DEFAULT_LEARNER, k: int = 5, seed: int = 0,
                oracle: PlmNuisances | None = None):
    """Return ``(Y1~, Y2~, r1_hat, r2_hat)`` with out-of-fold ``E[Y_j | X]``."""
    if oracle is not None:
        r1 = OofPredictions(np.asarray(oracle.r1, dtype=float), None, None)
        r2 = OofPredictions(np.asarray(oracle.r2, dtype=float), None, None)
    else:
        plan = make_plan(data.n, k, seed)
        x = data.x
        r1 = cross_fit(spec, x, data.y1, plan=plan)
        r2 = cross_fit(spec, x, data.y2, plan=plan)
    return data.y1 - r1.values, data.y2 - r2.values, r1, r2


def oriv_instrument(data: Dataset, spec_long: LearnerSpec = DEFAULT_LEARNER,
                    spec_short: LearnerSpec | None = None, k: int = 5, seed: int = 0,
                    oracle: PlmNuisances | None = None) -> np.ndarray:
    """Cross-fitted ``zeta*(W) = mu_hat(W) - r2_hat(X)``.

    Uses the same fold plan as :func:`residualize` for a given seed, so the
    ``r2_hat`` here is the one used to residualise ``Y2``.
    """
    if oracle is not None:
        return np.asarray(oracle.mu, dtype=float) - np.asarray(oracle.r2, dtype=float)
    spec_short = spec_long if spec_short is None else spec_short
    plan = make_plan(data.n, k, seed)
    mu = cross_fit(spec_long, data.w, data.y2, plan=plan).values
    r2 = cross_fit(spec_short, data.x, data.y2, plan=plan).values
    return mu - r2


def _is_degenerate(zeta, y2):
    scale = max(float(np.std(y2)), 1e-300)
    return float(np.std(zeta)) < DEGENERATE_SD * scale


def plm_components(data: Dataset, learner: LearnerSpec = DEFAULT_LEARNER,
                   long_learner: LearnerSpec | None = None, k: int = 5, seed: int = 0,
                   oracle: PlmNuisances | None = None) -> PlmComponents:
    long_learner = learner if long_learner is None else long_learner
    y1t, y2t, _, _ = residualize(data, learner, k, seed, oracle)
    zeta = oriv_instrument(data, long_learner, learner, k, seed, oracle)
    z2 = data.z2[:, 0]
    return PlmComponents(data.y1, data.y2, y1t, y2t, zeta, z2, _is_degenerate(zeta, data.y2))


def _check_relevance(instrument, regressor, degenerate):
    n = instrument.shape[0]
    den = float(np.dot(instrument, regressor))
    bound = RELEVANCE_TOL * float(np.std(instrument)) * float(np.std(regressor))
    if degenerate or abs(den) / n <= bound:
        raise IrrelevantInstrument(
            f"instrument carries no identifying variation (|mean(zeta*Y2~)| = {abs(den) / n:.3g})"
        )
    return den


def _iv(outcome, regressor, instrument, den, tag, zeta, degenerate):
    n = instrument.shape[0]
    theta = float(np.dot(instrument, outcome)) / den
    g = (outcome - theta * regressor) * instrument
    se = float(np.std(g, ddof=1)) / (math.sqrt(n) * abs(den / n)) if n > 1 else float("inf")
    return PlmFit(theta, se, g, zeta, den, tag, degenerate)


def fit_components(comp: PlmComponents, estimator: str = "lr-2sls") -> PlmFit:
    """Solve the chosen estimating equation on precomputed nuisances."""
    zeta = comp.zeta
    if estimator == "plug-in":
        den = _check_relevance(comp.z2, comp.y2_tilde, False)
        return _iv(comp.y1_tilde, comp.y2_tilde, comp.z2, den, estimator, zeta, comp.degenerate)
    _check_relevance(zeta, comp.y2_tilde, comp.degenerate)
    if estimator == "lr-2sls":
        den = float(np.dot(zeta, comp.y2_tilde))
        return _iv(comp.y1_tilde, comp.y2_tilde, zeta, den, estimator, zeta, comp.degenerate)
    if estimator == "fs2sls":
        den = float(np.dot(zeta, comp.y2))
        return _iv(comp.y1, comp.y2, zeta, den, estimator, zeta, comp.degenerate)
    if estimator == "nlr":
        den = float(np.dot(zeta, zeta))
        return _iv(comp.y1_tilde, zeta, zeta, den, estimator, zeta, comp.degenerate)
    raise BadSpec(f"unknown estimator {estimator!r}; choose from {ESTIMATORS}")


def estimate(data: Dataset, estimator: str = "lr-2sls", learner: LearnerSpec = DEFAULT_LEARNER,
             long_learner: LearnerSpec | None = None, k: int = 5, seed: int = 0,
             oracle: PlmNuisances | None = None) -> PlmFit:
    comp = plm_components(data, learner, long_learner, k, seed, oracle)
    return fit_components(comp, estimator)


def estimate_lr_2sls(data, learner=DEFAULT_LEARNER, long_learner=None, k=5, seed=0, oracle=None) -> PlmFit:
    """IV regression of ``Y1~`` on ``Y2~`` with instrument ``zeta*``; the orthogonal estimator."""
    return estimate(data, "lr-2sls", learner, long_learner, k, seed, oracle)


def estimate_fs2sls(data, learner=DEFAULT_LEARNER, long_learner=None, k=5, seed=0, oracle=None) -> PlmFit:
    """``sum zeta Y1 / sum zeta Y2``. Not orthogonal; SE ignores first-step error."""
    return estimate(data, "fs2sls", learner, long_learner, k, seed, oracle)


def estimate_nlr(data, learner=DEFAULT_LEARNER, long_learner=None, k=5, seed=0, oracle=None) -> PlmFit:
    """``sum zeta Y1~ / sum zeta^2``. Not orthogonal; SE ignores first-step error."""
    return estimate(data, "nlr", learner, long_learner, k, seed, oracle)


def estimate_plugin(data, learner=DEFAULT_LEARNER, k=5, seed=0, oracle=None) -> PlmFit:
    """Plug-in IV moment ``(Y1 - theta Y2 - eta_hat(X)) Z2`` with the raw instrument."""
    return estimate(data, "plug-in", learner, None, k, seed, oracle)


def moment_t_statistic(g: np.ndarray) -> float:
    n = g.shape[0]
    sd = float(np.std(g, ddof=1)) if n > 1 else 0.0
    rms = math.sqrt(float(np.mean(g * g)))
    if rms == 0.0 or sd <= 1e-12 * rms:
        raise DegenerateVariance("moment has (numerically) zero variance")
    return math.sqrt(n) * float(np.mean(g)) / sd


def two_sided(statistic: float, level: float) -> ScoreTest:
    if not 0.0 < level < 1.0:
        raise BadSpec("level must lie in (0, 1)")
    p = float(2.0 * norm.sf(abs(statistic)))
    return ScoreTest(float(statistic), min(max(p, 0.0), 1.0), p < level)


def score_test_theta(data: Dataset, theta_bar: float, learner: LearnerSpec = DEFAULT_LEARNER,
                     long_learner: LearnerSpec | None = None, k: int = 5, seed: int = 0,
                     level: float = 0.05, oracle: PlmNuisances | None = None,
                     components: PlmComponents | None = None) -> ScoreTest:
    """Test ``H0: theta = theta_bar`` with the t-ratio of the orthogonal moment."""
    if not 0.0 < level < 1.0:
        raise BadSpec("level must lie in (0, 1)")
    comp = components or plm_components(data, learner, long_learner, k, seed, oracle)
    g = (comp.y1_tilde - theta_bar * comp.y2_tilde) * comp.zeta
    return two_sided(moment_t_statistic(g), level)


# -- dictionary-restricted (possibly high-dimensional) instrument ---------------------

def dictionary_features(x: np.ndarray, dictionary: str = "linear") -> np.ndarray:
    """Non-constant part of ``b(X)``; the constant is the learners' intercept."""
    if dictionary == "constant":
        return np.empty((x.shape[0], 0))
    if dictionary == "linear":
        return x
    if dictionary == "quadratic":
        return np.column_stack([x, x**2])
    raise BadSpec(f"unknown dictionary {dictionary!r}")


def _binary_instrument(data):
    z = data.z2
    if z.shape[1] != 1 or not np.all((z == 0.0) | (z == 1.0)):
        raise NonBinaryInstrument("the dictionary instrument needs a single 0/1 instrument")
    return z[:, 0]


def _gamma_features(b, z):
    return np.column_stack([b, z, z[:, None] * b])


def hd_gamma_instrument(data: Dataset, dictionary: str = "linear", k: int | None = 5, seed: int = 0,
                        learner: LearnerSpec = DEFAULT_LEARNER) -> np.ndarray:
    """``Pi_Gamma Y2 - Pi_Gamma_x Y2`` for ``Gamma = span{b(X), Z2 b(X)}``.

    The short projection is taken of the fitted long projection (iterated
    projections). ``k=None`` projects in-sample; otherwise both projections are
    fitted on the training folds and evaluated on the held-out fold.
    """
    z = _binary_instrument(data)
    b = dictionary_features(data.x, dictionary)
    full = _gamma_features(b, z)
    y2 = data.y2

    def one(train, test):
        long_model = fit(learner, full[train], y2[train])
        long_train = predict(long_model, full[train])
        short_model = fit(learner, b[train], long_train)
        return predict(long_model, full[test]) - predict(short_model, b[test])

    if k is None:
        every = np.ones(data.n, dtype=bool)
        return one(every, every)
    out = np.empty(data.n)
    for train, test in make_plan(data.n, k, seed).folds():
        out[test] = one(train, test)
    return out


def estimate_hd_lr(data: Dataset, dictionary: str = "linear", k: int | None = 5, seed: int = 0,
                   learner: LearnerSpec = DEFAULT_LEARNER) -> PlmFit:
    """Orthogonal IV estimate with the dictionary instrument and ``V~ = V - Pi_Gamma_x V``."""
    zeta = hd_gamma_instrument(data, dictionary, k, seed, learner)
    b = dictionary_features(data.x, dictionary)
    if k is None:
        r1 = predict(fit(learner, b, data.y1), b)
        r2 = predict(fit(learner, b, data.y2), b)
    else:
        plan = make_plan(data.n, k, seed)
        r1 = cross_fit(learner, b, data.y1, plan=plan).values
        r2 = cross_fit(learner, b, data.y2, plan=plan).values
    comp = PlmComponents(data.y1, data.y2, data.y1 - r1, data.y2 - r2, zeta, data.z2[:, 0],
                         _is_degenerate(zeta, data.y2))
    return fit_components(comp, "lr-2sls")
