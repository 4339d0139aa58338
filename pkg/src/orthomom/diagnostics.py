"""Numerical checks of local robustness, local power and Le Cam drift.

Moments are evaluated in one of two contexts:

* a :class:`~orthomom.dataset.Dataset`: the moment is a callable
  ``moment(data, theta, shift) -> per-row values`` where ``shift`` is the
  additive perturbation of the nuisance at each row; expectations are
  (optionally ``weights``-weighted) sample means;
* a :class:`~orthomom.funcdiff.DiscreteMixtureModel`: the moment is a
  ``MomentVector``/array on the support or a callable ``theta -> moment``;
  expectations are exact.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from . import funcdiff as fd
from .dataset import (Dataset, DgpSpec, expand_hte_treatment, gen_hte, gen_logit_panel, gen_plm,
                      hte_oracle, plm_oracle)
from .hte import build_ql, build_xi, column_index, zeta_hte
from .errors import BadSpec, InvalidStep, PathInfeasible, SingularScoreMatrix

KINDS = ("additive-nuisance", "multiplicative-density", "parameter")


@dataclass(frozen=True, eq=False)
class PerturbationPath:
    """``kind`` with ``direction`` (``b`` for nuisance paths, ``delta`` for the parameter)."""

    kind: str
    direction: Any
    h: float = 1e-3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise BadSpec(f"unknown path kind {self.kind!r}; choose from {KINDS}")
        if not self.h > 0:
            raise InvalidStep("step size h must be positive")


@dataclass(frozen=True, eq=False)
class GateauxEstimate:
    coarse: float        # central difference with step h
    fine: float          # step h/2
    richardson: float    # (4 fine - coarse) / 3
    consistent: bool     # |coarse - fine| small relative to the derivative


@dataclass(frozen=True, eq=False)
class OrthogonalityReport:
    derivatives: tuple
    estimates: tuple
    max_abs: float
    tolerance: float
    passed: bool
    richardson_consistent: bool

    def to_dict(self) -> dict:
        return {
            "derivatives": [float(d) for d in self.derivatives],
            "richardson": [[e.coarse, e.fine, e.richardson] for e in self.estimates],
            "max_abs": self.max_abs,
            "tolerance": self.tolerance,
            "pass": self.passed,
            "richardson_consistent": self.richardson_consistent,
        }


def _mean(values, weights):
    values = np.asarray(values, dtype=float)
    if weights is None:
        return float(np.mean(values))
    w = np.asarray(weights, dtype=float)
    return float(np.dot(w, values) / np.sum(w))


def _direction_values(direction, data):
    b = direction(data) if callable(direction) else direction
    b = np.asarray(b, dtype=float).reshape(-1)
    if b.shape[0] != data.n:
        raise BadSpec(f"direction has {b.shape[0]} entries, data has {data.n} rows")
    return b


def _perturbed_eta(model, eta, b, tau, kind):
    w = np.array(model.eta(eta), dtype=float)
    b = np.broadcast_to(np.asarray(b, dtype=float), w.shape)
    if kind == "multiplicative-density":
        out = w * (1.0 + tau * b)
    else:
        out = w + tau * b
    if np.any(out < -1e-15):
        raise PathInfeasible("perturbed grid weights leave the simplex")
    if np.any(np.abs(out.sum(axis=1) - 1.0) > 1e-12):
        raise PathInfeasible("perturbation direction must have zero mass in every cell")
    return out


def _moment_at(moment, theta):
    return moment(theta) if callable(moment) else moment


def path_expectation(moment, context, path: PerturbationPath, tau: float, theta=None,
                     eta=None, weights=None) -> float:
    """``E[g]`` at position ``tau`` along ``path``."""
    if isinstance(context, Dataset):
        if path.kind == "multiplicative-density":
            raise BadSpec("density paths need a mixture model context")
        if path.kind == "parameter":
            t = np.atleast_1d(np.asarray(theta, dtype=float)) + tau * np.atleast_1d(path.direction)
            t = float(t[0]) if t.shape == (1,) else t
            return _mean(moment(context, t, 0.0), weights)
        shift = tau * _direction_values(path.direction, context)
        return _mean(moment(context, theta, shift), weights)
    model = context
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if path.kind == "parameter":
        g = _moment_at(moment, theta + tau * np.atleast_1d(path.direction))
        return fd.expectation(model, g, theta, eta)
    w = _perturbed_eta(model, eta, path.direction, tau, path.kind)
    return fd.expectation(model, _moment_at(moment, theta), theta, w)


def richardson(f: Callable[[float], float], h: float) -> GateauxEstimate:
    """Central differences of ``f`` at zero with steps ``h`` and ``h/2``, plus extrapolation."""
    if not h > 0:
        raise InvalidStep("step size h must be positive")

    def central(step):
        return (f(step) - f(-step)) / (2 * step)

    coarse, fine = central(h), central(h / 2)
    rich = (4.0 * fine - coarse) / 3.0
    # central differences err by O(h^2): halving h should change the estimate by
    # a small fraction of it (or by nothing, for a path that is linear in tau)
    slack = max(abs(rich), 1e-12) * 1e-2 + 1e-10 * max(abs(coarse), abs(fine), 1.0)
    return GateauxEstimate(coarse, fine, rich, abs(coarse - fine) <= slack)


def gateaux_estimates(moment, context, path: PerturbationPath, theta=None, eta=None,
                      weights=None) -> GateauxEstimate:
    return richardson(lambda tau: path_expectation(moment, context, path, tau, theta, eta, weights), path.h)


def gateaux_derivative(moment, context, path: PerturbationPath, theta=None, eta=None,
                       weights=None) -> float:
    """Richardson-extrapolated ``d/dtau E[g]`` along ``path`` at ``tau = 0``."""
    return gateaux_estimates(moment, context, path, theta, eta, weights).richardson


def orthogonality_report(moment, context, paths: Sequence[PerturbationPath], tolerance: float,
                         theta=None, eta=None, weights=None) -> OrthogonalityReport:
    """Derivatives along every path; ``passed`` iff all are within ``tolerance``.

    ``tolerance`` may be a scalar or a sequence (one per path).
    """
    ests = [gateaux_estimates(moment, context, p, theta, eta, weights) for p in paths]
    ders = tuple(e.richardson for e in ests)
    tol = np.broadcast_to(np.asarray(tolerance, dtype=float), (len(ders),))
    max_abs = max((abs(d) for d in ders), default=0.0)
    passed = all(abs(d) <= t for d, t in zip(ders, tol))
    return OrthogonalityReport(ders, tuple(ests), float(max_abs), float(np.max(tol, initial=0.0)),
                               bool(passed), all(e.consistent for e in ests))


def power_slope(moment, context, delta, theta=None, eta=None, weights=None, h: float = 1e-3,
                check_paths: Sequence[PerturbationPath] | None = None, tolerance: float = 1e-6) -> float:
    """``d/dtau E[g(Z, theta + tau delta, eta)]`` at zero.

    If ``check_paths`` is given, local robustness along them is checked first
    and a warning is emitted when it fails.
    """
    delta = np.atleast_1d(np.asarray(delta, dtype=float))
    if not np.any(delta):
        return 0.0
    if check_paths:
        rep = orthogonality_report(moment, context, check_paths, tolerance, theta, eta, weights)
        if not rep.passed:
            warnings.warn("moment is not locally robust along the supplied paths", stacklevel=2)
    path = PerturbationPath("parameter", delta, h)
    return gateaux_derivative(moment, context, path, theta, eta, weights)


# -- partly linear model moments as dataset callables ------------------------------

def plm_lr_moment(nuisances: dict) -> Callable:
    """``(Y1 - r1 - shift - theta (Y2 - r2)) zeta`` with fixed nuisance arrays.

    An additive change ``b(X)`` in ``eta0`` moves ``r1 = E[Y1|X]`` by ``b``.
    """
    r1, r2, zeta = (np.asarray(nuisances[k], dtype=float) for k in ("r1", "r2", "zeta"))

    def g(data, theta, shift):
        return (data.y1 - r1 - shift - theta * (data.y2 - r2)) * zeta
    return g


def plm_plugin_moment(eta: np.ndarray) -> Callable:
    """``(Y1 - theta Y2 - eta(X) - shift) Z2``."""
    eta = np.asarray(eta, dtype=float)

    def g(data, theta, shift):
        return (data.y1 - theta * data.y2 - eta - shift) * data.z2[:, 0]
    return g


@dataclass(frozen=True, eq=False)
class GaussianBump:
    """``b(x) = amplitude * exp(-|x - center|^2 / (2 width^2))``."""

    amplitude: float
    center: np.ndarray
    width: float

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.amplitude * np.exp(-np.sum((x - self.center) ** 2, axis=1) / (2 * self.width**2))


def random_bumps(dim: int, count: int, seed: int, scale: float = 1.0) -> list[GaussianBump]:
    """Smooth bounded bumps with centres near the origin, widths in [1, 2] and random sign."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        c = 0.5 * rng.normal(size=dim)
        s = rng.uniform(1.0, 2.0)
        a = scale * rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.5)
        out.append(GaussianBump(a, c, s))
    return out


def random_mixture_directions(model, count: int, seed: int, eta=None) -> list[np.ndarray]:
    """Bounded ``C x G`` directions with zero mean under ``eta`` in every cell."""
    rng = np.random.default_rng(seed)
    w = np.asarray(model.eta(eta), dtype=float)
    out = []
    for _ in range(count):
        b = rng.uniform(-1.0, 1.0, size=w.shape)
        b = b - np.sum(w * b, axis=1, keepdims=True)
        out.append(b / max(1.0, float(np.max(np.abs(b)))))
    return out


# -- Le Cam drift -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DriftResult:
    empirical_mean: float
    empirical_sd: float
    predicted_mean: float
    empirical_variance: float
    predicted_variance: float
    mc_se: float
    replications: int

    @property
    def within(self) -> bool:
        return abs(self.empirical_mean - self.predicted_mean) <= 3.0 * self.mc_se

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("empirical_mean", "empirical_sd", "predicted_mean",
                                              "empirical_variance", "predicted_variance", "mc_se",
                                              "replications")} | {"within_3se": self.within}


def plm_lr_dataset_moment(spec: DgpSpec, data: Dataset, theta_bar: float) -> np.ndarray:
    """Orthogonal PLM moment at ``theta_bar`` with the generating design's true nuisances."""
    o = plm_oracle(spec, data)
    return (data.y1 - o["r1"] - theta_bar * (data.y2 - o["r2"])) * o["zeta"]


def _summary(stats, predicted, variance):
    stats = np.asarray(stats, dtype=float)
    r = stats.shape[0]
    sd = float(np.std(stats, ddof=1))
    return DriftResult(float(math.fsum(stats) / r), sd, float(predicted), sd * sd, float(variance),
                       sd / math.sqrt(r), r)


def drift_check(moment, dgp: DgpSpec, delta: float, n: int, R: int, seed: int = 0,
                direction=None, calibration_n: int = 400_000) -> DriftResult:
    """Distribution of ``sqrt(n) mean(g)`` under the local alternative ``theta0 + delta/sqrt(n)``.

    ``plm`` designs: ``moment(spec, data, theta_bar)`` returns per-row values at the
    null ``theta_bar = dgp.theta0``; the prediction ``-slope * delta`` and ``E[g^2]``
    are computed on a ``calibration_n`` sample drawn under the null.

    ``logit-panel`` designs: ``moment`` is a fixed moment on the support (or a
    callable ``theta -> moment``, evaluated at the null). ``direction`` optionally
    moves the grid weights too, as ``eta (1 + b/sqrt(n))``. Predictions are exact.
    """
    if R < 500:
        raise BadSpec("drift checks need R >= 500 replications")
    rng = np.random.default_rng(seed)
    theta_bar = float(dgp.theta0[0])
    theta_n = theta_bar + delta / math.sqrt(n)
    if dgp.family == "plm":
        null = gen_plm(dgp.with_(n=calibration_n, seed=int(rng.integers(2**63))))
        g0 = np.asarray(moment(dgp, null, theta_bar), dtype=float)

        def shifted(data, theta, shift):
            return moment(dgp, data, theta)
        slope = power_slope(shifted, null, [1.0], theta=theta_bar)
        stats = []
        for _ in range(R):
            spec_r = dgp.with_(n=n, theta0=(theta_n,), seed=int(rng.integers(2**63)))
            data = gen_plm(spec_r)
            stats.append(math.sqrt(n) * float(np.mean(moment(spec_r, data, theta_bar))))
        return _summary(stats, -slope * delta, float(np.mean(g0 * g0)))
    if dgp.family == "logit-panel":
        model, _ = gen_logit_panel(dgp.with_(n=1))
        theta = np.array([theta_bar])
        g = fd.MomentVector(_moment_at(moment, theta).g if not isinstance(moment, np.ndarray) else moment,
                            "fixed", theta)
        w0 = np.asarray(model.eta(), dtype=float)
        b = np.zeros_like(w0) if direction is None else np.broadcast_to(np.asarray(direction, float), w0.shape)

        def along(tau):
            w = w0 * (1.0 + tau * b)
            return fd.expectation(model, g, theta + tau * delta, w)

        hstep = 1e-4
        predicted = (along(hstep) - along(-hstep)) / (2 * hstep)
        probs_alt = fd.outcome_probs(model, [theta_n], w0 * (1.0 + b / math.sqrt(n))).reshape(-1)
        probs_alt = np.clip(probs_alt, 0.0, None)
        probs_alt /= probs_alt.sum()
        gv = g.g.reshape(-1)
        mean0 = fd.expectation(model, g, theta)
        variance = fd.expectation(model, g.g ** 2, theta) - mean0**2
        counts = rng.multinomial(n, probs_alt, size=R)
        stats = math.sqrt(n) * (counts @ gv) / n
        return _summary(stats, predicted, variance)
    raise BadSpec(f"drift checks support the plm and logit-panel families, not {dgp.family!r}")


# -- Neyman projection ---------------------------------------------------------------

def project_out_scores(m, scores, probs=None, center: bool = False):
    """Residual of ``m`` after least-squares projection on the nuisance scores.

    ``g = m - beta's`` with ``beta = E[ss']^{-1} E[s m]``. With ``probs``
    (same leading shape as ``m``) expectations are probability-weighted sums,
    e.g. over an outcome support; otherwise sample means over rows. Returns
    ``(g, beta)``.
    """
    m = np.asarray(m, dtype=float)
    s = np.asarray(scores, dtype=float)
    shape = m.shape
    mv = m.reshape(-1)
    s = s.reshape(mv.shape[0], -1)
    w = np.full(mv.shape[0], 1.0 / mv.shape[0]) if probs is None else np.asarray(probs, float).reshape(-1)
    if w.shape[0] != mv.shape[0]:
        raise BadSpec("probs must match the moment's shape")
    if center:
        mv = mv - np.dot(w, mv) / np.sum(w)
    gram = (s * w[:, None]).T @ s
    if s.shape[1] == 0:
        return mv.reshape(shape), np.zeros(0)
    cond = np.linalg.cond(gram) if np.all(np.isfinite(gram)) else np.inf
    if not np.isfinite(cond) or cond > 1e10:
        raise SingularScoreMatrix(f"score second-moment matrix is singular (condition {cond:.3g})")
    beta = np.linalg.solve(gram, (s * w[:, None]).T @ mv)
    g = mv - s @ beta
    return g.reshape(shape), beta


# -- heterogeneous effects --------------------------------------------------------

def _weighted_residual(features, target, w):
    sw = np.sqrt(w)
    coef = np.linalg.lstsq(features * sw[:, None], target * sw, rcond=None)[0]
    return target - features @ coef


def hte_moment_mean(data: Dataset, weights, l, null, p, eta3, gamma, variant: str = "orthogonal") -> tuple:
    """Weighted mean and sd of the test moment with all nuisances supplied.

    ``variant="orthogonal"`` uses ``Q_l`` in the residual; ``"xi"`` uses
    ``xi_l`` instead, the variant that is not robust to errors in ``p``.
    """
    w = np.asarray(weights, dtype=float)
    l = column_index(data, l)
    q = build_ql(data, l, eta3)
    xi = build_xi(data, p, l, eta3)
    phi = _weighted_residual(xi, zeta_hte(data, p, l, eta3), w)
    basis = q if variant == "orthogonal" else xi
    g = (data.y1 - basis @ gamma - null * data.y2 * (data.x[:, l] - eta3[l])) * phi
    mean = float(np.dot(w, g) / w.sum())
    sd = math.sqrt(float(np.dot(w, (g - mean) ** 2) / w.sum()))
    return mean, sd


def hte_perturbation_report(spec: DgpSpec, l: int = 0, count: int = 20, seed: int = 0,
                            h: float = 1e-3, rel_tol: float = 1e-3,
                            variant: str = "orthogonal") -> dict:
    """Derivatives of the test moment along random perturbations of ``gamma``, ``eta3`` and ``p``.

    The sample of ``W`` is drawn from ``spec``; ``(Y2, e)`` are integrated out
    exactly given ``W``, so derivatives carry no treatment or outcome noise.
    The null value is the design's own ``eta4_l``. Returns one
    :class:`OrthogonalityReport` per nuisance, with tolerance
    ``rel_tol * sd(g) * rms(direction)``.
    """
    data = expand_hte_treatment(spec, gen_hte(spec))
    w = data["weight"]
    l = column_index(data, l)
    d = data.x.shape[1]
    eta3 = np.asarray(spec.eta3, dtype=float)
    p = hte_oracle(spec, data)["p"]
    eta4 = np.asarray(spec.eta4, dtype=float)
    gamma = np.concatenate([[spec.theta0[0], spec.eta1], spec.eta2, np.delete(eta4, l)])
    null = float(eta4[l])
    _, sd = hte_moment_mean(data, w, l, null, p, eta3, gamma, variant)
    rng = np.random.default_rng(seed)
    xw = data.w
    out = {}
    for name in ("gamma", "eta3", "p"):
        ests, tols = [], []
        for _ in range(count):
            if name == "gamma":
                u = rng.normal(size=gamma.shape[0])
                f = lambda t, u=u: hte_moment_mean(data, w, l, null, p, eta3, gamma + t * u, variant)[0]
                size = math.sqrt(float(np.mean(u * u)))
            elif name == "eta3":
                u = rng.normal(size=d)
                f = lambda t, u=u: hte_moment_mean(data, w, l, null, p, eta3 + t * u, gamma, variant)[0]
                size = math.sqrt(float(np.mean(u * u)))
            else:
                c = rng.normal(size=xw.shape[1])
                u = p * (1.0 - p) * np.tanh(xw @ c / math.sqrt(xw.shape[1]))
                f = lambda t, u=u: hte_moment_mean(data, w, l, null, p + t * u, eta3, gamma, variant)[0]
                size = math.sqrt(float(np.dot(w, u * u) / w.sum()))
            ests.append(richardson(f, h))
            tols.append(rel_tol * sd * size)
        ders = tuple(e.richardson for e in ests)
        out[name] = OrthogonalityReport(ders, tuple(ests), max(abs(x) for x in ders), max(tols),
                                        all(abs(x) <= t for x, t in zip(ders, tols)),
                                        all(e.consistent for e in ests))
    return out
