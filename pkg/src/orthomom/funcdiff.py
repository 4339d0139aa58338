"""Moments for discrete mixture models with unobserved heterogeneity on a grid.

The data ``Z`` take ``M`` values inside each covariate cell ``c``; the
heterogeneity ``alpha`` lives on a grid of ``G`` points with weights ``eta``.
Everything is driven by the ``M x G`` matrix ``L_c(theta)[m, g] = f(z_m | alpha_g; theta)``:

* nuisance-free (NF) moments solve ``L'g = 0``;
* partial moments for ``psi = E_eta[r(alpha)]`` solve ``L'g = r - psi``;
* fully robust moments additionally have ``d/dtheta E[g] = 0``.

Derivatives of moment expectations in ``theta`` use the identity
``E[dg/dtheta] = -E[g s_theta]``, which holds for every moment built here
because its mean is zero for all ``theta`` at fixed ``eta``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import expit

from .errors import (BadSpec, ColumnSpaceFailure, DegenerateFunctional, DensityNearZero,
                     DimensionMismatch, NonStochastic, NotProportional, NotSolvable,
                     QuadratureTooCoarse, SingularJacobian)

NULL_TOL = 1e-10        # singular values <= NULL_TOL * s_max count as zero
SOLVE_TOL = 1e-6        # relative range residual that makes r - psi unsolvable
PROPORTIONAL_TOL = 1e-6
JACOBIAN_COND = 1e10


@dataclass(frozen=True, eq=False)
class DiscreteMixtureModel:
    """Finite mixture ``P(z | x_c) = sum_g f(z | alpha_g, x_c; theta) eta_c(alpha_g)``.

    ``pmf(theta, c)`` returns the ``M x G`` matrix for cell ``c``; ``dpmf(theta, c)``
    (optional) returns its ``p x M x G`` derivative. Without ``dpmf`` central
    differences with step ``1e-5 (1 + |theta_j|)`` are used.
    """

    outcomes: tuple
    alpha: np.ndarray
    pmf: Callable
    p: int
    n_cells: int = 1
    weights: np.ndarray | None = None          # (G,) or (C, G)
    cell_probs: np.ndarray | None = None       # (C,)
    dpmf: Callable | None = None
    cells: np.ndarray | None = None
    name: str = "custom"

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float)
        object.__setattr__(self, "alpha", alpha)
        g = alpha.shape[0]
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape not in ((g,), (self.n_cells, g)):
                raise DimensionMismatch("weights must have shape (G,) or (C, G)")
            if np.any(w < 0) or np.any(np.abs(w.reshape(-1, g).sum(axis=1) - 1.0) > 1e-12):
                raise BadSpec("grid weights must be non-negative and sum to 1")
            object.__setattr__(self, "weights", w)
        cp = np.full(self.n_cells, 1.0 / self.n_cells) if self.cell_probs is None else np.asarray(self.cell_probs, float)
        if cp.shape != (self.n_cells,) or abs(cp.sum() - 1.0) > 1e-12:
            raise BadSpec("cell_probs must have one entry per cell and sum to 1")
        object.__setattr__(self, "cell_probs", cp)

    @property
    def M(self) -> int:
        return len(self.outcomes)

    @property
    def G(self) -> int:
        return self.alpha.shape[0]

    def eta(self, eta=None) -> np.ndarray:
        """Grid weights as a ``C x G`` array."""
        w = self.weights if eta is None else np.asarray(eta, dtype=float)
        if w is None:
            raise BadSpec("grid weights are needed for expectations")
        return np.broadcast_to(w, (self.n_cells, self.G))

    def with_weights(self, eta) -> "DiscreteMixtureModel":
        return DiscreteMixtureModel(self.outcomes, self.alpha, self.pmf, self.p, self.n_cells, eta,
                                    self.cell_probs, self.dpmf, self.cells, self.name)


@dataclass(frozen=True)
class RieszSpec:
    """Representer ``r(alpha)`` of ``psi = E_eta[r(alpha)]`` on the grid."""

    r: tuple
    description: str = ""

    def __post_init__(self):
        object.__setattr__(self, "r", tuple(float(v) for v in np.asarray(self.r, dtype=float).reshape(-1)))

    @property
    def values(self) -> np.ndarray:
        return np.asarray(self.r)


@dataclass(frozen=True, eq=False)
class MomentVector:
    """Moment values on the outcome support, one row per covariate cell."""

    g: np.ndarray
    kind: str
    theta: np.ndarray
    psi: float | None = None
    C: float | None = None
    residual: float = 0.0
    function: Callable | None = field(default=None, repr=False)

    def __post_init__(self):
        g = np.array(self.g, dtype=float)
        if g.ndim == 1:
            g = g[None, :]
        g.flags.writeable = False
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "theta", np.atleast_1d(np.asarray(self.theta, dtype=float)))

    def scaled(self, c: float) -> "MomentVector":
        return MomentVector(self.g * c, self.kind, self.theta, self.psi,
                            None if self.C is None else self.C * c, self.residual * abs(c))


def _theta(theta, p):
    t = np.atleast_1d(np.asarray(theta, dtype=float))
    if t.shape != (p,):
        raise DimensionMismatch(f"theta must have {p} entries")
    return t


# -- built-in families -------------------------------------------------------

LOGIT_T2_OUTCOMES = ((0, 0), (1, 0), (0, 1), (1, 1))


def logit_panel_model(alpha_grid, cells=((0.0, 1.0),), weights=None, cell_probs=None) -> DiscreteMixtureModel:
    """Two-period binary logit ``P(Y_t = 1 | alpha, x) = logistic(alpha + theta x_t)``.

    Outcomes are ordered ``(0,0), (1,0), (0,1), (1,1)``.
    """
    cells = np.asarray(cells, dtype=float).reshape(-1, 2)
    grid = np.asarray(alpha_grid, dtype=float).reshape(-1)
    y = np.asarray(LOGIT_T2_OUTCOMES, dtype=float)

    def probs(theta, c):
        s = expit(grid[None, :] + theta[0] * cells[c][:, None])            # (2, G)
        f = np.ones((4, grid.size))
        for t in range(2):
            f *= np.where(y[:, t:t + 1] == 1.0, s[t][None, :], 1.0 - s[t][None, :])
        return f, s

    def pmf(theta, c):
        return probs(theta, c)[0]

    def dpmf(theta, c):
        f, s = probs(theta, c)
        dlog = sum(cells[c][t] * (y[:, t:t + 1] - s[t][None, :]) for t in range(2))
        return (f * dlog)[None, :, :]

    return DiscreteMixtureModel(LOGIT_T2_OUTCOMES, grid, pmf, 1, len(cells), weights, cell_probs,
                                dpmf, cells, "logit-panel-T2")


def custom_table_model(table, alpha_grid=None, weights=None, cell_probs=None, outcomes=None) -> DiscreteMixtureModel:
    """Model from an explicit ``C x M x G`` (or ``M x G``) probability table.

    The table does not depend on ``theta``; ``theta`` is a dummy scalar.
    """
    t = np.asarray(table, dtype=float)
    if t.ndim == 2:
        t = t[None]
    if t.ndim != 3:
        raise DimensionMismatch("table must be M x G or C x M x G")
    c, m, g = t.shape
    alpha = np.arange(g, dtype=float) if alpha_grid is None else np.asarray(alpha_grid, dtype=float)
    if alpha.shape[0] != g:
        raise DimensionMismatch("alpha_grid length must match the table's G")
    outcomes = tuple(range(m)) if outcomes is None else tuple(outcomes)
    frozen = t.copy()
    frozen.flags.writeable = False
    return DiscreteMixtureModel(outcomes, alpha, lambda theta, cell: frozen[cell], 1, c, weights,
                                cell_probs, lambda theta, cell: np.zeros((1, m, g)), None, "custom-table")


# -- the conditional matrix and its derivative -------------------------------

def _raw(model, theta, cell):
    return np.asarray(model.pmf(_theta(theta, model.p), cell), dtype=float)


def conditional_matrix(model: DiscreteMixtureModel, theta, cell: int = 0) -> np.ndarray:
    """``L[m, g] = f(z_m | alpha_g; theta)`` for one covariate cell."""
    if not 0 <= cell < model.n_cells:
        raise DimensionMismatch(f"cell {cell} outside 0..{model.n_cells - 1}")
    mat = _raw(model, theta, cell)
    if mat.shape != (model.M, model.G):
        raise DimensionMismatch(f"pmf returned shape {mat.shape}, expected {(model.M, model.G)}")
    sums = mat.sum(axis=0)
    if np.any(np.abs(sums - 1.0) > 1e-8) or np.any(mat < -1e-15):
        raise NonStochastic(f"columns are not probability vectors (max |sum - 1| = {np.max(np.abs(sums - 1)):.3g})")
    return mat


def conditional_derivative(model: DiscreteMixtureModel, theta, cell: int = 0) -> np.ndarray:
    """``dL/dtheta_j`` stacked as a ``p x M x G`` array."""
    theta = _theta(theta, model.p)
    if model.dpmf is not None:
        return np.asarray(model.dpmf(theta, cell), dtype=float).reshape(model.p, model.M, model.G)
    out = np.empty((model.p, model.M, model.G))
    for j in range(model.p):
        h = 1e-5 * (1.0 + abs(theta[j]))
        e = np.zeros(model.p)
        e[j] = h
        out[j] = (_raw(model, theta + e, cell) - _raw(model, theta - e, cell)) / (2 * h)
    return out


def outcome_probs(model: DiscreteMixtureModel, theta, eta=None) -> np.ndarray:
    """``C x M`` joint probabilities ``P(cell) P(z | cell)``."""
    w = model.eta(eta)
    return np.stack([model.cell_probs[c] * conditional_matrix(model, theta, c) @ w[c]
                     for c in range(model.n_cells)])


def expectation(model: DiscreteMixtureModel, g, theta, eta=None) -> float:
    """Exact ``E[g(Z)]`` under ``(theta, eta)``."""
    g = np.asarray(g.g if isinstance(g, MomentVector) else g, dtype=float).reshape(model.n_cells, model.M)
    return float(np.sum(g * outcome_probs(model, theta, eta)))


def score_products(model: DiscreteMixtureModel, g, theta, eta=None) -> np.ndarray:
    """``E[g s_theta] = sum_z g(z) d/dtheta P(z)`` as a length-``p`` vector."""
    g = np.asarray(g.g if isinstance(g, MomentVector) else g, dtype=float).reshape(model.n_cells, model.M)
    w = model.eta(eta)
    out = np.zeros(model.p)
    for c in range(model.n_cells):
        dl = conditional_derivative(model, theta, c)
        out += model.cell_probs[c] * np.einsum("m,jmg,g->j", g[c], dl, w[c])
    return out


def expected_theta_derivative(model, g, theta, eta=None) -> np.ndarray:
    """``E[dg/dtheta]`` for a moment whose mean vanishes for all ``theta``: ``-E[g s_theta]``."""
    return -score_products(model, g, theta, eta)


def second_moment(model, g, theta, eta=None) -> float:
    g = g.g if isinstance(g, MomentVector) else np.asarray(g)
    return expectation(model, np.asarray(g) ** 2, theta, eta)


# -- nuisance-free moments -----------------------------------------------------

def null_basis(mat: np.ndarray, tol: float = NULL_TOL) -> np.ndarray:
    """Orthonormal basis (as columns) of ``{v : mat v = 0}`` via the SVD."""
    rows, cols = mat.shape
    if cols == 0:
        return np.zeros((0, 0))
    _, s, vt = np.linalg.svd(mat, full_matrices=True)
    smax = s[0] if s.size else 0.0
    rank = int(np.sum(s > tol * smax)) if smax > 0 else 0
    return vt[rank:].T.copy()


def nf_moments(model: DiscreteMixtureModel, theta, cell: int = 0) -> list[MomentVector]:
    """Orthonormal basis of the NF moments ``{g : L(theta)'g = 0}`` for one cell.

    Each vector is zero outside ``cell``. An empty list means the model has no
    nuisance-free moment in that cell.
    """
    lt = conditional_matrix(model, theta, cell).T
    basis = null_basis(lt)
    out = []
    for v in basis.T:
        g = np.zeros((model.n_cells, model.M))
        g[cell] = v
        out.append(MomentVector(g, "NF", theta, None, 0.0, float(np.max(np.abs(lt @ v), initial=0.0))))
    return out


def nf_moments_all(model: DiscreteMixtureModel, theta) -> list[MomentVector]:
    return [m for c in range(model.n_cells) for m in nf_moments(model, theta, c)]


def nf_score_moments(model: DiscreteMixtureModel, theta, eta=None) -> list[MomentVector]:
    """One NF moment per ``theta`` coordinate: the projection of the score direction
    ``dL/dtheta_j eta`` onto the NF space of each cell.

    Unlike a raw basis vector this choice varies smoothly with ``theta``.
    """
    w = model.eta(eta)
    out = []
    for j in range(model.p):
        g = np.zeros((model.n_cells, model.M))
        for c in range(model.n_cells):
            n = null_basis(conditional_matrix(model, theta, c).T)
            if n.size:
                d = conditional_derivative(model, theta, c)[j] @ w[c]
                g[c] = n @ (n.T @ d)
        out.append(MomentVector(g, "NF", theta, None, 0.0))
    return out


# -- partial and fully robust moments -----------------------------------------------

def _riesz(r, model):
    r = r.values if isinstance(r, RieszSpec) else np.asarray(r, dtype=float).reshape(-1)
    if r.shape[0] != model.G:
        raise DimensionMismatch(f"r has {r.shape[0]} entries, grid has {model.G}")
    return r


def functional_value(model: DiscreteMixtureModel, r, eta=None) -> float:
    """``psi = E[r(alpha)]`` averaged over cells."""
    r = _riesz(r, model)
    return float(model.cell_probs @ (model.eta(eta) @ r))


def solve_partial_moment(model: DiscreteMixtureModel, theta, r, eta=None) -> MomentVector:
    """Minimum-norm ``g`` with ``L_c(theta)'g_c = r - psi`` in every cell."""
    r = _riesz(r, model)
    psi = functional_value(model, r, eta)
    target = r - psi
    scale = float(np.linalg.norm(target))
    g = np.zeros((model.n_cells, model.M))
    if scale <= 1e-14 * (1.0 + float(np.linalg.norm(r))):
        return MomentVector(g, "partial", theta, psi, 1.0, 0.0)
    worst = 0.0
    for c in range(model.n_cells):
        lt = conditional_matrix(model, theta, c).T
        g[c] = np.linalg.pinv(lt, rcond=NULL_TOL) @ target
        resid = float(np.linalg.norm(lt @ g[c] - target))
        if resid > SOLVE_TOL * scale:
            raise NotSolvable(
                f"r - psi is not in the range of L' in cell {c} (relative residual {resid / scale:.3g})"
            )
        worst = max(worst, resid)
    return MomentVector(g, "partial", theta, psi, 1.0, worst)


def _jacobian(model, ms, theta, eta):
    # rows: moments, columns: theta coordinates
    return np.array([expected_theta_derivative(model, m, theta, eta) for m in ms]).reshape(len(ms), model.p)


def fully_robust_moment(model: DiscreteMixtureModel, theta, g_tilde: MomentVector,
                        ms: Sequence[MomentVector], eta=None) -> MomentVector:
    """``g = g~ - E[dg~/dtheta'] E[dm/dtheta']^{-1} m`` with exact model expectations."""
    ms = list(ms)
    jac = _jacobian(model, ms, theta, eta)
    if jac.shape != (model.p, model.p):
        raise SingularJacobian(f"need exactly {model.p} NF moments, got {len(ms)}")
    if not np.all(np.isfinite(jac)) or np.linalg.cond(jac) > JACOBIAN_COND:
        raise SingularJacobian("the NF moments' Jacobian in theta is singular")
    b = expected_theta_derivative(model, g_tilde, theta, eta)
    coef = np.linalg.solve(jac.T, b)                 # jac' coef = b
    g = g_tilde.g - np.tensordot(coef, np.stack([m.g for m in ms]), axes=1)
    return MomentVector(g, "fully-robust", theta, g_tilde.psi, g_tilde.C, g_tilde.residual)


def proportionality(model: DiscreteMixtureModel, theta, g, r, eta=None):
    """Weighted regression of ``L'g`` on ``r - psi`` over grid points and cells.

    Returns ``(C, max_abs_residual, scale)``.
    """
    r = _riesz(r, model)
    psi = functional_value(model, r, eta)
    target = r - psi
    if float(np.max(np.abs(target))) <= 1e-12 * (1.0 + float(np.max(np.abs(r)))):
        raise DegenerateFunctional("r is constant on the grid; psi carries no information")
    g = np.asarray(g.g if isinstance(g, MomentVector) else g, dtype=float).reshape(model.n_cells, model.M)
    w = model.eta(eta)
    lhs = np.stack([conditional_matrix(model, theta, c).T @ g[c] for c in range(model.n_cells)])
    weights = model.cell_probs[:, None] * w
    num = float(np.sum(weights * lhs * target))
    den = float(np.sum(weights * target * target))
    if den <= 0:
        # no grid mass where r differs from psi; fall back to an unweighted fit
        num = float(np.sum(lhs * target))
        den = float(np.sum(np.broadcast_to(target * target, lhs.shape)))
    c_hat = num / den
    resid = float(np.max(np.abs(lhs - c_hat * target)))
    scale = max(float(np.linalg.norm(g)), float(np.max(np.abs(lhs))), 1e-300)
    return c_hat, resid, scale


def relevance_constant(model: DiscreteMixtureModel, theta, g, r, eta=None) -> float:
    """The ``C`` in ``L'g = C (r - psi)``; zero for orthogonal but uninformative moments."""
    c_hat, resid, scale = proportionality(model, theta, g, r, eta)
    if resid > PROPORTIONAL_TOL * scale:
        raise NotProportional(f"L'g is not proportional to r - psi (residual {resid:.3g})")
    return c_hat


@dataclass(frozen=True, eq=False)
class GeneralResult:
    moment: MomentVector
    g_tilde: MomentVector
    nf: list
    coefficients: np.ndarray
    step3_residual: float
    score_condition: np.ndarray      # E[s_theta g]
    adjoint_residual: float          # max |L'g - C (r2 - psi)|


def general_algorithm(model: DiscreteMixtureModel, theta, r1, r2=None, eta=None,
                      nf: Sequence[MomentVector] | None = None) -> GeneralResult:
    """Orthogonal moment for ``psi = r1'theta + E_eta[r2(alpha)]``.

    Step 2 solves the partial moment ``g~`` for ``r2``; step 3 finds NF moments
    ``m`` and ``A`` with ``E[dm/dtheta']'A = r1 + E[dg~/dtheta]`` (least squares);
    step 4 returns ``g = g~ - A'm``. The output satisfies ``E[s_theta g] = r1``
    and ``L'g = r2 - psi`` (relevance constant one).
    """
    theta = _theta(theta, model.p)
    r1 = np.atleast_1d(np.asarray(r1, dtype=float))
    if r1.shape != (model.p,):
        raise DimensionMismatch(f"r1 must have {model.p} entries")
    if r2 is None:
        r2 = np.zeros(model.G)
    r2 = _riesz(r2, model)
    g_tilde = solve_partial_moment(model, theta, r2, eta)
    ms = nf_moments_all(model, theta) if nf is None else list(nf)
    rhs = r1 + expected_theta_derivative(model, g_tilde, theta, eta)
    scale = max(float(np.linalg.norm(rhs)), float(np.linalg.norm(r1)), 1e-300)
    if ms:
        jac = _jacobian(model, ms, theta, eta)
        coef = np.linalg.lstsq(jac.T, rhs, rcond=None)[0]
        resid = float(np.linalg.norm(jac.T @ coef - rhs))
        g = g_tilde.g - np.tensordot(coef, np.stack([m.g for m in ms]), axes=1)
    else:
        coef = np.zeros(0)
        resid = float(np.linalg.norm(rhs))
        g = g_tilde.g.copy()
    if resid > 1e-8 * scale and float(np.linalg.norm(rhs)) > 0:
        raise ColumnSpaceFailure(
            f"r1 + E[dg~/dtheta] is not in the column space of the NF Jacobian (residual {resid:.3g})"
        )
    psi = functional_value(model, r2, eta) + float(r1 @ theta)
    out = MomentVector(g, "fully-robust", theta, psi, 1.0, 0.0)
    score = score_products(model, out, theta, eta)
    adj = 0.0
    w = model.eta(eta)
    r2c = r2 - functional_value(model, r2, eta)
    for c in range(model.n_cells):
        adj = max(adj, float(np.max(np.abs(conditional_matrix(model, theta, c).T @ g[c] - r2c))))
    return GeneralResult(out, g_tilde, ms, coef, resid, score, adj)


def moment_theta_derivative(model: DiscreteMixtureModel, build: Callable, theta, eta=None,
                            h: float = 1e-4) -> np.ndarray:
    """Central difference of ``tau -> E_{theta, eta}[build(theta + tau e_j)]``.

    ``build(theta)`` returns the moment (a ``MomentVector`` or array) constructed
    at a trial parameter; the expectation stays at the true ``theta``.
    """
    theta = _theta(theta, model.p)
    out = np.empty(model.p)
    for j in range(model.p):
        e = np.zeros(model.p)
        e[j] = h
        out[j] = (expectation(model, build(theta + e), theta, eta)
                  - expectation(model, build(theta - e), theta, eta)) / (2 * h)
    return out


def fully_robust_builder(model: DiscreteMixtureModel, r, eta=None) -> Callable:
    """``theta -> fully robust moment`` using the score-projected NF moments."""
    def build(theta):
        g_tilde = solve_partial_moment(model, theta, r, eta)
        return fully_robust_moment(model, theta, g_tilde, nf_score_moments(model, theta, eta), eta)
    return build


def partial_builder(model: DiscreteMixtureModel, r, eta=None) -> Callable:
    return lambda theta: solve_partial_moment(model, theta, r, eta)


# -- normal means --------------------------------------------------------------

def _bump_constraints(support, centers, width, sigma):
    s2 = width**2 + sigma**2
    factor = width * sigma / math.sqrt(s2)
    return factor * np.exp(-np.subtract.outer(support, centers) ** 2 / (2 * s2))


def _bumps(z, centers, width):
    return np.exp(-np.subtract.outer(np.atleast_1d(z), centers) ** 2 / (2 * width**2))


def gauss_hermite_residuals(fn: Callable, support, theta_bar: float, nodes: int = 200) -> np.ndarray:
    """``int fn(z) phi((z - a)/sqrt(theta)) dz`` for each support point ``a``."""
    x, w = hermegauss(nodes)
    sigma = math.sqrt(theta_bar)
    return np.array([sigma * np.dot(w, fn(a + sigma * x)) for a in np.atleast_1d(support)])


def normal_means_moment(support, theta_bar: float, z_grid=None) -> MomentVector:
    """A moment ``g`` with ``int g(z) phi((z - a_j)/sqrt(theta)) dz = 0`` at every support point.

    ``g`` is expanded in Gaussian bumps centred on ``z_grid`` (width equal to
    the grid spacing) so the constraints have closed forms. The reference
    function ``sum_k bump_k`` is projected onto the constraint nullspace and
    normalised to unit Euclidean norm on the grid. The result is verified with
    Gauss-Hermite quadrature (doubling the node count once if needed).
    """
    support = np.atleast_1d(np.asarray(support, dtype=float))
    if theta_bar <= 0:
        raise BadSpec("theta_bar must be positive")
    sigma = math.sqrt(theta_bar)
    if z_grid is None:
        z_grid = np.linspace(support.min() - 8 * sigma, support.max() + 8 * sigma, 161)
    z_grid = np.asarray(z_grid, dtype=float)
    unique = np.unique(support)
    if z_grid.shape[0] <= unique.shape[0] or z_grid.shape[0] < 2:
        raise QuadratureTooCoarse("need more grid points than distinct support points")
    if z_grid.min() > support.min() - 8 * sigma + 1e-12 or z_grid.max() < support.max() + 8 * sigma - 1e-12:
        raise QuadratureTooCoarse("z_grid must extend 8 sqrt(theta) beyond the support")
    width = float(np.max(np.diff(np.sort(z_grid))))
    b = _bump_constraints(support, z_grid, width, sigma)
    ref = np.ones(z_grid.shape[0])
    coef = ref - np.linalg.pinv(b, rcond=1e-12) @ (b @ ref)
    values = _bumps(z_grid, z_grid, width) @ coef
    norm_ = float(np.linalg.norm(values))
    if norm_ == 0.0:
        raise QuadratureTooCoarse("projected moment vanished on the grid")
    coef = coef / norm_
    values = values / norm_

    def fn(z):
        return _bumps(z, z_grid, width) @ coef

    scale = float(np.max(np.abs(values)))
    for nodes in (200, 400):
        resid = float(np.max(np.abs(gauss_hermite_residuals(fn, support, theta_bar, nodes))))
        if resid <= 1e-6 * scale:
            break
    else:
        raise QuadratureTooCoarse(f"orthogonality residual {resid:.3g} after refinement")
    return MomentVector(values, "NF", [theta_bar], None, 0.0, resid, function=fn)


# -- average marginal effects -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AmeResult:
    psi: float
    se: float
    moment_values: np.ndarray
    plugin: float
    plugin_se: float


def ame_moment(y, x, z2, density: Callable, density_dx: Callable, mu_hat: Callable,
               h: float | None = None) -> AmeResult:
    """Orthogonal average marginal effect ``E[d mu(X, Z2)/dx]`` with a known density of ``X | Z2``.

    ``psi_hat = mean(-Y s - d mu_hat - mu_hat s)`` with ``s = d_x log f(x|z2)``;
    the plug-in ``mean(d mu_hat)`` is returned for contrast. Derivatives of
    ``mu_hat`` are central differences with step ``1e-4 sd(X)``.
    """
    y, x, z2 = (np.asarray(v, dtype=float).reshape(-1) for v in (y, x, z2))
    if not (y.shape == x.shape == z2.shape):
        raise DimensionMismatch("y, x and z2 must have equal length")
    dens = np.asarray(density(x, z2), dtype=float)
    if np.any(dens < 1e-12):
        raise DensityNearZero("the conditional density is below 1e-12 at a sample point")
    s = np.asarray(density_dx(x, z2), dtype=float) / dens
    if h is None:
        h = 1e-4 * float(np.std(x, ddof=1)) if x.shape[0] > 1 else 1e-4
        h = h if h > 0 else 1e-4
    mu = np.asarray(mu_hat(x, z2), dtype=float)
    dmu = (np.asarray(mu_hat(x + h, z2), dtype=float) - np.asarray(mu_hat(x - h, z2), dtype=float)) / (2 * h)
    raw = -y * s - dmu - mu * s
    n = y.shape[0]
    psi = float(np.mean(raw))
    g = raw - psi
    se = float(np.std(g, ddof=1)) / math.sqrt(n) if n > 1 else float("inf")
    plugin = float(np.mean(dmu))
    plugin_se = float(np.std(dmu, ddof=1)) / math.sqrt(n) if n > 1 else float("inf")
    return AmeResult(psi, se, g, plugin, plugin_se)
