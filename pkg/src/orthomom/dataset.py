"""Tabular data model, CSV ingestion and the synthetic data-generating processes.

Every generator is a pure function of its :class:`DgpSpec` (including the seed),
and each has a companion ``*_oracle`` function returning the true nuisance
functions evaluated on the sampled rows, so the theory can be checked separately
from first-step estimation noise.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .errors import BadSpec, EmptyFile, MissingColumn, NonFinite, ParseError

ROLE_KEYS = ("y1", "y2", "z2", "x")
_LIST_ROLES = ("z2", "x")


def _normalize_roles(roles: Mapping | None) -> dict:
    out = {}
    for key, val in (roles or {}).items():
        if key not in ROLE_KEYS:
            continue
        if key in _LIST_ROLES:
            out[key] = [val] if isinstance(val, str) else list(val)
        else:
            out[key] = str(val)
    return out


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable column table with role annotations.

    ``roles`` maps ``y1`` (outcome), ``y2`` (endogenous regressor / treatment),
    ``z2`` (excluded instruments) and ``x`` (controls) to column names.
    """

    columns: Mapping[str, np.ndarray]
    roles: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if not self.columns:
            raise EmptyFile("dataset has no columns")
        cols = {}
        n = None
        for name, values in self.columns.items():
            arr = np.array(values, dtype=np.float64).reshape(-1)
            if n is None:
                n = arr.shape[0]
            if arr.shape[0] != n:
                raise BadSpec(f"column {name!r} has length {arr.shape[0]}, expected {n}")
            if not np.all(np.isfinite(arr)):
                raise NonFinite(f"column {name!r} contains non-finite values")
            arr.flags.writeable = False
            cols[str(name)] = arr
        if n < 1:
            raise EmptyFile("dataset has no rows")
        roles = _normalize_roles(self.roles)
        seen = set()
        for key, val in roles.items():
            names = val if isinstance(val, list) else [val]
            for name in names:
                if name not in cols:
                    raise MissingColumn(name)
                if name in seen:
                    raise BadSpec(f"column {name!r} is assigned to more than one role")
                seen.add(name)
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "roles", roles)

    @property
    def n(self) -> int:
        return next(iter(self.columns.values())).shape[0]

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.columns[name]
        except KeyError:
            raise MissingColumn(name) from None

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        if not names:
            return np.empty((self.n, 0))
        return np.column_stack([self[name] for name in names])

    def _role(self, key):
        if key not in self.roles:
            raise MissingColumn(f"role {key!r} is not assigned")
        return self.roles[key]

    @property
    def y1(self) -> np.ndarray:
        return self[self._role("y1")]

    @property
    def y2(self) -> np.ndarray:
        return self[self._role("y2")]

    @property
    def x(self) -> np.ndarray:
        return self.matrix(self._role("x"))

    @property
    def z2(self) -> np.ndarray:
        return self.matrix(self._role("z2"))

    @property
    def x_names(self) -> list[str]:
        return list(self._role("x"))

    @property
    def w(self) -> np.ndarray:
        """Exogenous variables ``(X, Z2)`` with exact duplicate columns dropped.

        An instrument that repeats a control column carries no exclusion
        restriction, so it must not enlarge the conditioning set.
        """
        x = self.x
        extra = [z for z in self.z2.T if not any(np.array_equal(z, c) for c in x.T)]
        if not extra:
            return x
        return np.column_stack([x] + extra)

    def with_columns(self, roles: Mapping | None = None, **new_columns) -> "Dataset":
        cols = dict(self.columns)
        cols.update(new_columns)
        return Dataset(cols, self.roles if roles is None else roles)

    def subset(self, rows) -> "Dataset":
        return Dataset({k: v[rows] for k, v in self.columns.items()}, self.roles)


# -- CSV ---------------------------------------------------------------------

def load_roles(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def load_csv(path, role_config: Mapping | str | Path | None = None) -> Dataset:
    """Read a comma-separated file with a header row into a :class:`Dataset`."""
    if isinstance(role_config, (str, Path)):
        role_config = load_roles(role_config)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or not any(h.strip() for h in header):
            raise EmptyFile(f"{path}: no header row")
        header = [h.strip() for h in header]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            parsed = []
            for col, cell in zip(header, row):
                try:
                    value = float(cell)
                except ValueError:
                    raise ParseError(f"{path}: row {lineno}, column {col!r}: cannot parse {cell!r}") from None
                if not math.isfinite(value):
                    raise ParseError(f"{path}: row {lineno}, column {col!r}: non-finite value {cell!r}")
                parsed.append(value)
            rows.append(parsed)
    if not rows:
        raise EmptyFile(f"{path}: no data rows")
    roles = _normalize_roles(role_config)
    for val in roles.values():
        for name in val if isinstance(val, list) else [val]:
            if name not in header:
                raise MissingColumn(name)
    data = np.asarray(rows, dtype=np.float64)
    return Dataset({name: data[:, j] for j, name in enumerate(header)}, roles)


def save_csv(data: Dataset, path) -> None:
    """Write with ``repr`` formatting so that a reload is bit-exact."""
    names = data.names
    cols = [data[name] for name in names]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for i in range(data.n):
            writer.writerow([repr(float(c[i])) for c in cols])


# -- data-generating processes ----------------------------------------------

FAMILIES = ("plm", "hte", "random-coefficient", "logit-panel", "normal-means", "ame")


@dataclass(frozen=True)
class DgpSpec:
    """Parameters of a simulation design.

    Only the fields relevant to ``family`` are read. ``theta0`` is the
    structural parameter; ``eta1..eta4`` are the heterogeneous-effect nuisance
    coefficients of the ``hte`` family (intercept, control slopes, control
    means, interaction slopes).
    """

    family: str
    n: int
    seed: int = 0
    theta0: tuple = (1.0,)
    rho: float = 0.5
    pi: float = 1.0
    noise: tuple = (1.0, 1.0)
    dim_x: int = 5
    exclusion: bool = True
    relevance_required: bool = False
    eta1: float = 0.0
    eta2: tuple = ()
    eta3: tuple = ()
    eta4: tuple = ()
    alpha_grid: tuple = ()
    alpha_weights: tuple = ()
    x_cells: tuple = ((0.0, 1.0),)
    x_probs: tuple = ()

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise BadSpec(f"unknown family {self.family!r}")
        if int(self.n) < 1:
            raise BadSpec("n must be at least 1")
        if not -1.0 < float(self.rho) < 1.0:
            raise BadSpec("rho must lie in (-1, 1)")
        if any(float(s) <= 0 for s in self.noise):
            raise BadSpec("noise scales must be positive")
        for name in ("theta0", "noise", "eta2", "eta3", "eta4", "alpha_grid", "alpha_weights", "x_probs"):
            val = getattr(self, name)
            if np.isscalar(val):
                val = (val,)
            object.__setattr__(self, name, tuple(float(v) for v in val))
        object.__setattr__(self, "x_cells", tuple(tuple(float(v) for v in c) for c in self.x_cells))
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "seed", int(self.seed))

    @classmethod
    def from_dict(cls, d: Mapping) -> "DgpSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise BadSpec(f"unknown DgpSpec fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def with_(self, **changes) -> "DgpSpec":
        return replace(self, **changes)


def _rng(spec: DgpSpec) -> np.random.Generator:
    return np.random.default_rng(spec.seed)


def _require(spec, family):
    if spec.family != family:
        raise BadSpec(f"expected family {family!r}, got {spec.family!r}")


# Partly linear model. Coefficient vectors are padded/truncated to dim_x.

def _pad(v, d):
    out = np.zeros(d)
    v = np.asarray(v, dtype=float)[:d]
    out[: v.shape[0]] = v
    return out


PLM_INDEX = (0.8, -0.6, 0.4)      # Z2 = 1{X'b + nu > 0}
PLM_M0 = (0.6, 0.4, 0.0, 0.3)     # linear part of E[Y2 | X]
PLM_ETA_LIN = (2.4, -1.8, 1.2, 0.0, 0.5)   # aligned with PLM_INDEX: strong confounding
PLM_ETA_QUAD = 0.5                # coefficient on X3^2 - 1


def _plm_parts(x, d):
    xb = x[:, :d] @ _pad(PLM_INDEX, d)
    m0 = x[:, :d] @ _pad(PLM_M0, d)
    eta = x[:, :d] @ _pad(PLM_ETA_LIN, d)
    if d >= 3:
        eta = eta + PLM_ETA_QUAD * (x[:, 2] ** 2 - 1.0)
    return xb, m0, eta


def gen_plm(spec: DgpSpec) -> Dataset:
    """Partly linear model with an endogenous regressor and a binary instrument.

    ``X ~ N(0, I_d)``, ``Z2 = 1{X'b + nu > 0}``, ``Y2 = m0(X) + pi Z2 + u`` and
    ``Y1 = theta0 Y2 + eta0(X) + e`` with ``corr(u, e) = rho``. With
    ``exclusion=False`` the instrument is also appended to the controls.
    """
    _require(spec, "plm")
    if spec.relevance_required and spec.pi == 0.0:
        raise BadSpec("pi = 0 gives an irrelevant instrument but relevance was required")
    d = spec.dim_x
    if d < 1:
        raise BadSpec("dim_x must be >= 1")
    rng = _rng(spec)
    n = spec.n
    x = rng.standard_normal((n, d))
    nu = rng.standard_normal(n)
    e1 = rng.standard_normal(n)
    e2 = rng.standard_normal(n)
    xb, m0, eta = _plm_parts(x, d)
    z2 = (xb + nu > 0).astype(float)
    s1, s2 = spec.noise[0], spec.noise[-1]
    u = s2 * e2
    eps = s1 * (spec.rho * e2 + math.sqrt(1.0 - spec.rho**2) * e1)
    y2 = m0 + spec.pi * z2 + u
    y1 = spec.theta0[0] * y2 + eta + eps
    cols = {"y1": y1, "y2": y2, "z2": z2}
    xnames = [f"x{j + 1}" for j in range(d)]
    cols.update({name: x[:, j] for j, name in enumerate(xnames)})
    if not spec.exclusion:
        cols["z2_in_x"] = z2.copy()
        xnames.append("z2_in_x")
    return Dataset(cols, {"y1": "y1", "y2": "y2", "z2": ["z2"], "x": xnames})


def plm_oracle(spec: DgpSpec, data: Dataset) -> dict:
    """True conditional means on the rows of ``data``.

    Keys: ``r1 = E[Y1|X]``, ``r2 = E[Y2|X]``, ``mu = E[Y2|W]``, ``eta = eta0(X)``
    and ``zeta = mu - r2``.
    """
    _require(spec, "plm")
    d = spec.dim_x
    x = np.column_stack([data[f"x{j + 1}"] for j in range(d)])
    z2 = data["z2"]
    xb, m0, eta = _plm_parts(x, d)
    mu = m0 + spec.pi * z2
    r2 = mu if not spec.exclusion else m0 + spec.pi * norm.cdf(xb)
    r1 = spec.theta0[0] * r2 + eta
    return {"r1": r1, "r2": r2, "mu": mu, "eta": eta, "zeta": mu - r2}


def plm_instrument_propensity(spec: DgpSpec, data: Dataset) -> np.ndarray:
    """``E[Z2 | X]`` for the ``plm`` family."""
    d = spec.dim_x
    x = np.column_stack([data[f"x{j + 1}"] for j in range(d)])
    if not spec.exclusion:
        return data["z2"].copy()
    return norm.cdf(_plm_parts(x, d)[0])


# Heterogeneous treatment effects.

HTE_KAPPA = (0.3, -0.2)           # first-stage slopes on the leading controls
HTE_CORR = 0.3                    # Toeplitz correlation among controls


def _hte_dims(spec):
    d = len(spec.eta4)
    if d < 1:
        raise BadSpec("hte family needs eta4 with at least one entry")
    if len(spec.eta2) != d or len(spec.eta3) != d:
        raise BadSpec(
            f"dimension mismatch: eta2 has {len(spec.eta2)}, eta3 has {len(spec.eta3)}, eta4 has {d}"
        )
    return d


def hte_spec(n: int, d_x: int = 10, seed: int = 0, l_value: float = 0.0, l: int = 0, **kw) -> DgpSpec:
    """Convenience constructor for the ``hte`` design used in tests and MC runs."""
    eta2 = tuple(0.5 / (j + 1) for j in range(d_x))
    eta3 = tuple(0.2 * ((j % 3) - 1) for j in range(d_x))
    eta4 = [0.0] * d_x
    eta4[l] = l_value
    if d_x > 1:
        eta4[(l + 1) % d_x] = 0.3
    base = dict(family="hte", n=n, seed=seed, theta0=(1.0,), pi=2.0, rho=0.5, eta1=0.5,
                eta2=eta2, eta3=eta3, eta4=tuple(eta4))
    base.update(kw)
    return DgpSpec(**base)


def gen_hte(spec: DgpSpec) -> Dataset:
    """Linear model with treatment interactions and an endogenous binary treatment.

    ``Y2 = 1{pi (Z2 - 1/2) + kappa'(X - eta3) + v > 0}`` with ``Z2 ~ Bernoulli(1/2)``
    and ``Y1 = theta0 Y2 + eta1 + eta2'(X - eta3) + sum_l eta4_l Y2 (X_l - eta3_l) + e``,
    where ``corr(v, e) = rho``. Controls are Gaussian with mean ``eta3``.
    """
    _require(spec, "hte")
    d = _hte_dims(spec)
    rng = _rng(spec)
    n = spec.n
    cov = HTE_CORR ** np.abs(np.subtract.outer(np.arange(d), np.arange(d)))
    chol = np.linalg.cholesky(cov)
    eta3 = np.asarray(spec.eta3)
    xc = rng.standard_normal((n, d)) @ chol.T
    x = eta3 + xc
    z2 = (rng.random(n) < 0.5).astype(float)
    v = rng.standard_normal(n)
    e = rng.standard_normal(n)
    index = spec.pi * (z2 - 0.5) + xc @ _pad(HTE_KAPPA, d)
    y2 = (index + v > 0).astype(float)
    eps = spec.noise[0] * (spec.rho * v + math.sqrt(1.0 - spec.rho**2) * e)
    y1 = (spec.theta0[0] * y2 + spec.eta1 + xc @ np.asarray(spec.eta2)
          + y2 * (xc @ np.asarray(spec.eta4)) + eps)
    cols = {"y1": y1, "y2": y2, "z2": z2}
    xnames = [f"x{j + 1}" for j in range(d)]
    cols.update({name: x[:, j] for j, name in enumerate(xnames)})
    return Dataset(cols, {"y1": "y1", "y2": "y2", "z2": ["z2"], "x": xnames})


def hte_oracle(spec: DgpSpec, data: Dataset) -> dict:
    """True ``p0(W) = E[Y2|W]`` and control means ``eta3``."""
    _require(spec, "hte")
    d = _hte_dims(spec)
    eta3 = np.asarray(spec.eta3)
    xc = data.x - eta3
    index = spec.pi * (data["z2"] - 0.5) + xc @ _pad(HTE_KAPPA, d)
    return {"p": norm.cdf(index), "eta3": eta3.copy()}


# Two-period binary logit panel with discrete unobserved heterogeneity.

def _check_grid(grid, weights):
    grid = np.asarray(grid, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if grid.size == 0:
        raise BadSpec("alpha_grid is empty")
    if weights.size == 0:
        weights = np.full(grid.size, 1.0 / grid.size)
    if weights.shape != grid.shape:
        raise BadSpec("alpha_weights must match alpha_grid")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
        raise BadSpec("alpha_weights must be non-negative and sum to 1 within 1e-12")
    return grid, weights


def gen_logit_panel(spec: DgpSpec):
    """Sample ``(Y_1, Y_2, x_1, x_2)`` from a T=2 logit with fixed effects on a grid.

    Returns ``(model, data)`` where ``model`` is the matching
    :class:`orthomom.funcdiff.DiscreteMixtureModel`.
    """
    from .funcdiff import logit_panel_model

    _require(spec, "logit-panel")
    grid, weights = _check_grid(spec.alpha_grid, spec.alpha_weights)
    cells = np.asarray(spec.x_cells, dtype=float)
    if cells.ndim != 2 or cells.shape[1] != 2:
        raise BadSpec("x_cells must be a list of (x1, x2) pairs")
    probs = np.asarray(spec.x_probs) if spec.x_probs else np.full(len(cells), 1.0 / len(cells))
    if probs.shape[0] != len(cells) or abs(probs.sum() - 1.0) > 1e-12:
        raise BadSpec("x_probs must match x_cells and sum to 1")
    model = logit_panel_model(grid, cells, weights=weights, cell_probs=probs)
    rng = _rng(spec)
    n = spec.n
    cell = rng.choice(len(cells), size=n, p=probs)
    a = grid[rng.choice(grid.size, size=n, p=weights)]
    xs = cells[cell]
    theta = spec.theta0[0]
    u = rng.random((n, 2))
    y = (u < expit(a[:, None] + theta * xs)).astype(float)
    data = Dataset({"y_1": y[:, 0], "y_2": y[:, 1], "x_1": xs[:, 0], "x_2": xs[:, 1]},
                   {"x": ["x_1", "x_2"]})
    return model, data


# Example-3 style linear random coefficients and the normal means model.

RC_SLOPE_GRID = ((-1.0, 0.5), (0.0, 1.5), (1.0, 1.0))
RC_X1_ON_W = 0.7


def gen_random_coefficient(spec: DgpSpec) -> Dataset:
    """``Y = theta0 X1 + alpha0 + alpha1 W`` with ``alpha`` independent of ``(X1, W)``.

    ``alpha`` is drawn from ``alpha_grid`` pairs (default three support points);
    the drawn support index is kept in column ``alpha_bin`` for invariance checks.
    """
    _require(spec, "random-coefficient")
    pairs = np.asarray(spec.alpha_grid, dtype=float).reshape(-1, 2) if spec.alpha_grid else np.asarray(RC_SLOPE_GRID)
    weights = np.asarray(spec.alpha_weights) if spec.alpha_weights else np.full(len(pairs), 1.0 / len(pairs))
    if weights.shape[0] != len(pairs) or abs(weights.sum() - 1.0) > 1e-12:
        raise BadSpec("alpha_weights must match the coefficient grid and sum to 1")
    rng = _rng(spec)
    n = spec.n
    w = rng.standard_normal(n)
    x1 = RC_X1_ON_W * w + rng.standard_normal(n)
    k = rng.choice(len(pairs), size=n, p=weights)
    alpha = pairs[k]
    y = spec.theta0[0] * x1 + alpha[:, 0] + alpha[:, 1] * w
    return Dataset({"y": y, "x1": x1, "w": w, "alpha_bin": k.astype(float)},
                   {"y1": "y", "x": ["w"]})


def random_coefficient_oracle(spec: DgpSpec, data: Dataset) -> dict:
    pairs = np.asarray(spec.alpha_grid, dtype=float).reshape(-1, 2) if spec.alpha_grid else np.asarray(RC_SLOPE_GRID)
    weights = np.asarray(spec.alpha_weights) if spec.alpha_weights else np.full(len(pairs), 1.0 / len(pairs))
    mean_alpha = weights @ pairs
    w = data["w"]
    ex1 = RC_X1_ON_W * w
    ey = spec.theta0[0] * ex1 + mean_alpha[0] + mean_alpha[1] * w
    return {"x1_given_x2": ex1, "y_given_x2": ey, "alpha_support": pairs, "alpha_weights": weights}


def gen_normal_means(spec: DgpSpec) -> Dataset:
    """``Z = alpha + sqrt(theta0) u`` with ``alpha`` on a finite support."""
    _require(spec, "normal-means")
    grid, weights = _check_grid(spec.alpha_grid or (0.0,), spec.alpha_weights)
    rng = _rng(spec)
    k = rng.choice(grid.size, size=spec.n, p=weights)
    z = grid[k] + math.sqrt(spec.theta0[0]) * rng.standard_normal(spec.n)
    return Dataset({"z": z, "alpha_bin": k.astype(float)}, {"y1": "z"})


# Average marginal effects in a nonseparable model Y = alpha1 + alpha2 X.

AME_SHIFT = 0.8   # X | Z2 ~ N(AME_SHIFT * Z2, 1)


def gen_ame(spec: DgpSpec) -> Dataset:
    """``Y = alpha1 + alpha2 X`` with ``alpha`` independent of ``X`` given ``Z2``.

    ``alpha2 = theta0 (1 + Z2/2 + e/2)`` so the average marginal effect is
    ``1.25 theta0``; ``theta0 = 0`` removes all dependence of ``Y`` on ``X``.
    """
    _require(spec, "ame")
    rng = _rng(spec)
    n = spec.n
    z2 = (rng.random(n) < 0.5).astype(float)
    x = AME_SHIFT * z2 + rng.standard_normal(n)
    a1 = z2 + rng.standard_normal(n)
    a2 = spec.theta0[0] * (1.0 + 0.5 * z2 + 0.5 * rng.standard_normal(n))
    y = a1 + a2 * x
    return Dataset({"y": y, "x": x, "z2": z2}, {"y1": "y", "z2": ["z2"], "x": ["x"]})


def ame_oracle(spec: DgpSpec) -> dict:
    """Known conditional density of ``X`` given ``Z2``, true regression and target."""
    theta = spec.theta0[0]

    def density(x, z2):
        return norm.pdf(x - AME_SHIFT * z2)

    def density_dx(x, z2):
        return -(x - AME_SHIFT * z2) * norm.pdf(x - AME_SHIFT * z2)

    def mu(x, z2):
        return z2 + theta * (1.0 + 0.5 * z2) * x

    return {"density": density, "density_dx": density_dx, "mu": mu, "psi": 1.25 * theta}


def simulate(spec: DgpSpec) -> Dataset:
    """Dispatch on ``spec.family``; the logit panel returns only its data here."""
    gen = {
        "plm": gen_plm,
        "hte": gen_hte,
        "random-coefficient": gen_random_coefficient,
        "normal-means": gen_normal_means,
        "ame": gen_ame,
    }
    if spec.family == "logit-panel":
        return gen_logit_panel(spec)[1]
    return gen[spec.family](spec)


# -- conditional expansions ------------------------------------------------------
# Each sampled row is replaced by one copy per value of a binary variable, with
# that value's conditional probability in a ``weight`` column. Weighted sample
# means then integrate the binary variable out exactly.

def expand_plm_instrument(spec: DgpSpec, data: Dataset) -> Dataset:
    """Integrate ``Z2`` out given ``X`` in a ``plm`` sample (structural noise kept)."""
    _require(spec, "plm")
    if not spec.exclusion:
        raise BadSpec("expansion needs the excluded-instrument design")
    d = spec.dim_x
    x = np.column_stack([data[f"x{j + 1}"] for j in range(d)])
    xb, m0, eta = _plm_parts(x, d)
    u = data["y2"] - m0 - spec.pi * data["z2"]
    eps = data["y1"] - spec.theta0[0] * data["y2"] - eta
    prob = norm.cdf(xb)
    cols = {name: np.concatenate([data[name], data[name]]) for name in data.names}
    z = np.concatenate([np.zeros(data.n), np.ones(data.n)])
    y2 = np.concatenate([m0, m0]) + spec.pi * z + np.concatenate([u, u])
    cols.update(z2=z, y2=y2, y1=spec.theta0[0] * y2 + np.concatenate([eta + eps, eta + eps]),
                weight=np.concatenate([1.0 - prob, prob]))
    return Dataset(cols, data.roles)


def expand_hte_treatment(spec: DgpSpec, data: Dataset) -> Dataset:
    """Integrate ``(Y2, e)`` out given ``W`` in an ``hte`` sample.

    ``Y1`` in each copy is ``E[Y1 | Y2, W]``, which uses the truncated-normal
    mean of the first-stage error.
    """
    _require(spec, "hte")
    d = _hte_dims(spec)
    eta3 = np.asarray(spec.eta3)
    xc = data.x - eta3
    index = spec.pi * (data["z2"] - 0.5) + xc @ _pad(HTE_KAPPA, d)
    p = norm.cdf(index)
    dens = norm.pdf(index)
    v1 = np.where(p > 0, dens / np.maximum(p, 1e-300), 0.0)            # E[v | v > -index]
    v0 = np.where(p < 1, -dens / np.maximum(1.0 - p, 1e-300), 0.0)     # E[v | v < -index]
    base = spec.eta1 + xc @ np.asarray(spec.eta2)
    inter = xc @ np.asarray(spec.eta4)
    s = spec.noise[0] * spec.rho
    y1_0 = base + s * v0
    y1_1 = spec.theta0[0] + base + inter + s * v1
    cols = {name: np.concatenate([data[name], data[name]]) for name in data.names}
    cols.update(y2=np.concatenate([np.zeros(data.n), np.ones(data.n)]),
                y1=np.concatenate([y1_0, y1_1]),
                weight=np.concatenate([1.0 - p, p]))
    return Dataset(cols, data.roles)
