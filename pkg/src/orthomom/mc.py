"""Deterministic Monte Carlo driver.

Replication ``i`` (0-based) of a run with master seed ``s`` uses the seed

    z = (s + (i + 1) * 0x9E3779B97F4A7C15) mod 2**64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) mod 2**64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) mod 2**64
    seed_i = z ^ (z >> 31)

(the SplitMix64 output function) for both the simulated sample and any
cross-fitting inside the pipeline. Records are merged by replication index
and aggregated with exactly rounded sums, so serial and parallel runs agree
bit for bit.

Failed replications (any library error) are recorded with their error code,
excluded from every rate and moment, and counted in ``failures``; all rates
use the number of successful replications as denominator.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.stats import norm

from . import hte as hte_mod
from . import plm as plm_mod
from .dataset import DgpSpec, hte_oracle, plm_oracle, simulate
from .errors import BadSpec, OrthomomError
from .learners import LearnerSpec

MASK = (1 << 64) - 1
PIPELINES = ("plm-test", "plm-estimate", "hte-test", "hte-estimate", "hte-ci", "logit-nf-test")
RECORD_FIELDS = ("rep", "seed", "estimate", "se", "statistic", "p_value", "reject",
                 "ci_lo", "ci_hi", "covered", "error")


def splitmix64(master: int, i: int) -> int:
    z = (int(master) + (i + 1) * 0x9E3779B97F4A7C15) & MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


@dataclass(frozen=True)
class McConfig:
    replications: int
    n: int
    dgp: DgpSpec
    pipeline: str
    options: Mapping = field(default_factory=dict)
    master_seed: int = 0
    level: float = 0.05
    threads: int = 1

    def __post_init__(self):
        if self.replications < 1:
            raise BadSpec("replications must be >= 1")
        if self.pipeline not in PIPELINES:
            raise BadSpec(f"unknown pipeline {self.pipeline!r}; choose from {PIPELINES}")
        if not 0.0 < self.level < 1.0:
            raise BadSpec("level must lie in (0, 1)")
        object.__setattr__(self, "options", dict(self.options))

    @classmethod
    def from_dict(cls, d: Mapping) -> "McConfig":
        d = dict(d)
        known = {"replications", "n", "dgp", "pipeline", "options", "master_seed", "level", "threads"}
        unknown = set(d) - known
        if unknown:
            raise BadSpec(f"unknown mc config fields: {sorted(unknown)}")
        try:
            dgp = d.pop("dgp")
        except KeyError:
            raise BadSpec("mc config needs a 'dgp'") from None
        dgp = dgp if isinstance(dgp, DgpSpec) else DgpSpec.from_dict({"n": d.get("n", 1), **dgp})
        return cls(dgp=dgp, **d)

    def to_dict(self) -> dict:
        return {"replications": self.replications, "n": self.n, "dgp": self.dgp.to_dict(),
                "pipeline": self.pipeline, "options": dict(self.options),
                "master_seed": self.master_seed, "level": self.level}


# -- one replication ---------------------------------------------------------------

def _learner(options, key, default="least-squares"):
    spec = options.get(key)
    if spec is None:
        return LearnerSpec(default)
    return spec if isinstance(spec, LearnerSpec) else LearnerSpec.from_dict(spec)


def _wald(est, se, truth, level):
    z = float(norm.ppf(1.0 - level / 2.0))
    lo, hi = est - z * se, est + z * se
    return lo, hi, (lo <= truth <= hi) if truth is not None else None


def _plm(config, spec, data, seed):
    o = config.options
    oracle = plm_mod.PlmNuisances.from_oracle(plm_oracle(spec, data)) if o.get("oracle") else None
    comp = plm_mod.plm_components(data, _learner(o, "learner"), _learner(o, "long_learner"),
                                  int(o.get("k", 5)), seed, oracle)
    truth = float(spec.theta0[0])
    if config.pipeline == "plm-test":
        theta_bar = float(o.get("theta_bar", truth))
        t = plm_mod.score_test_theta(data, theta_bar, level=config.level, components=comp)
        return {"statistic": t.statistic, "p_value": t.p_value, "reject": t.reject}
    fit = plm_mod.fit_components(comp, o.get("estimator", "lr-2sls"))
    lo, hi, cov = _wald(fit.theta_hat, fit.se, truth, config.level)
    return {"estimate": fit.theta_hat, "se": fit.se, "ci_lo": lo, "ci_hi": hi, "covered": cov}


def _hte(config, spec, data, seed):
    o = config.options
    l = o.get("l", 0)
    cfg = hte_mod.HteConfig(l=l, null=float(o.get("null", 0.0)), level=config.level,
                            learner_p=_learner(o, "learner_p"),
                            learner_gamma=_learner(o, "learner_gamma") if "learner_gamma" in o else None,
                            learner_phi=_learner(o, "learner_phi") if "learner_phi" in o else None,
                            k=int(o.get("k", 5)),
                            k_phi=o.get("k_phi", 5), seed=seed)
    oracle = hte_oracle(spec, data) if o.get("oracle") else None
    truth = float(spec.eta4[hte_mod.column_index(data, l)])
    if config.pipeline == "hte-test":
        r = hte_mod.hte_test(data, cfg, oracle)
        return {"estimate": r.eta4_hat, "se": r.se, "statistic": r.statistic,
                "p_value": r.p_value, "reject": r.reject}
    if config.pipeline == "hte-estimate":
        r = hte_mod.hte_estimate(data, cfg, oracle)
        lo, hi, cov = _wald(r.eta4_hat, r.se, truth, config.level)
        return {"estimate": r.eta4_hat, "se": r.se, "statistic": r.statistic, "p_value": r.p_value,
                "reject": r.reject, "ci_lo": lo, "ci_hi": hi, "covered": cov}
    r = hte_mod.hte_ci(data, cfg, oracle=oracle)
    out = {"estimate": r.eta4_hat, "se": r.se, "statistic": r.statistic, "p_value": r.p_value,
           "reject": r.reject}
    if r.ci is None:
        out.update(ci_lo=None, ci_hi=None, covered=False)
    else:
        out.update(ci_lo=r.ci[0], ci_hi=r.ci[1], covered=r.ci[0] <= truth <= r.ci[1])
    return out


def _logit_nf(config, spec, data, seed):
    """t-test of ``theta = theta_bar`` with the conditional-logit NF moment on each cell."""
    from . import funcdiff as fd
    from .dataset import gen_logit_panel

    o = config.options
    theta_bar = float(o.get("theta_bar", spec.theta0[0]))
    model, _ = gen_logit_panel(spec.with_(n=1))
    cells = np.asarray(spec.x_cells, dtype=float)
    y = np.column_stack([data["y_1"], data["y_2"]]).astype(int)
    outcome = y[:, 0] + 2 * y[:, 1]                     # index into LOGIT_T2_OUTCOMES
    xs = np.column_stack([data["x_1"], data["x_2"]])
    cell = np.argmin(np.abs(xs[:, None, :] - cells[None]).sum(axis=2), axis=1)
    g = np.zeros((model.n_cells, model.M))
    for c, (x1, x2) in enumerate(cells):
        g[c] = (0.0, math.exp(theta_bar * x2), -math.exp(theta_bar * x1), 0.0)
    t = plm_mod.two_sided(plm_mod.moment_t_statistic(g[cell, outcome]), config.level)
    return {"statistic": t.statistic, "p_value": t.p_value, "reject": t.reject}


_RUNNERS = {"plm-test": _plm, "plm-estimate": _plm, "hte-test": _hte, "hte-estimate": _hte,
            "hte-ci": _hte, "logit-nf-test": _logit_nf}


def run_replication(config: McConfig, i: int) -> dict:
    seed = splitmix64(config.master_seed, i)
    rec = {k: None for k in RECORD_FIELDS}
    rec.update(rep=i, seed=seed)
    spec = config.dgp.with_(n=config.n, seed=seed)
    try:
        data = simulate(spec)
        rec.update(_RUNNERS[config.pipeline](config, spec, data, seed & 0x7FFFFFFF))
    except OrthomomError as exc:
        rec["error"] = exc.code
    for key in ("estimate", "se", "statistic", "p_value", "ci_lo", "ci_hi"):
        if rec[key] is not None:
            rec[key] = float(rec[key])
    for key in ("reject", "covered"):
        if rec[key] is not None:
            rec[key] = bool(rec[key])
    return rec


def _chunk(args):
    config, indices = args
    return [run_replication(config, i) for i in indices]


# -- aggregation -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class McReport:
    config: dict
    records: list
    summary: dict
    wall_clock: float = 0.0


def _rate(values):
    k = len(values)
    if k == 0:
        return None, None
    rate = sum(1 for v in values if v) / k
    return rate, math.sqrt(rate * (1.0 - rate) / k)


def truth_of(config: McConfig) -> float | None:
    o = config.options
    if config.pipeline.startswith("plm"):
        return float(config.dgp.theta0[0])
    if config.pipeline.startswith("hte"):
        l = o.get("l", 0)
        if isinstance(l, str):
            l = int(l.lstrip("x")) - 1
        return float(config.dgp.eta4[int(l)])
    return None


def summarize(records: list, truth: float | None) -> dict:
    """Aggregates over successful replications (exactly rounded sums)."""
    ok = [r for r in records if r["error"] is None]
    out = {"replications": len(records), "successes": len(ok), "failures": len(records) - len(ok)}
    rej = [r["reject"] for r in ok if r["reject"] is not None]
    out["rejection_rate"], out["rejection_se"] = _rate(rej)
    cov = [r["covered"] for r in ok if r["covered"] is not None]
    out["coverage"], out["coverage_se"] = _rate(cov)
    est = [r["estimate"] for r in ok if r["estimate"] is not None]
    if est:
        k = len(est)
        mean = math.fsum(est) / k
        out["mean_estimate"] = mean
        out["sd"] = math.sqrt(math.fsum((e - mean) ** 2 for e in est) / (k - 1)) if k > 1 else 0.0
        if truth is not None:
            out["bias"] = mean - truth
            out["rmse"] = math.sqrt(math.fsum((e - truth) ** 2 for e in est) / k)
        else:
            out["bias"] = out["rmse"] = None
    else:
        out.update(mean_estimate=None, sd=None, bias=None, rmse=None)
    errors = {}
    for r in records:
        if r["error"] is not None:
            errors[r["error"]] = errors.get(r["error"], 0) + 1
    out["errors"] = dict(sorted(errors.items()))
    out["truth"] = truth
    return out


def resolve_threads(threads: int | None) -> int:
    if threads is None or threads == 0:
        env = os.environ.get("ORTHOMOM_THREADS")
        threads = int(env) if env else 1
    return max(1, int(threads))


def run(config: McConfig, threads: int | None = None) -> McReport:
    """Run all replications; ``threads > 1`` distributes them over worker processes."""
    threads = resolve_threads(config.threads if threads is None else threads)
    start = time.perf_counter()
    indices = list(range(config.replications))
    if threads == 1 or config.replications == 1:
        records = [run_replication(config, i) for i in indices]
    else:
        chunks = [indices[j::threads] for j in range(threads)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_chunk, [(config, c) for c in chunks if c]))
        records = sorted((r for part in parts for r in part), key=lambda r: r["rep"])
    summary = summarize(records, truth_of(config))
    return McReport(config.to_dict(), records, summary, time.perf_counter() - start)


# -- serialization -------------------------------------------------------------------

SCHEMA_VERSION = "1"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def report(r: McReport, fmt: str = "json", include_records: bool = True, include_timing: bool = False) -> str:
    """Serialise a report. JSON is canonical (sorted keys); CSV holds one row per replication.

    Wall-clock time is only written when ``include_timing`` is set, under
    ``metadata``, so default output is byte-reproducible.
    """
    if fmt == "json":
        doc = {"schema_version": SCHEMA_VERSION, "config": r.config, "summary": r.summary}
        if include_records:
            doc["records"] = r.records
        if include_timing:
            doc["metadata"] = {"wall_clock_seconds": r.wall_clock}
        return json.dumps(_jsonable(doc), sort_keys=True, indent=2, allow_nan=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(RECORD_FIELDS)
        for rec in r.records:
            writer.writerow(["" if rec[k] is None else (repr(rec[k]) if isinstance(rec[k], float) else
                                                        str(int(rec[k])) if isinstance(rec[k], bool) else rec[k])
                             for k in RECORD_FIELDS])
        return buf.getvalue()
    raise BadSpec(f"unknown report format {fmt!r}")


def records_from_csv(text: str) -> list:
    """Inverse of the CSV report (types restored)."""
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for row in rows:
        rec = {}
        for k in RECORD_FIELDS:
            v = row[k]
            if v == "":
                rec[k] = None
            elif k in ("rep", "seed"):
                rec[k] = int(v)
            elif k in ("reject", "covered"):
                rec[k] = v == "1"
            elif k == "error":
                rec[k] = v
            else:
                rec[k] = float(v)
        out.append(rec)
    return out
