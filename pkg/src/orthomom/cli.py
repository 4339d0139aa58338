"""Command-line entry point: ``orthomom <subcommand> [options]``.

Every subcommand writes one JSON document (to ``--out`` or stdout) carrying a
``schema_version``. Exit status: 0 success, 1 usage error, 2 data error,
3 numerical degeneracy; errors are reported as JSON on stderr.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import diagnostics as dg
from . import funcdiff as fd
from . import hte as hte_mod
from . import mc as mc_mod
from . import plm as plm_mod
from .dataset import (DgpSpec, expand_plm_instrument, gen_logit_panel, hte_oracle, hte_spec,
                      load_csv, load_roles, plm_instrument_propensity, plm_oracle, save_csv, simulate)
from .errors import BadSpec, OrthomomError
from .learners import LearnerSpec

SCHEMA_VERSION = "1"
ORACLE_COLUMNS = {"r1": "r1_true", "r2": "r2_true", "mu": "mu_true", "p": "p_true"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _emit(doc: dict, out: str | None):
    text = json.dumps(_clean({"schema_version": SCHEMA_VERSION, **doc}), sort_keys=True, indent=2) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise BadSpec(f"{path}: invalid JSON ({exc})") from None


def _learner(path, default="least-squares"):
    return LearnerSpec.from_dict(_read_json(path)) if path else LearnerSpec(default)


def _infer_roles(path):
    with open(path, encoding="utf-8") as fh:
        header = [h.strip() for h in fh.readline().split(",")]
    oracle = set(ORACLE_COLUMNS.values()) | {"weight"}
    roles = {}
    for key in ("y1", "y2"):
        if key in header:
            roles[key] = key
    roles["z2"] = [h for h in header if h.startswith("z") and h not in oracle]
    roles["x"] = [h for h in header if h not in roles["z2"] and h not in ("y1", "y2") and h not in oracle]
    return roles


def _load(args):
    roles = _read_json(args.roles) if args.roles else _infer_roles(args.data)
    return load_csv(args.data, roles), roles


# -- simulate -------------------------------------------------------------------

def _dgp_from_args(args) -> DgpSpec:
    overrides = _read_json(args.config) if args.config else {}
    overrides = dict(overrides)
    overrides.pop("family", None)
    for flag, key in (("theta0", "theta0"), ("pi", "pi"), ("rho", "rho"), ("dim_x", "dim_x")):
        val = getattr(args, flag)
        if val is not None:
            overrides[key] = val
    if args.no_exclusion:
        overrides["exclusion"] = False
    if args.family == "hte":
        d_x = int(overrides.pop("dim_x", 10))
        l_value = float(overrides.pop("l_value", 0.0))
        return hte_spec(args.n, d_x=d_x, seed=args.seed, l_value=l_value, **overrides)
    if args.family == "logit-panel":
        overrides.setdefault("alpha_grid", (-1.0, 0.0, 1.0))
        overrides.setdefault("alpha_weights", (0.3, 0.4, 0.3))
    if args.family == "normal-means":
        overrides.setdefault("alpha_grid", (-1.0, 1.0))
    return DgpSpec(args.family, args.n, seed=args.seed, **overrides)


def cmd_simulate(args):
    spec = _dgp_from_args(args)
    roles_doc = None
    if spec.family == "logit-panel":
        model, data = gen_logit_panel(spec)
        if args.model_out:
            Path(args.model_out).write_text(json.dumps(_clean({
                "family": "logit-panel-T2", "alpha_grid": model.alpha, "weights": model.weights,
                "cells": model.cells, "cell_probs": model.cell_probs}), sort_keys=True, indent=2) + "\n")
    else:
        data = simulate(spec)
    if args.with_oracle:
        if spec.family == "plm":
            o = plm_oracle(spec, data)
            data = data.with_columns(r1_true=o["r1"], r2_true=o["r2"], mu_true=o["mu"])
        elif spec.family == "hte":
            data = data.with_columns(p_true=hte_oracle(spec, data)["p"])
        else:
            raise BadSpec("--with-oracle is available for the plm and hte families")
    save_csv(data, args.out)
    roles_doc = {k: v for k, v in data.roles.items()}
    if args.roles_out:
        Path(args.roles_out).write_text(json.dumps(roles_doc, indent=2, sort_keys=True) + "\n")
    _emit({"command": "simulate", "family": spec.family, "n": data.n, "seed": spec.seed,
           "columns": data.names, "roles": roles_doc, "dgp": spec.to_dict(), "out": args.out}, None)


# -- plm ------------------------------------------------------------------------

def cmd_plm(args):
    data, roles = _load(args)
    oracle = None
    if args.oracle:
        oracle = plm_mod.PlmNuisances(*(data[ORACLE_COLUMNS[k]] for k in ("r1", "r2", "mu")))
    learner = _learner(args.learner)
    long_learner = _learner(args.long_learner) if args.long_learner else None
    comp = plm_mod.plm_components(data, learner, long_learner, args.k, args.seed, oracle)
    fit = plm_mod.fit_components(comp, args.estimator)
    test = plm_mod.score_test_theta(data, args.theta_bar, level=args.level, components=comp)
    _emit({"command": "plm", "estimator": fit.estimator, "n": data.n, "theta_hat": fit.theta_hat,
           "se": fit.se, "theta_bar": args.theta_bar, "statistic": test.statistic,
           "p_value": test.p_value, "reject": test.reject, "level": args.level,
           "relevance_denominator": fit.relevance_denominator, "degenerate_flag": fit.degenerate,
           "k": args.k, "seed": args.seed, "oracle": bool(args.oracle)}, args.out)


# -- hte ------------------------------------------------------------------------

def _hte_config(args, data):
    learner_gamma = _learner(args.learner_gamma) if args.learner_gamma else None
    learner_phi = _learner(args.learner_phi) if args.learner_phi else None
    l = args.l
    if l.lstrip("-").isdigit() and l not in data.x_names:
        l = int(l)
    return hte_mod.HteConfig(l=l, null=args.null, level=args.level, learner_p=_learner(args.learner_p),
                             learner_gamma=learner_gamma, learner_phi=learner_phi, k=args.k,
                             k_phi=None if args.k_phi == 0 else args.k_phi, seed=args.seed)


def cmd_hte(args):
    data, _ = _load(args)
    cfg = _hte_config(args, data)
    oracle = {"p": data[ORACLE_COLUMNS["p"]]} if args.oracle else None
    if args.command == "hte-test":
        res = hte_mod.hte_ci(data, cfg, oracle=oracle)
    else:
        res = hte_mod.hte_estimate(data, cfg, oracle)
    _emit({"command": args.command, "l": data.x_names[hte_mod.column_index(data, cfg.l)], "null": cfg.null,
           "level": cfg.level, "statistic": res.statistic, "p_value": res.p_value, "reject": res.reject,
           "ci": list(res.ci) if res.ci is not None else None, "ci_status": res.ci_status,
           "ci_min_p_point": res.ci_min_p_point, "eta4_hat": res.eta4_hat, "se": res.se,
           "degenerate_flag": res.degenerate, "n": data.n, "seed": args.seed}, args.out)


# -- funcdiff -------------------------------------------------------------------

def model_from_json(doc: dict):
    family = doc.get("family")
    if family == "logit-panel-T2":
        return fd.logit_panel_model(doc["alpha_grid"], doc.get("cells", [[0.0, 1.0]]),
                                    weights=doc.get("weights"), cell_probs=doc.get("cell_probs"))
    if family == "custom-table":
        return fd.custom_table_model(doc["table"], doc.get("alpha_grid"), doc.get("weights"),
                                     doc.get("cell_probs"), doc.get("outcomes"))
    raise BadSpec(f"unknown model family {family!r}; use logit-panel-T2, custom-table or normal-means")


def _functional(path, model):
    if not path:
        return None, None
    doc = _read_json(path)
    r = doc.get("r", "alpha")
    if isinstance(r, str):
        if r != "alpha":
            raise BadSpec("functional 'r' must be a list or the string 'alpha'")
        r = model.alpha
    r1 = doc.get("r1")
    return np.asarray(r, dtype=float), None if r1 is None else np.atleast_1d(np.asarray(r1, dtype=float))


def _normal_means(doc, args):
    z = doc.get("z_grid")
    grid = None if z is None else np.linspace(z["start"], z["stop"], int(z["num"]))
    theta = float(np.atleast_1d(args.theta)[0])
    mv = fd.normal_means_moment(doc["support"], theta, grid)
    _emit({"command": "funcdiff", "mode": "nf", "family": "normal-means", "theta": theta,
           "moments": [{"kind": mv.kind, "g": mv.g[0], "orthogonality_residual": mv.residual}]}, args.out)


def cmd_funcdiff(args):
    doc = _read_json(args.model)
    if doc.get("family") == "normal-means":
        if args.mode != "nf":
            raise BadSpec("the normal-means family supports --mode nf only")
        return _normal_means(doc, args)
    model = model_from_json(doc)
    theta = np.asarray(args.theta, dtype=float)
    r, r1 = _functional(args.functional, model)
    out = {"command": "funcdiff", "mode": args.mode, "family": model.name, "theta": theta}
    if args.mode == "nf":
        cells = [args.cell] if args.cell is not None else range(model.n_cells)
        moms = [m for c in cells for m in fd.nf_moments(model, theta, c)]
        out["moments"] = [{"kind": m.kind, "g": m.g, "residual": m.residual} for m in moms]
        out["dimension"] = len(moms)
    else:
        if r is None:
            raise BadSpec(f"--mode {args.mode} needs --functional")
        if args.mode == "partial":
            m = fd.solve_partial_moment(model, theta, r)
        elif args.mode == "fully":
            m = fd.fully_robust_builder(model, r)(theta)
        else:
            res = fd.general_algorithm(model, theta, np.zeros(model.p) if r1 is None else r1, r)
            m = res.moment
            out["step3_residual"] = res.step3_residual
            out["score_condition"] = res.score_condition
        c_hat, resid, _ = fd.proportionality(model, theta, m, r)
        out["moments"] = [{"kind": m.kind, "g": m.g, "psi": m.psi, "C": c_hat,
                           "proportionality_residual": resid, "solve_residual": m.residual}]
        if args.mode in ("fully", "general"):
            out["theta_derivative"] = fd.moment_theta_derivative(
                model, (lambda t: fd.fully_robust_builder(model, r)(t)) if args.mode == "fully"
                else (lambda t: fd.general_algorithm(model, t, np.zeros(model.p) if r1 is None else r1, r).moment),
                theta)
    _emit(out, args.out)


# -- verify ---------------------------------------------------------------------

def _verify_plm(args):
    spec = DgpSpec("plm", args.n, seed=args.seed)
    data = expand_plm_instrument(spec, simulate(spec))
    w = data["weight"]
    o = plm_oracle(spec, data)
    theta = spec.theta0[0]
    bumps = [b(data.x) for b in dg.random_bumps(data.x.shape[1], args.paths, args.seed)]
    lr = dg.plm_lr_moment(o)
    plug = dg.plm_plugin_moment(o["eta"])
    g0 = lr(data, theta, 0.0)
    sd = math.sqrt(float(np.dot(w, g0**2) / w.sum()))
    paths = [dg.PerturbationPath("additive-nuisance", b, args.h) for b in bumps]
    tols = [1e-3 * sd * math.sqrt(float(np.dot(w, b * b) / w.sum())) for b in bumps]
    rep_lr = dg.orthogonality_report(lr, data, paths, tols, theta=theta, weights=w)
    rep_plug = dg.orthogonality_report(plug, data, paths, tols, theta=theta, weights=w)
    prop = plm_instrument_propensity(spec, data)
    analytic = [-float(np.dot(w, b * prop) / w.sum()) for b in bumps]
    return {"lr": rep_lr.to_dict(), "plug_in": rep_plug.to_dict(), "plug_in_analytic": analytic}


def _verify_funcdiff(args):
    if args.model:
        model = model_from_json(_read_json(args.model))
    else:
        model = fd.logit_panel_model([-1.0, 0.0, 1.0], [[0.0, 1.0]], weights=[0.3, 0.4, 0.3])
    theta = np.asarray(args.theta if args.theta is not None else [0.5], dtype=float)
    dirs = dg.random_mixture_directions(model, args.paths, args.seed)
    paths = [dg.PerturbationPath("multiplicative-density", b, args.h) for b in dirs]
    out = {"nf": []}
    for m in fd.nf_moments_all(model, theta):
        out["nf"].append(dg.orthogonality_report(m, model, paths, 1e-10, theta=theta).to_dict())
    return out


def cmd_verify(args):
    if args.target == "plm":
        doc = _verify_plm(args)
    elif args.target == "hte":
        reps = dg.hte_perturbation_report(hte_spec(args.n, seed=args.seed, l_value=0.5),
                                          count=args.paths, seed=args.seed, h=args.h)
        doc = {k: v.to_dict() for k, v in reps.items()}
    else:
        doc = _verify_funcdiff(args)
    _emit({"command": "verify", "target": args.target, "seed": args.seed, "paths": args.paths, **doc}, args.out)


# -- mc -------------------------------------------------------------------------

def cmd_mc(args):
    doc = _read_json(args.config)
    if args.seed is not None:
        doc["master_seed"] = args.seed
    if "master_seed" not in doc:
        raise UsageError("mc needs a master_seed in the config or --seed")
    config = mc_mod.McConfig.from_dict(doc)
    threads = mc_mod.resolve_threads(args.threads)
    rep = mc_mod.run(config, threads)
    Path(args.out).write_text(mc_mod.report(rep, "json", include_timing=args.timing), encoding="utf-8")
    if args.records:
        Path(args.records).write_text(mc_mod.report(rep, "csv"), encoding="utf-8")
    _emit({"command": "mc", "out": args.out, "records": args.records, "summary": rep.summary}, None)


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="orthomom", description="Orthogonal moments: estimation, inference and diagnostics.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", help="draw a synthetic dataset")
    s.add_argument("--family", required=True, choices=["plm", "hte", "random-coefficient", "logit-panel",
                                                       "normal-means", "ame"])
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="JSON object of design fields to override")
    s.add_argument("--theta0", type=float, nargs="+")
    s.add_argument("--pi", type=float)
    s.add_argument("--rho", type=float)
    s.add_argument("--dim-x", dest="dim_x", type=int)
    s.add_argument("--no-exclusion", action="store_true", help="plm: also use the instrument as a control")
    s.add_argument("--with-oracle", action="store_true", help="append true nuisance columns")
    s.add_argument("--roles-out")
    s.add_argument("--model-out", help="logit-panel: write the model JSON")
    s.set_defaults(func=cmd_simulate)

    def data_args(q):
        q.add_argument("--data", required=True)
        q.add_argument("--roles")
        q.add_argument("--k", type=int, default=5)
        q.add_argument("--seed", type=int, required=True)
        q.add_argument("--level", type=float, default=0.05)
        q.add_argument("--oracle", action="store_true", help="use the *_true columns as nuisances")
        q.add_argument("--out")

    s = sub.add_parser("plm", help="orthogonal IV estimate and score test in the partly linear model")
    data_args(s)
    s.add_argument("--learner")
    s.add_argument("--long-learner", dest="long_learner")
    s.add_argument("--estimator", default="lr-2sls", choices=list(plm_mod.ESTIMATORS))
    s.add_argument("--theta-bar", dest="theta_bar", type=float, default=0.0)
    s.set_defaults(func=cmd_plm)

    for name in ("hte-test", "hte-estimate"):
        s = sub.add_parser(name, help="heterogeneous-effect " + name.split("-")[1])
        data_args(s)
        s.add_argument("--l", required=True, help="control column name (or 0-based index)")
        s.add_argument("--null", type=float, default=0.0)
        s.add_argument("--learner-p", dest="learner_p")
        s.add_argument("--learner-gamma", dest="learner_gamma")
        s.add_argument("--learner-phi", dest="learner_phi")
        s.add_argument("--k-phi", dest="k_phi", type=int, default=5, help="0 projects in-sample")
        s.set_defaults(func=cmd_hte)

    s = sub.add_parser("funcdiff", help="moments for a discrete mixture model")
    s.add_argument("--model", required=True)
    s.add_argument("--theta", type=float, nargs="+", required=True)
    s.add_argument("--functional")
    s.add_argument("--mode", choices=["nf", "partial", "fully", "general"], default="nf")
    s.add_argument("--cell", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_funcdiff)

    s = sub.add_parser("verify", help="numerical orthogonality checks")
    s.add_argument("--target", required=True, choices=["plm", "hte", "funcdiff"])
    s.add_argument("--paths", type=int, default=20)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--n", type=int, default=20000)
    s.add_argument("--h", type=float, default=1e-3)
    s.add_argument("--model")
    s.add_argument("--theta", type=float, nargs="+")
    s.add_argument("--out")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("mc", help="Monte Carlo study")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--records")
    s.add_argument("--threads", type=int, default=0, help="0: use ORTHOMOM_THREADS or 1")
    s.add_argument("--seed", type=int, help="overrides master_seed")
    s.add_argument("--timing", action="store_true", help="add wall-clock metadata")
    s.set_defaults(func=cmd_mc)
    return p


def _fail(code, message, status):
    sys.stderr.write(json.dumps({"error": code, "message": message}, sort_keys=True) + "\n")
    return status


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return _fail("Usage", "no subcommand given", 1)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("no subcommand given")
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        return _fail("Usage", str(exc), 1)
    except OrthomomError as exc:
        return _fail(exc.code, str(exc), 3 if exc.category == "numerical" else 2)
    except FileNotFoundError as exc:
        return _fail("FileNotFound", str(exc), 2)
    except (KeyError, TypeError, ValueError) as exc:
        return _fail("BadSpec", f"{type(exc).__name__}: {exc}", 2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
