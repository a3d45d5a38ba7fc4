"""Experiment driver.

Subcommands: ``hierarchy`` persists an adapted mesh hierarchy, ``convergence``
emits the deterministic error-estimate/norm table over uniform and adaptive
ladders, ``run`` executes the estimator for a tolerance sweep and writes the
per-level/per-sample/work tables, ``report`` evaluates the work models and
complexity constants from a finished run directory.

Configuration precedence: defaults, then command-line flags, then the JSON
config file.  Every output file starts with a comment carrying the resolved
config hash, and equal configs produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from .problems import make_problem
from .field import ConstantField
from .fem import assemble_system, assemble_primal_rhs, assemble_dual_rhs, evaluate_qoi
from .solver import pcg
from .density import compute_density_field
from .adapt import generate_hierarchy, save_hierarchy, load_hierarchy
from .mlmc import EstimatorConfig, run_estimator, pilot_R
from .reference import REFERENCE_RTOL
from . import analysis


@dataclasses.dataclass
class RunConfig:
    command: str = "run"
    example: int = 1
    sigma2: float = 1.0
    scheme: str = "amlmc"
    tols: tuple = (0.125,)
    seed: int = 0
    out: str = ""
    realizations: int = 1
    solver_mode: str = "iterative"
    n_pilot: int = 32
    n_warmup: int = 20
    level_tol0: float | None = None
    level_ratio: float = 0.25
    hier_tol0: float | None = None
    hier_count: int = 8
    uniform_levels: int = 8
    scatter: int = 0
    reference: float | None = None
    keep_samples: int = 0

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["tols"] = list(self.tols)
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        if "tols" in d:
            d["tols"] = tuple(float(t) for t in d["tols"])
        return RunConfig(**d)

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def problem(self):
        return make_problem(self.example, sigma2=self.sigma2,
                            level_tol0=self.level_tol0, level_ratio=self.level_ratio,
                            hier_tol0=self.hier_tol0)


def _writer(path, cfg_hash, header):
    f = open(path, "w", newline="")
    f.write(f"# config {cfg_hash}\n")
    w = csv.writer(f, lineterminator="\n")
    w.writerow(header)
    return f, w


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return x


def cmd_hierarchy(cfg):
    """Generate and persist the auxiliary hierarchy for the configured example."""
    problem = cfg.problem()
    tol0 = problem.hier_tol0
    tols = [tol0 * problem.hier_ratio ** k for k in range(cfg.hier_count)]
    if not tols:
        raise ValueError("empty tolerance list")
    hier = generate_hierarchy(tols, problem.base_mesh(), problem.phase1_field(),
                              problem.adapt_params, max_depth=problem.max_hier_depth)
    os.makedirs(cfg.out, exist_ok=True)
    descriptor = {"problem": problem.descriptor(), "config": cfg.to_dict(),
                  "config_hash": cfg.config_hash()}
    save_hierarchy(hier, cfg.out, field_descriptor=descriptor)
    print(f"hierarchy: {len(hier)} meshes -> {cfg.out}")
    return 0


def _solve_estimate(mesh, field, tol):
    system = assemble_system(mesh, field)
    b_p = system.condense(assemble_primal_rhs(mesh))
    b_d = system.condense(assemble_dual_rhs(mesh))
    u, _ = pcg(system.matrix, b_p, rtol=REFERENCE_RTOL)
    phi, _ = pcg(system.matrix, b_d, rtol=REFERENCE_RTOL)
    return compute_density_field(mesh, field, system.expand(u), system.expand(phi), tol)


def cmd_convergence(cfg):
    """Deterministic |e_est| and density-norm table on both mesh ladders."""
    problem = cfg.problem()
    field = problem.phase1_field()
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "convergence.csv")
    f, w = _writer(path, cfg.config_hash(),
                   ["family", "index", "cells", "dof", "h_s", "e_est", "e_est_abs",
                    "norm_l1", "norm_lhalf"])
    with f:
        for k in range(cfg.uniform_levels):
            mesh = problem.uniform_mesh(k)
            dens = _solve_estimate(mesh, field, 2.0 ** -(k + 5))
            w.writerow(["uniform", k, mesh.n_cells, mesh.n_vertices,
                        _fmt(mesh.smallest_cell_size()), _fmt(dens.e_est),
                        _fmt(dens.e_est_abs), _fmt(dens.norm_l1), _fmt(dens.norm_lhalf)])
        hier = generate_hierarchy([2.0 ** -(k + 5) for k in range(cfg.hier_count)],
                                  problem.base_mesh(), field, problem.adapt_params,
                                  max_depth=problem.max_hier_depth)
        for k, lv in enumerate(hier.levels):
            dens = _solve_estimate(lv.mesh, field, lv.tol)
            w.writerow(["adaptive", k, lv.mesh.n_cells, lv.mesh.n_vertices,
                        _fmt(lv.mesh.smallest_cell_size()), _fmt(dens.e_est),
                        _fmt(dens.e_est_abs), _fmt(dens.norm_l1), _fmt(dens.norm_lhalf)])
    print(f"convergence table -> {path}")
    return 0


def _scatter_rows(problem, result, hier, n_max):
    """Per-sample discretization error against its error estimate."""
    from . import rng as _rng
    from .field import draw_sample
    from .mlmc import amlmc_sample
    rows = []
    cfg_ref = EstimatorConfig(tol=1.0, scheme="amlmc", seed=0, solver_mode="reference")
    pilot = pilot_R(hier, problem, 32, seed=10 ** 6)
    count = 0
    for lv in result.levels:
        key = _rng.stream_key(result.config.seed, "amlmc", lv.level)
        for n in range(min(n_max, lv.count)):
            field = draw_sample(key, n, problem.field_model)
            out = amlmc_sample(lv.level, problem, cfg_ref, hier, pilot.r_hat, field)
            deep = hier.mesh(min(out.k_fine + 3, hier.max_depth - 1))
            system = assemble_system(deep, field)
            b_p = system.condense(assemble_primal_rhs(deep))
            u, _ = pcg(system.matrix, b_p, rtol=REFERENCE_RTOL)
            q_ref = evaluate_qoi(deep, system.expand(u))
            dens = _solve_estimate(hier.mesh(out.k_fine), field, hier.tol_of(out.k_fine))
            rows.append([lv.level, n, out.k_fine, _fmt(abs(out.q_fine - q_ref)),
                         _fmt(abs(dens.e_est))])
            count += 1
    return rows


def cmd_run(cfg):
    """Estimator sweep over the configured tolerances."""
    problem = cfg.problem()
    os.makedirs(cfg.out, exist_ok=True)
    h = cfg.config_hash()
    f_lv, w_lv = _writer(os.path.join(cfg.out, "levels.csv"), h,
                         ["tol", "realization", "level", "level_tol", "count", "mean",
                          "var", "work_mean", "ci95", "zero_fraction"])
    f_wk, w_wk = _writer(os.path.join(cfg.out, "work_vs_tol.csv"), h,
                         ["tol", "realization", "estimate", "total_work",
                          "sqrt_work_tol2", "stat_error", "bias_bound", "error_vs_reference"])
    f_pr, w_pr = _writer(os.path.join(cfg.out, "pairs.csv"), h,
                         ["tol", "realization", "level", "k_coarse", "k_fine", "count"])
    results = []
    with f_lv, f_wk, f_pr:
        for tol in cfg.tols:
            for r in range(cfg.realizations):
                ecfg = EstimatorConfig(tol=tol, scheme=cfg.scheme,
                                       seed=cfg.seed + 7919 * r,
                                       n_pilot=cfg.n_pilot, n_warmup=cfg.n_warmup,
                                       solver_mode=cfg.solver_mode,
                                       keep_samples=cfg.keep_samples)
                res = run_estimator(ecfg, problem)
                results.append(res)
                err = abs(res.estimate - cfg.reference) if cfg.reference is not None else ""
                w_wk.writerow([_fmt(tol), r, _fmt(res.estimate), _fmt(res.total_work),
                               _fmt(float(np.sqrt(res.total_work * tol * tol))),
                               _fmt(res.stat_error), _fmt(res.bias_bound), _fmt(err)])
                for lv, ltol in zip(res.levels, res.tol_sequence):
                    w_lv.writerow([_fmt(tol), r, lv.level, _fmt(ltol), lv.count,
                                   _fmt(lv.mean), _fmt(lv.var), _fmt(lv.work_mean),
                                   _fmt(lv.ci95), _fmt(lv.zero_fraction)])
                    for (kc, kf), cnt in sorted(lv.pair_counts.items()):
                        w_pr.writerow([_fmt(tol), r, lv.level, kc, kf, cnt])
    if cfg.scheme == "amlmc":
        hier = problem.hierarchy()
        pilot = pilot_R(hier, problem, max(cfg.n_pilot, 2), cfg.seed)
        np.savez(os.path.join(cfg.out, "pilot.npz"),
                 y=pilot.y_samples, l1=pilot.l1_samples, rho=pilot.rho_samples,
                 cell_areas=pilot.mesh.h ** 2, r_hat=pilot.r_hat)
        if cfg.scatter > 0:
            f_sc, w_sc = _writer(os.path.join(cfg.out, "scatter.csv"), h,
                                 ["level", "sample", "k_fine", "error", "e_est"])
            with f_sc:
                for row in _scatter_rows(problem, results[-1], hier, cfg.scatter):
                    w_sc.writerow(row)
    with open(os.path.join(cfg.out, "manifest.json"), "w") as f:
        json.dump({"config": cfg.to_dict(), "config_hash": h,
                   "problem": problem.descriptor(),
                   "estimates": [r.estimate for r in results]},
                  f, indent=2, sort_keys=True)
    print(f"run: {len(results)} estimator realizations -> {cfg.out}")
    return 0


def cmd_report(cfg):
    """Work models, complexity constants and the variance table for a run."""
    pilot_path = os.path.join(cfg.out, "pilot.npz")
    if not os.path.exists(pilot_path):
        raise FileNotFoundError(f"{pilot_path} not found; run the estimator first")
    data = np.load(pilot_path)
    stats = analysis.DensityStats(y_samples=data["y"], l1_samples=data["l1"],
                                  rho_samples=np.abs(data["rho"]),
                                  cell_areas=data["cell_areas"],
                                  area=float(np.sum(data["cell_areas"])))
    problem = cfg.problem()
    vark1 = analysis.var_k1(stats)
    report = {"var_k1": vark1, "r_hat": float(data["r_hat"]),
              "work_models": {}, "variance_table": []}
    for tol in cfg.tols:
        report["work_models"][repr(float(tol))] = analysis.work_models(stats, tol)
    # measured-vs-model variances from the levels table
    lv_path = os.path.join(cfg.out, "levels.csv")
    if os.path.exists(lv_path):
        with open(lv_path) as f:
            rows = [r for r in csv.reader(f) if r and not r[0].startswith("#")]
        for r in rows[1:]:
            level, ltol, var = int(r[2]), float(r[3]), float(r[6])
            if level < 1:
                continue
            model = analysis.predicted_level_variance(ltol, problem.level_ratio, vark1)
            report["variance_table"].append(
                {"tol": float(r[0]), "realization": int(r[1]), "level": level,
                 "measured": var, "model": model,
                 "ratio": var / model if model > 0 else float("nan")})
    v0 = None
    if report["variance_table"]:
        with open(lv_path) as f:
            rows = [r for r in csv.reader(f) if r and not r[0].startswith("#")]
        v0s = [float(r[6]) for r in rows[1:] if int(r[2]) == 0]
        v0 = float(np.mean(v0s)) if v0s else None
    if v0 is not None and vark1 > 0:
        const = analysis.complexity_constants(stats, problem.level_ratio,
                                              problem.level_tol0, 0.5, 1.96, v0)
        report["complexity"] = {"k3": const.k3, "k4": const.k4, "k5": const.k5,
                                "k_total": const.k_total, "regime": const.regime}
    out_path = os.path.join(cfg.out, "model_report.json")
    with open(out_path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    print(f"report -> {out_path}")
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="amlmc",
                                 description="goal-adaptive multilevel Monte Carlo driver")
    sub = ap.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--example", type=int, choices=(0, 1, 2), default=None)
    common.add_argument("--sigma2", type=float, default=None)
    common.add_argument("--scheme", choices=("smlmc", "amlmc"), default=None)
    common.add_argument("--tol", type=str, default=None,
                        help="comma-separated tolerance sweep")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", type=str, default=None)
    common.add_argument("--config", type=str, default=None,
                        help="JSON config file; overrides flags")
    common.add_argument("--realizations", type=int, default=None)
    common.add_argument("--solver-mode", choices=("iterative", "reference"), default=None)
    common.add_argument("--n-pilot", type=int, default=None)
    common.add_argument("--n-warmup", type=int, default=None)
    common.add_argument("--level-tol0", type=float, default=None)
    common.add_argument("--hier-tol0", type=float, default=None)
    common.add_argument("--hier-count", type=int, default=None)
    common.add_argument("--uniform-levels", type=int, default=None)
    common.add_argument("--scatter", type=int, default=None)
    common.add_argument("--reference", type=float, default=None)
    for name in ("hierarchy", "run", "convergence", "report"):
        sub.add_parser(name, parents=[common])
    return ap


_FLAG_FIELDS = {
    "example": "example", "sigma2": "sigma2", "scheme": "scheme", "seed": "seed",
    "out": "out", "realizations": "realizations", "solver_mode": "solver_mode",
    "n_pilot": "n_pilot", "n_warmup": "n_warmup", "level_tol0": "level_tol0",
    "hier_tol0": "hier_tol0", "hier_count": "hier_count",
    "uniform_levels": "uniform_levels", "scatter": "scatter", "reference": "reference",
}


def resolve_config(args):
    cfg = RunConfig(command=args.command)
    for attr, field in _FLAG_FIELDS.items():
        val = getattr(args, attr, None)
        if val is not None:
            setattr(cfg, field, val)
    if args.tol is not None:
        cfg.tols = tuple(float(t) for t in args.tol.split(","))
    if args.config is not None:
        with open(args.config) as f:
            overrides = json.load(f)
        for key, val in overrides.items():
            if key == "tols":
                cfg.tols = tuple(float(t) for t in val)
            elif hasattr(cfg, key):
                setattr(cfg, key, val)
            else:
                raise KeyError(f"unknown config key {key!r}")
    if not cfg.out:
        root = os.environ.get("AMLMC_OUT_ROOT", ".")
        cfg.out = os.path.join(root, f"amlmc_{args.command}_{cfg.config_hash()}")
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    cfg = resolve_config(args)
    handlers = {"hierarchy": cmd_hierarchy, "run": cmd_run,
                "convergence": cmd_convergence, "report": cmd_report}
    try:
        return handlers[args.command](cfg)
    except Exception as exc:   # noqa: BLE001 - single diagnostic line, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
