"""SMLMC and AMLMC estimators.

A sample of the level-l telescoping difference either solves on two
consecutive uniform meshes (SMLMC) or walks the precomputed adaptive
hierarchy until a sample-dependent, goal-oriented acceptance test passes
for the coarse and fine bias tolerances (AMLMC).  Sample counts follow the
usual variance/work optimization under a bias/statistical splitting of the
target tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dfield

import numpy as np

from . import rng
from .field import draw_sample
from .fem import assemble_system, assemble_primal_rhs, assemble_dual_rhs, evaluate_qoi
from .solver import pcg, solve_primal_dual
from .density import compute_density_field
from .reference import REFERENCE_RTOL, reference_iterations, pattern_nnz


class HierarchyExhausted(RuntimeError):
    pass


@dataclass
class EstimatorConfig:
    tol: float
    scheme: str = "amlmc"            # amlmc | smlmc
    theta: float = 0.5
    c_xi: float = 1.96
    seed: int = 0
    n_pilot: int = 32
    n_warmup: int = 20
    solver_mode: str = "iterative"   # iterative | reference
    fast_path: str = "auto"          # auto | off
    max_level: int = 12
    keep_samples: int = 0

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise ValueError("theta must lie in (0, 1)")
        if self.c_xi <= 0 or self.tol <= 0:
            raise ValueError("tol and c_xi must be positive")
        if self.scheme not in ("amlmc", "smlmc"):
            raise ValueError("scheme must be 'amlmc' or 'smlmc'")


class LevelAccumulator:
    """Streaming first/second moments, work, and mesh-pair bookkeeping."""

    def __init__(self, level, keep=0):
        self.level = level
        self.count = 0
        self.sum = 0.0
        self.sumsq = 0.0
        self.work = 0.0
        self.pair_counts = {}
        self.zero_count = 0
        self.keep = keep
        self.kept = []

    def add_batch(self, dq, work, k_coarse=None, k_fine=None):
        dq = np.asarray(dq, dtype=float)
        self.count += len(dq)
        self.sum += float(dq.sum())
        self.sumsq += float((dq * dq).sum())
        self.work += float(np.sum(work))
        if k_fine is not None:
            kc = np.asarray(k_coarse)
            kf = np.asarray(k_fine)
            self.zero_count += int(np.count_nonzero((kc == kf) & (kc >= 0)))
            pairs, counts = np.unique(np.stack([kc, kf]), axis=1, return_counts=True)
            for (a, b), c in zip(pairs.T, counts):
                key = (int(a), int(b))
                self.pair_counts[key] = self.pair_counts.get(key, 0) + int(c)
        if self.keep and len(self.kept) < self.keep:
            self.kept.extend(dq[: self.keep - len(self.kept)].tolist())

    @property
    def mean(self):
        return self.sum / self.count if self.count else 0.0

    @property
    def var(self):
        if self.count < 2:
            return 0.0
        m = self.mean
        return max((self.sumsq - self.count * m * m) / (self.count - 1), 0.0)

    @property
    def work_mean(self):
        return self.work / self.count if self.count else 0.0


@dataclass
class LevelStats:
    level: int
    count: int
    mean: float
    var: float
    work_mean: float
    ci95: float
    pair_counts: dict
    zero_fraction: float

    @staticmethod
    def from_accumulator(acc):
        ci = 1.96 * math.sqrt(acc.var / acc.count) if acc.count >= 2 else float("inf")
        zf = acc.zero_count / acc.count if acc.count else 0.0
        return LevelStats(level=acc.level, count=acc.count, mean=acc.mean, var=acc.var,
                          work_mean=acc.work_mean, ci95=ci,
                          pair_counts=dict(acc.pair_counts), zero_fraction=zf)


def level_stats(accumulators):
    """Per-level (E, V, W, CI) arrays; needs at least two samples per level."""
    for acc in accumulators:
        if acc.count < 2:
            raise ValueError(f"level {acc.level} has fewer than 2 samples")
    e = np.array([abs(a.mean) for a in accumulators])
    v = np.array([a.var for a in accumulators])
    w = np.array([a.work_mean for a in accumulators])
    ci = np.array([1.96 * math.sqrt(a.var / a.count) for a in accumulators])
    return e, v, w, ci


def optimal_counts(v, w, tol, theta=0.5, c_xi=1.96):
    """Work-optimal sample counts for the statistical constraint (ceil, >= 1)."""
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    if np.any(w <= 0):
        raise ValueError("per-sample work must be positive")
    if np.any(v < 0):
        raise ValueError("variances must be nonnegative")
    total = float(np.sum(np.sqrt(v * w)))
    m = (c_xi / (theta * tol)) ** 2 * np.sqrt(np.divide(v, w)) * total
    return np.maximum(np.ceil(m), 1.0).astype(np.int64)


# -- per-sample generation ---------------------------------------------------

@dataclass
class SampleOutcome:
    q_fine: float
    q_coarse: float
    k_fine: int
    k_coarse: int
    work: float

    @property
    def dq(self):
        return self.q_fine - self.q_coarse


@dataclass
class PilotResult:
    r_hat: float
    y_samples: np.ndarray        # integral of |rho_bar|^(1/2) per sample
    l1_samples: np.ndarray       # integral of |rho_bar| per sample
    rho_samples: np.ndarray      # (n, cells of H0) bounded densities
    mesh: object
    work: float
    warned_single: bool = False


def _reference_pair(system, b_p, b_d):
    """Reference solve of both problems; work is charged at the calibrated
    per-mesh iteration count, not the realization's own."""
    u, _ = pcg(system.matrix, b_p, rtol=REFERENCE_RTOL)
    phi, _ = pcg(system.matrix, b_d, rtol=REFERENCE_RTOL)
    it_p, it_d = reference_iterations(system.mesh)
    return u, phi, it_p + it_d


def _sample_work(problem, mesh, nnz, iterations, with_density=True):
    w = problem.work.assembly(mesh.n_cells, problem.field_terms())
    w += problem.work.solve(iterations, nnz)
    if with_density:
        w += problem.work.density(mesh.n_cells)
    return w


def pilot_R(hierarchy, problem, n_pilot, seed):
    """Mean of the scaling-factor numerator over coarse-mesh field samples."""
    if n_pilot < 1:
        raise ValueError("n_pilot must be at least 1")
    mesh = hierarchy.mesh(0)
    tol0 = hierarchy.tol_of(0)
    key = rng.stream_key(seed, "pilot")
    ys, l1s, rhos = [], [], []
    work = 0.0
    for n in range(n_pilot):
        field = draw_sample(key, n, problem.field_model)
        system = assemble_system(mesh, field)
        b_p = system.condense(assemble_primal_rhs(mesh))
        b_d = system.condense(assemble_dual_rhs(mesh))
        u, phi, iters = _reference_pair(system, b_p, b_d)
        dens = compute_density_field(mesh, field, system.expand(u), system.expand(phi), tol0)
        ys.append(dens.scaling_numerator)
        l1s.append(dens.norm_l1)
        rhos.append(dens.rho_bar)
        work += _sample_work(problem, mesh, pattern_nnz(mesh), iters)
    return PilotResult(r_hat=float(np.mean(ys)), y_samples=np.asarray(ys),
                       l1_samples=np.asarray(l1s), rho_samples=np.asarray(rhos),
                       mesh=mesh, work=work, warned_single=(n_pilot == 1))


def amlmc_sample(level, problem, cfg, hierarchy, r_hat, field, sample_name=""):
    """Walk the hierarchy until the coarse/fine acceptance tests pass.

    Mesh k is accepted for bias tolerance t once |e_est| < K_k(omega) * t
    with the stochastic scaling K_k = (integral of |rho_bar_k|^(1/2)) / R.
    """
    tol_fine = problem.level_tol(level)
    tol_coarse = problem.level_tol(level - 1) if level > 0 else None
    q_coarse = 0.0
    k_coarse = -1
    coarse_pending = level > 0
    work = 0.0
    k_prev_scale = None
    k = 0
    while True:
        try:
            mesh = hierarchy.mesh(k)
        except IndexError as exc:
            raise HierarchyExhausted(
                f"sample {sample_name or '?'} at level {level} needs auxiliary mesh {k}: {exc}"
            ) from exc
        system = assemble_system(mesh, field)
        b_p = system.condense(assemble_primal_rhs(mesh))
        b_d = system.condense(assemble_dual_rhs(mesh))
        if k == 0 or cfg.solver_mode == "reference":
            u_free, phi_free, iters = _reference_pair(system, b_p, b_d)
        else:
            tol_iter = 0.1 * k_prev_scale * tol_fine
            report = solve_primal_dual(system, b_p, system, b_d, tol_iter=tol_iter)
            u_free, phi_free, iters = report.u, report.phi, report.matvecs
        u = system.expand(u_free)
        phi = system.expand(phi_free)
        dens = compute_density_field(mesh, field, u, phi, hierarchy.tol_of(k))
        work += _sample_work(problem, mesh, pattern_nnz(mesh), iters)
        scale = dens.scaling_numerator / r_hat
        k_prev_scale = scale
        accept = abs(dens.e_est)
        if coarse_pending and accept < scale * tol_coarse:
            q_coarse = evaluate_qoi(mesh, u)
            k_coarse = k
            coarse_pending = False
        if accept < scale * tol_fine:
            q_fine = evaluate_qoi(mesh, u)
            return SampleOutcome(q_fine=q_fine, q_coarse=q_coarse,
                                 k_fine=k, k_coarse=k_coarse, work=work)
        k += 1


def smlmc_sample(level, problem, field):
    """Reference-accuracy solves on the uniform meshes of two levels."""
    work = 0.0

    def solve_on(mesh):
        nonlocal work
        system = assemble_system(mesh, field)
        b_p = system.condense(assemble_primal_rhs(mesh))
        u, _ = pcg(system.matrix, b_p, rtol=REFERENCE_RTOL)
        it_p, _ = reference_iterations(mesh)
        work += _sample_work(problem, mesh, pattern_nnz(mesh), it_p, with_density=False)
        return evaluate_qoi(mesh, system.expand(u))

    q_fine = solve_on(problem.smlmc_mesh(level))
    q_coarse = solve_on(problem.smlmc_mesh(level - 1)) if level > 0 else 0.0
    return SampleOutcome(q_fine=q_fine, q_coarse=q_coarse,
                         k_fine=level, k_coarse=level - 1, work=work)


# -- estimator ---------------------------------------------------------------

@dataclass
class MLMCResult:
    estimate: float
    levels: list
    total_work: float
    stat_error: float
    bias_bound: float
    tol_sequence: list
    r_hat: float
    config: EstimatorConfig

    @property
    def counts(self):
        return [lv.count for lv in self.levels]


class GenericEngine:
    """Per-sample loop; works for every field model and solver mode."""

    def __init__(self, problem, cfg, hierarchy, r_hat):
        self.problem = problem
        self.cfg = cfg
        self.hierarchy = hierarchy
        self.r_hat = r_hat

    def run(self, level, lo, hi, acc):
        cfg = self.cfg
        key = rng.stream_key(cfg.seed, cfg.scheme, level)
        dq, wk, kc, kf = [], [], [], []
        for n in range(lo, hi):
            field = draw_sample(key, n, self.problem.field_model)
            if cfg.scheme == "amlmc":
                out = amlmc_sample(level, self.problem, cfg, self.hierarchy,
                                   self.r_hat, field,
                                   sample_name=f"{cfg.scheme}/{level}/{n}")
            else:
                out = smlmc_sample(level, self.problem, field)
            dq.append(out.dq)
            wk.append(out.work)
            kc.append(out.k_coarse)
            kf.append(out.k_fine)
        acc.add_batch(np.asarray(dq), np.asarray(wk), np.asarray(kc), np.asarray(kf))


def _make_engine(problem, cfg, hierarchy, r_hat):
    if cfg.fast_path != "off" and cfg.solver_mode == "reference":
        from .fastpath import BatchedEngine
        return BatchedEngine(problem, cfg, hierarchy, r_hat)
    return GenericEngine(problem, cfg, hierarchy, r_hat)


def _amlmc_num_levels(problem, cfg):
    bias_budget = (1.0 - cfg.theta) * cfg.tol
    ell = 0
    while problem.level_tol(ell) > bias_budget:
        ell += 1
        if ell > cfg.max_level:
            raise ValueError("tolerance requires more levels than cfg.max_level")
    return ell


def _smlmc_bias(means):
    """Extrapolated remaining bias from the two finest difference means.

    Level 0 carries the quantity itself rather than a telescoping
    difference, so a ratio is meaningful only from level 2 on.
    """
    if len(means) < 3:
        return float("inf")
    e_prev, e_last = abs(means[-2]), abs(means[-1])
    if e_last == 0.0:
        return 0.0
    ratio = e_last / max(e_prev, 1e-300)
    ratio = min(max(ratio, 0.05), 0.9)
    return e_last * ratio / (1.0 - ratio)


def run_estimator(cfg, problem):
    """Full MLMC run: pilot, warm-up, one allocation pass, final estimate."""
    total_work = 0.0
    r_hat = float("nan")
    hierarchy = None
    if cfg.scheme == "amlmc":
        hierarchy = problem.hierarchy()
        pilot = pilot_R(hierarchy, problem, cfg.n_pilot, cfg.seed)
        r_hat = pilot.r_hat
        total_work += pilot.work
    engine = _make_engine(problem, cfg, hierarchy, r_hat)

    accs = []

    def warm_level(level):
        acc = LevelAccumulator(level, keep=cfg.keep_samples)
        engine.run(level, 0, cfg.n_warmup, acc)
        accs.append(acc)

    if cfg.scheme == "amlmc":
        num_levels = _amlmc_num_levels(problem, cfg)
        for ell in range(num_levels + 1):
            warm_level(ell)
        bias_bound = problem.level_tol(num_levels)
    else:
        warm_level(0)
        warm_level(1)
        while True:
            bias_bound = _smlmc_bias([a.mean for a in accs])
            if bias_bound <= (1.0 - cfg.theta) * cfg.tol:
                break
            if len(accs) > cfg.max_level:
                raise ValueError("SMLMC bias extrapolation exceeded cfg.max_level levels")
            warm_level(len(accs))

    e, v, w, _ = level_stats(accs)
    if not np.all(np.isfinite(v)):
        raise RuntimeError("warm-up produced non-finite variance estimates")
    counts = optimal_counts(v, w, cfg.tol, cfg.theta, cfg.c_xi)
    for acc, m in zip(accs, counts):
        if m > acc.count:
            engine.run(acc.level, acc.count, int(m), acc)

    estimate = float(sum(a.mean for a in accs))
    stat_error = float(sum(a.var / a.count for a in accs))
    total_work += float(sum(a.work for a in accs))
    return MLMCResult(estimate=estimate,
                      levels=[LevelStats.from_accumulator(a) for a in accs],
                      total_work=total_work, stat_error=stat_error,
                      bias_bound=float(bias_bound),
                      tol_sequence=[problem.level_tol(a.level) for a in accs],
                      r_hat=r_hat, config=cfg)


def level_rate_study(problem, scheme, levels, n_samples, seed,
                     solver_mode="iterative", crn=True):
    """Fixed-size per-level sampling for rate fits.

    With ``crn`` the same coefficient draws are reused on every level
    (common random numbers), which sharpens ratio estimates without
    biasing the per-level means.
    """
    cfg = EstimatorConfig(tol=1.0, scheme=scheme, seed=seed, solver_mode=solver_mode)
    hierarchy = None
    r_hat = float("nan")
    if scheme == "amlmc":
        hierarchy = problem.hierarchy()
        pilot = pilot_R(hierarchy, problem, max(cfg.n_pilot, 32), seed)
        r_hat = pilot.r_hat
    out = []
    memo = {}

    def smlmc_q(level, n, field):
        # with common random numbers consecutive levels share mesh solves;
        # the recorded work still charges every solve of the sample
        if (level, n) not in memo:
            mesh = problem.smlmc_mesh(level)
            system = assemble_system(mesh, field)
            b_p = system.condense(assemble_primal_rhs(mesh))
            u, _ = pcg(system.matrix, b_p, rtol=REFERENCE_RTOL)
            it_p, _ = reference_iterations(mesh)
            w = _sample_work(problem, mesh, pattern_nnz(mesh), it_p, with_density=False)
            memo[(level, n)] = (evaluate_qoi(mesh, system.expand(u)), w)
        return memo[(level, n)]

    for ell in levels:
        key = rng.stream_key(seed, "study" if crn else f"study{ell}")
        dq = np.empty(n_samples)
        wk = np.empty(n_samples)
        kc = np.empty(n_samples, dtype=int)
        kf = np.empty(n_samples, dtype=int)
        for n in range(n_samples):
            field = draw_sample(key, n, problem.field_model)
            if scheme == "amlmc":
                s = amlmc_sample(ell, problem, cfg, hierarchy, r_hat, field,
                                 sample_name=f"study/{ell}/{n}")
            elif crn:
                q_f, w_f = smlmc_q(ell, n, field)
                q_c, w_c = smlmc_q(ell - 1, n, field) if ell > 0 else (0.0, 0.0)
                s = SampleOutcome(q_fine=q_f, q_coarse=q_c, k_fine=ell,
                                  k_coarse=ell - 1, work=w_f + w_c)
            else:
                s = smlmc_sample(ell, problem, field)
            dq[n], wk[n], kc[n], kf[n] = s.dq, s.work, s.k_coarse, s.k_fine
        out.append({"level": ell, "dq": dq, "work": wk, "k_coarse": kc, "k_fine": kf})
        memo = {k: v for k, v in memo.items() if k[0] >= ell}
    return out
