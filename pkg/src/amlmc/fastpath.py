"""Batched sample generation for reference-solver runs.

Two exact accelerations of the per-sample path:

* constant coefficients: with Jacobi-CG the iterates for a*A equal those
  for A divided by a, so one unit-coefficient reference solve per mesh
  serves every sample through scalar scalings of Q, e_est and the scaling
  numerator;
* small meshes with spatially varying coefficients: assembly becomes one
  matrix product against a precomputed per-quadrature-point tensor and the
  solves a batched dense factorization; the density pipeline is applied as
  precomputed linear operators.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from . import rng
from .field import ConstantField, FourierField
from .fem import (GRAD_TENSOR, assemble_system, assemble_primal_rhs,
                  assemble_dual_rhs, evaluate_qoi, quad_points)
from .solver import pcg
from .density import _line_segments, compute_density_field, UPPER_BOUND_EXPONENT
from .reference import REFERENCE_RTOL, unit_reference, reference_iterations
from .mlmc import HierarchyExhausted, SampleOutcome

_DENSE_FREE_CAP = 320
_DENSE_BYTES_CAP = 2.5e8


class ConstantBatchSolver:
    """Exact scalings of the unit-coefficient reference solution."""

    def __init__(self, mesh, tol_gen):
        ref = unit_reference(mesh, tol_gen)
        self.q1 = ref["q1"]
        self.e1 = ref.get("e1")
        self.s1 = ref.get("s1")
        self.nnz = ref["nnz"]
        self.iters_pair = ref["iters_p"] + ref["iters_d"]
        self.iters_primal = ref["iters_p"]

    def evaluate(self, a):
        return self.q1 / a, self.e1 / a, self.s1 / np.sqrt(a)

    def evaluate_q(self, a):
        return self.q1 / a


def _quotient_matrix(mesh, axis):
    """Sparse operator: nodal values -> averaged second quotients."""
    vids, starts, lens, coords = _line_segments(mesh, axis)
    n = mesh.n_vertices
    ends = starts + lens - 1
    rows, cols, vals = [], [], []
    interior = np.ones(len(vids), dtype=bool)
    interior[starts] = False
    interior[ends] = False
    for p in np.flatnonzero(interior):
        h1 = coords[p] - coords[p - 1]
        h2 = coords[p + 1] - coords[p]
        rows += [vids[p]] * 3
        cols += [vids[p - 1], vids[p], vids[p + 1]]
        vals += [2.0 / (h1 * (h1 + h2)), -2.0 / (h1 * h2), 2.0 / (h2 * (h1 + h2))]
    Q = sp.csr_matrix((vals, (rows, cols)), shape=(n, n)).tolil()
    long = lens >= 3
    for s, e in zip(starts[long], ends[long]):
        Q[vids[s]] = Q[vids[s + 1]]
        Q[vids[e]] = Q[vids[e - 1]]
    for s, L in zip(starts[~long], lens[~long]):
        for p in range(s, s + L):
            masters = mesh.hanging_masters.get(int(vids[p]))
            if masters:
                Q[vids[p]] = 0.5 * (Q[masters[0]] + Q[masters[1]])
    # 3-point sliding mean along the same lines
    rows, cols, vals = [], [], []
    for s, L in zip(starts, lens):
        for p in range(s, s + L):
            lo, hi = max(p - 1, s), min(p + 1, s + L - 1)
            width = hi - lo + 1
            for t in range(lo, hi + 1):
                rows.append(vids[p])
                cols.append(vids[t])
                vals.append(1.0 / width)
    A = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return A @ Q.tocsr()


class DenseBatchSolver:
    """Batched dense assembly/solve plus linear density pipeline.

    Only built for meshes whose condensed operator is small enough; the
    engine falls back to per-sample solves otherwise.
    """

    def __init__(self, mesh, tol_gen, basis, primal_only=False):
        ref = unit_reference(mesh)
        n_free = ref["system"].n_free
        P = mesh.n_cells * 4
        if n_free > _DENSE_FREE_CAP or 8.0 * P * n_free * n_free > _DENSE_BYTES_CAP:
            raise MemoryError("mesh too large for dense batching")
        self.mesh = mesh
        self.tol_gen = tol_gen
        self.nnz = ref["nnz"]
        self.iters_pair = ref["iters_p"] + ref["iters_d"]
        self.iters_primal = ref["iters_p"]
        T = ref["system"].prolong.toarray()
        self.b_p = ref["b_p"]
        self.b_d = ref["b_d"]
        corners = mesh.corners
        M = np.zeros((P, n_free, n_free))
        for c in range(mesh.n_cells):
            Tc = T[corners[c]]          # 4 x n_free
            for g in range(4):
                M[4 * c + g] = Tc.T @ GRAD_TENSOR[g] @ Tc
        self.M = M.reshape(P, n_free * n_free)
        self.n_free = n_free
        pts = quad_points(mesh).reshape(-1, 2)
        w = basis.ang_freq
        self.trig_q = np.cos(pts @ w.T - (np.pi / 2.0) * basis.is_sin[None, :])
        self.trig_v = np.cos(mesh.xy @ w.T - (np.pi / 2.0) * basis.is_sin[None, :])
        self.amp = basis.amplitude
        if not primal_only:
            self.S1 = (_quotient_matrix(mesh, "x") @ ref["system"].prolong).toarray()
            self.S2 = (_quotient_matrix(mesh, "y") @ ref["system"].prolong).toarray()
        self.h2 = mesh.h ** 2
        self.h4 = mesh.h ** 4
        self.area = float(np.sum(self.h2))
        self.block = max(16, int(2.0e8 / (8.0 * n_free * n_free)))

    def _blocks(self, xi):
        for s in range(0, len(xi), self.block):
            yield xi[s:s + self.block]

    def _solve_block(self, xi, both):
        a_q = np.exp((xi * self.amp) @ self.trig_q.T)
        A = (a_q @ self.M).reshape(-1, self.n_free, self.n_free)
        if both:
            rhs = np.stack([self.b_p, self.b_d], axis=1)
            sol = np.linalg.solve(A, np.broadcast_to(rhs, (len(A),) + rhs.shape))
            return sol[:, :, 0], sol[:, :, 1]
        rhs = np.broadcast_to(self.b_p, (len(A), self.n_free))
        return np.linalg.solve(A, rhs), None

    def evaluate_q(self, xi):
        out = np.empty(len(xi))
        for s, blk in zip(range(0, len(xi), self.block), self._blocks(xi)):
            u, _ = self._solve_block(blk, both=False)
            out[s:s + len(blk)] = u @ self.b_d
        return out

    def evaluate(self, xi):
        q = np.empty(len(xi))
        e = np.empty(len(xi))
        s_num = np.empty(len(xi))
        for s0, blk in zip(range(0, len(xi), self.block), self._blocks(xi)):
            u, phi = self._solve_block(blk, both=True)
            d1u, d2u = u @ self.S1.T, u @ self.S2.T
            d1p, d2p = phi @ self.S1.T, phi @ self.S2.T
            a_v = np.exp((blk * self.amp) @ self.trig_v.T)
            c = self.mesh.corners
            rho = np.zeros((len(u), self.mesh.n_cells))
            for j in range(4):
                v = c[:, j]
                rho += a_v[:, v] * (d1u[:, v] * d1p[:, v] + d2u[:, v] * d2p[:, v])
            rho /= 48.0
            absr = np.abs(rho)
            base = (np.sqrt(absr) @ self.h2) ** 2 / self.area ** 2
            delta = base * np.sqrt(self.tol_gen)
            upper = np.maximum(delta, base * self.tol_gen ** -UPPER_BOUND_EXPONENT)
            sign = np.where(rho < 0, -1.0, 1.0)
            rho_bar = sign * np.clip(absr, delta[:, None], upper[:, None])
            sl = slice(s0, s0 + len(blk))
            q[sl] = u @ self.b_d
            e[sl] = rho_bar @ self.h4
            s_num[sl] = np.sqrt(np.abs(rho_bar)) @ self.h2
        return q, e, s_num


class BatchedEngine:
    """Vectorized estimator sampling; exact peer of the generic engine."""

    def __init__(self, problem, cfg, hierarchy, r_hat):
        self.problem = problem
        self.cfg = cfg
        self.hierarchy = hierarchy
        self.r_hat = r_hat
        self.kind = problem.field_model.kind
        self._amlmc_solvers = {}
        self._smlmc_solvers = {}

    # -- draw representations ------------------------------------------------

    def _draw_block(self, level, lo, hi):
        key = rng.stream_key(self.cfg.seed, self.cfg.scheme, level)
        idx = np.arange(lo, hi, dtype=np.uint64)
        if self.kind == "constant":
            return np.full(hi - lo, self.problem.field_model.value)
        if self.kind == "lognormal":
            z = rng.normals_block(key, idx, 1)[:, 0]
            return np.exp(self.problem.field_model.sigma * z)
        return rng.normals_block(key, idx, self.problem.field_model.basis.n_terms)

    def _field_of(self, draw):
        if self.kind in ("constant", "lognormal"):
            return ConstantField(float(draw), kind=self.kind)
        return FourierField(self.problem.field_model.basis, draw)

    def _chunk(self):
        return (1 << 19) if self.kind in ("constant", "lognormal") else 8192

    # -- solver construction ---------------------------------------------------

    def _solver_for_mesh(self, mesh, tol_gen, primal_only=False):
        if self.kind in ("constant", "lognormal"):
            return ConstantBatchSolver(mesh, tol_gen)
        try:
            return DenseBatchSolver(mesh, tol_gen, self.problem.field_model.basis,
                                    primal_only=primal_only)
        except MemoryError:
            return None

    def _amlmc_solver(self, k):
        if k not in self._amlmc_solvers:
            mesh = self.hierarchy.mesh(k)
            self._amlmc_solvers[k] = self._solver_for_mesh(mesh, self.hierarchy.tol_of(k))
        return self._amlmc_solvers[k]

    def _smlmc_solver(self, level):
        if level not in self._smlmc_solvers:
            mesh = self.problem.smlmc_mesh(level)
            self._smlmc_solvers[level] = self._solver_for_mesh(mesh, None, primal_only=True)
        return self._smlmc_solvers[level]

    # -- sampling --------------------------------------------------------------

    def run(self, level, lo, hi, acc):
        step = self._chunk()
        for start in range(lo, hi, step):
            stop = min(start + step, hi)
            draws = self._draw_block(level, start, stop)
            if self.cfg.scheme == "amlmc":
                dq, wk, kc, kf = self._amlmc_chunk(level, draws, start)
            else:
                dq, wk, kc, kf = self._smlmc_chunk(level, draws)
            acc.add_batch(dq, wk, kc, kf)

    def _work_at(self, mesh, iters, nnz, with_density=True):
        p = self.problem
        w = p.work.assembly(mesh.n_cells, p.field_terms())
        w += p.work.solve(iters, nnz)
        if with_density:
            w += p.work.density(mesh.n_cells)
        return w

    def _smlmc_chunk(self, level, draws):
        b = len(draws)
        wk = np.zeros(b)
        qf, wf = self._smlmc_q(level, draws)
        wk += wf
        qc = np.zeros(b)
        if level > 0:
            qc, wc = self._smlmc_q(level - 1, draws)
            wk += wc
        return qf - qc, wk, np.full(b, level - 1), np.full(b, level)

    def _smlmc_q(self, level, draws):
        solver = self._smlmc_solver(level)
        mesh = self.problem.smlmc_mesh(level)
        if solver is not None:
            q = solver.evaluate_q(draws)
            w = self._work_at(mesh, solver.iters_primal, solver.nnz, with_density=False)
            return q, w
        it_p, _ = reference_iterations(mesh)
        nnz = unit_reference(mesh)["nnz"]
        w = self._work_at(mesh, it_p, nnz, with_density=False)
        q = np.empty(len(draws))
        for i in range(len(draws)):
            field = self._field_of(draws[i])
            system = assemble_system(mesh, field)
            b_p = system.condense(assemble_primal_rhs(mesh))
            u, _ = pcg(system.matrix, b_p, rtol=REFERENCE_RTOL)
            q[i] = evaluate_qoi(mesh, system.expand(u))
        return q, w

    def _amlmc_chunk(self, level, draws, index0):
        b = len(draws)
        tol_f = self.problem.level_tol(level)
        tol_c = self.problem.level_tol(level - 1) if level > 0 else None
        qf = np.zeros(b)
        qc = np.zeros(b)
        kf = np.full(b, -1)
        kc = np.full(b, -1)
        wk = np.zeros(b)
        pending_c = np.full(b, level > 0)
        active = np.ones(b, dtype=bool)
        k = 0
        while active.any():
            try:
                mesh = self.hierarchy.mesh(k)
            except IndexError as exc:
                stuck = np.flatnonzero(active)
                raise HierarchyExhausted(
                    f"{len(stuck)} samples at level {level} (first index "
                    f"{index0 + stuck[0]}) need auxiliary mesh {k}: {exc}") from exc
            solver = self._amlmc_solver(k)
            idx = np.flatnonzero(active)
            if solver is None:
                for i in idx:
                    out = self._finish_single(level, draws[i], k, qc[i], kc[i],
                                              pending_c[i], wk[i],
                                              f"{self.cfg.scheme}/{level}/{index0 + i}")
                    qf[i], qc[i] = out.q_fine, out.q_coarse
                    kf[i], kc[i] = out.k_fine, out.k_coarse
                    wk[i] = out.work
                break
            sub = draws[idx] if draws.ndim == 1 else draws[idx, :]
            q, e, s = solver.evaluate(sub)
            wk[idx] += self._work_at(mesh, solver.iters_pair, solver.nnz)
            scale = s / self.r_hat
            fit = np.abs(e)
            if tol_c is not None:
                take_c = pending_c[idx] & (fit < scale * tol_c)
                if take_c.any():
                    j = idx[take_c]
                    qc[j] = q[take_c]
                    kc[j] = k
                    pending_c[j] = False
            take_f = fit < scale * tol_f
            if take_f.any():
                j = idx[take_f]
                qf[j] = q[take_f]
                kf[j] = k
                active[j] = False
            k += 1
        return qf - qc, wk, kc, kf

    def _finish_single(self, level, draw, k_start, q_coarse, k_coarse,
                       pending, work, name):
        """Continue one walker past the dense-batch size cap, per sample."""
        field = self._field_of(draw)
        tol_f = self.problem.level_tol(level)
        tol_c = self.problem.level_tol(level - 1) if level > 0 else None
        k = k_start
        while True:
            try:
                mesh = self.hierarchy.mesh(k)
            except IndexError as exc:
                raise HierarchyExhausted(
                    f"sample {name} at level {level} needs auxiliary mesh {k}: {exc}") from exc
            system = assemble_system(mesh, field)
            b_p = system.condense(assemble_primal_rhs(mesh))
            b_d = system.condense(assemble_dual_rhs(mesh))
            u, _ = pcg(system.matrix, b_p, rtol=REFERENCE_RTOL)
            phi, _ = pcg(system.matrix, b_d, rtol=REFERENCE_RTOL)
            it_p, it_d = reference_iterations(mesh)
            u_full = system.expand(u)
            dens = compute_density_field(mesh, field, u_full, system.expand(phi),
                                         self.hierarchy.tol_of(k))
            work += self._work_at(mesh, it_p + it_d, unit_reference(mesh)['nnz'])
            scale = dens.scaling_numerator / self.r_hat
            fit = abs(dens.e_est)
            if pending and tol_c is not None and fit < scale * tol_c:
                q_coarse = evaluate_qoi(mesh, u_full)
                k_coarse = k
                pending = False
            if fit < scale * tol_f:
                return SampleOutcome(q_fine=evaluate_qoi(mesh, u_full), q_coarse=q_coarse,
                                     k_fine=k, k_coarse=int(k_coarse), work=work)
            k += 1
