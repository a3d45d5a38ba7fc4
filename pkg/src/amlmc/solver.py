"""Conjugate-gradient solvers with goal-oriented stopping.

Two entry points: a high-accuracy reference solve (relative residual
1e-12), and the coupled primal/dual iteration that advances both solvers
in lockstep and stops each one as soon as its residual inner product with
the partner iterate drops below the requested tolerance.  Both use Jacobi
preconditioning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SolverConvergenceError(RuntimeError):
    pass


@dataclass
class SolveReport:
    u: np.ndarray
    phi: np.ndarray
    iterations_primal: int
    iterations_dual: int
    goal_residual_primal: float
    goal_residual_dual: float
    matvecs: int


def _iteration_cap(n, max_iter):
    if max_iter is not None:
        return int(max_iter)
    return int(100 * np.sqrt(max(n, 1))) + 20


class _PCG:
    """One preconditioned CG recurrence that can be advanced step by step."""

    __slots__ = ("A", "dinv", "x", "r", "z", "p", "rz")

    def __init__(self, A, b, x0=None):
        self.A = A
        d = A.diagonal()
        if np.any(d <= 0):
            raise SolverConvergenceError("matrix diagonal not positive; system not SPD")
        self.dinv = 1.0 / d
        self.x = np.zeros(A.shape[0]) if x0 is None else np.array(x0, dtype=float)
        self.r = b - A @ self.x if x0 is not None else np.array(b, dtype=float)
        self.z = self.dinv * self.r
        self.p = self.z.copy()
        self.rz = float(self.r @ self.z)

    def step(self):
        Ap = self.A @ self.p
        pAp = float(self.p @ Ap)
        if pAp <= 0.0:
            raise SolverConvergenceError("non-positive curvature; system not SPD")
        alpha = self.rz / pAp
        self.x += alpha * self.p
        self.r -= alpha * Ap
        self.z = self.dinv * self.r
        rz_new = float(self.r @ self.z)
        self.p = self.z + (rz_new / self.rz) * self.p
        self.rz = rz_new


def pcg(A, b, rtol=1e-12, max_iter=None, x0=None):
    """Jacobi-PCG to a relative residual; returns (x, iterations)."""
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros(A.shape[0]), 0
    cg = _PCG(A, b, x0)
    cap = _iteration_cap(A.shape[0], max_iter)
    for k in range(1, cap + 1):
        cg.step()
        if np.linalg.norm(cg.r) <= rtol * bnorm:
            return cg.x, k
    raise SolverConvergenceError(
        f"PCG did not reach rtol={rtol:g} within {cap} iterations")


def solve_reference(matrix, rhs, rtol=1e-12, max_iter=None):
    """High-accuracy solve; raises if the residual target is unreachable."""
    x, _ = pcg(matrix, rhs, rtol=rtol, max_iter=max_iter)
    return x


def solve_primal_dual(sys_p, rhs_p, sys_d, rhs_d, tol_iter, max_iter=None):
    """Advance primal and dual CG together under goal-weighted stopping.

    The primal solver stops once |(r_p, phi)| < tol_iter, the dual once
    |(r_d, u)| < tol_iter, each test using the partner's current (possibly
    frozen) iterate.  After one side stops its iterate stays fixed while
    the other continues alone.
    """
    if tol_iter <= 0:
        raise ValueError("tol_iter must be positive")
    A_p = sys_p.matrix if hasattr(sys_p, "matrix") else sys_p
    A_d = sys_d.matrix if hasattr(sys_d, "matrix") else sys_d
    primal = _PCG(A_p, rhs_p)
    dual = _PCG(A_d, rhs_d)
    cap = _iteration_cap(A_p.shape[0], max_iter)
    # stop as converged once the algebraic residual hits rounding level,
    # even if the goal tolerance is below what finite precision can resolve
    floor_p = 1e-14 * np.linalg.norm(rhs_p)
    floor_d = 1e-14 * np.linalg.norm(rhs_d)
    run_p = run_d = True
    it_p = it_d = 0
    gp = gd = np.inf
    for _ in range(cap):
        if run_p:
            primal.step()
            it_p += 1
        if run_d:
            dual.step()
            it_d += 1
        gp = abs(float(primal.r @ dual.x))
        gd = abs(float(dual.r @ primal.x))
        if run_p and (gp < tol_iter or np.linalg.norm(primal.r) <= floor_p):
            run_p = False
        if run_d and (gd < tol_iter or np.linalg.norm(dual.r) <= floor_d):
            run_d = False
        if not run_p and not run_d:
            return SolveReport(u=primal.x, phi=dual.x,
                               iterations_primal=it_p, iterations_dual=it_d,
                               goal_residual_primal=gp, goal_residual_dual=gd,
                               matvecs=it_p + it_d)
    raise SolverConvergenceError(
        f"goal-oriented iteration did not reach tol_iter={tol_iter:g} within {cap} steps")
