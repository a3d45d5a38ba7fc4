import numpy as np
import pytest
import scipy.sparse as sp

from amlmc.solver import (SolverConvergenceError, pcg, solve_reference,
                          solve_primal_dual)
from amlmc.mesh import new_base_mesh
from amlmc.fem import assemble_system, assemble_primal_rhs, assemble_dual_rhs
from amlmc.field import ConstantField


def random_spd(n, seed):
    rng = np.random.default_rng(seed)
    B = rng.normal(size=(n, n))
    return sp.csr_matrix(B @ B.T + n * np.eye(n))


def test_identity_solve():
    A = sp.identity(7, format="csr")
    b = np.arange(7, dtype=float)
    assert np.allclose(solve_reference(A, b), b)


def test_2x2_closed_form():
    A = sp.csr_matrix(np.array([[2.0, 1.0], [1.0, 3.0]]))
    b = np.array([1.0, 2.0])
    x = solve_reference(A, b)
    assert np.allclose(x, np.linalg.solve(A.toarray(), b), atol=1e-11)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_random_spd_against_dense_lu(seed):
    A = random_spd(50, seed)
    b = np.random.default_rng(seed + 10).normal(size=50)
    x = solve_reference(A, b)
    oracle = np.linalg.solve(A.toarray(), b)   # dense factorization oracle
    assert np.max(np.abs(x - oracle)) < 1e-10 * np.abs(oracle).max()


def test_reference_residual_target():
    A = random_spd(80, 3)
    b = np.ones(80)
    x = solve_reference(A, b)
    assert np.linalg.norm(b - A @ x) <= 1e-12 * np.linalg.norm(b)


def test_nonconvergence_raises():
    A = random_spd(30, 4)
    b = np.ones(30)
    with pytest.raises(SolverConvergenceError):
        pcg(A, b, rtol=1e-12, max_iter=2)


def _paper_system(level=2):
    mesh = new_base_mesh((-1.0, 1.0, -1.0, 0.0), 4, 2, neumann=("top", -1.0, 0.0))
    for _ in range(level):
        mesh = mesh.refine_all()
    system = assemble_system(mesh, ConstantField(1.0))
    b_p = system.condense(assemble_primal_rhs(mesh))
    b_d = system.condense(assemble_dual_rhs(mesh))
    return mesh, system, b_p, b_d


def test_equal_rhs_gives_identical_iterates():
    _, system, b_p, _ = _paper_system()
    report = solve_primal_dual(system, b_p, system, b_p, tol_iter=1e-8)
    assert np.array_equal(report.u, report.phi)
    assert report.iterations_primal == report.iterations_dual


def test_infinite_tolerance_stops_after_one_step():
    _, system, b_p, b_d = _paper_system()
    report = solve_primal_dual(system, b_p, system, b_d, tol_iter=np.inf)
    assert report.iterations_primal == 1
    assert report.iterations_dual == 1


def test_goal_stopping_bounds_qoi_error():
    # |Q(u_iter) - Q(u_ref)| is first-order the goal residual (r_p, phi)
    mesh, system, b_p, b_d = _paper_system(level=2)
    assert 80 <= system.n_free <= 150
    u_ref = solve_reference(system.matrix, b_p)
    phi_ref = solve_reference(system.matrix, b_d)
    for tol_iter in (1e-3, 1e-5, 1e-7):
        rep = solve_primal_dual(system, b_p, system, b_d, tol_iter=tol_iter)
        assert rep.goal_residual_primal < tol_iter
        assert rep.goal_residual_dual < tol_iter
        q_err = abs(b_d @ (rep.u - u_ref))
        # (r_p, phi_ref) = Q algebraic error up to the dual iterate's own error
        assert q_err <= 5.0 * tol_iter
    # goal residual computed against the exact dual tracks the Q error closely
    rep = solve_primal_dual(system, b_p, system, b_d, tol_iter=1e-6)
    q_err = abs(b_d @ (rep.u - u_ref))
    goal = abs((b_p - system.matrix @ rep.u) @ phi_ref)
    assert np.isclose(q_err, goal, rtol=1e-6)


def test_lockstep_matches_reference_at_tiny_tolerance():
    _, system, b_p, b_d = _paper_system()
    rep = solve_primal_dual(system, b_p, system, b_d, tol_iter=1e-14)
    u_ref = solve_reference(system.matrix, b_p)
    phi_ref = solve_reference(system.matrix, b_d)
    assert np.max(np.abs(rep.u - u_ref)) < 1e-10 * max(1.0, np.abs(u_ref).max())
    assert np.max(np.abs(rep.phi - phi_ref)) < 1e-10 * max(1.0, np.abs(phi_ref).max())


def test_work_units_proportional_to_iterations():
    _, system, b_p, b_d = _paper_system()
    rep = solve_primal_dual(system, b_p, system, b_d, tol_iter=1e-6)
    assert rep.matvecs == rep.iterations_primal + rep.iterations_dual


def test_tol_iter_validation():
    _, system, b_p, b_d = _paper_system()
    with pytest.raises(ValueError):
        solve_primal_dual(system, b_p, system, b_d, tol_iter=0.0)
