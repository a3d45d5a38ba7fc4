"""Goal-oriented adaptive finite element multilevel Monte Carlo.

Solves -div(a grad u) = f on a rectangle with a mixed Dirichlet/Neumann
boundary and estimates E[Q(u)] for a Gaussian-weighted average Q, using
either uniformly refined mesh levels or accuracy-indexed levels served by
a precomputed hierarchy of goal-adapted quadtree meshes.
"""

from .mesh import QuadMesh, LineStructure, new_base_mesh, refine_cells
from .fem import SparseSystem, assemble_system, assemble_primal_rhs, assemble_dual_rhs, qoi_weight, evaluate_qoi
from .solver import SolveReport, solve_reference, solve_primal_dual
from .density import DensityField, compute_density_field
from .adapt import AdaptParams, MeshHierarchy, generate_hierarchy
from .field import MaternParams, FourierBasis, matern_covariance, build_fourier_basis, sample_field
from .problems import Problem, make_problem
from .mlmc import EstimatorConfig, MLMCResult, run_estimator, optimal_counts

__all__ = [
    "QuadMesh", "LineStructure", "new_base_mesh", "refine_cells",
    "SparseSystem", "assemble_system", "assemble_primal_rhs", "assemble_dual_rhs",
    "qoi_weight", "evaluate_qoi",
    "SolveReport", "solve_reference", "solve_primal_dual",
    "DensityField", "compute_density_field",
    "AdaptParams", "MeshHierarchy", "generate_hierarchy",
    "MaternParams", "FourierBasis", "matern_covariance", "build_fourier_basis", "sample_field",
    "Problem", "make_problem",
    "EstimatorConfig", "MLMCResult", "run_estimator", "optimal_counts",
]
