"""The example problems: domain, boundary split, coefficient models.

All examples share the slit-type domain [-1,1]x[-1,0] with the Neumann
segment on the top-left boundary edge, the source f = 1000, and the
Gaussian-weighted QoI; they differ only in the diffusivity model:
example 0 a constant, example 1 a lognormal constant, example 2 a
lognormal trigonometric field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dfield

from .mesh import new_base_mesh
from .field import ConstantField, FieldModel, MaternParams, build_fourier_basis
from .adapt import AdaptParams, MeshHierarchy

DOMAIN = (-1.0, 1.0, -1.0, 0.0)
NEUMANN = ("top", -1.0, 0.0)
BASE_NX, BASE_NY = 4, 2
HIER_TOL0 = 2.0 ** -5
HIER_RATIO = 0.5


@dataclass
class WorkModel:
    """Portable cost units standing in for hardware flop counts.

    assembly: cells x quadrature points x (local kernel + field terms);
    solve: CG iterations x matrix nonzeros; error estimate: N log2(N)^2.
    """

    local_kernel_cost: float = 16.0

    def assembly(self, n_cells, field_terms):
        return n_cells * 4.0 * (self.local_kernel_cost + field_terms)

    def solve(self, iterations, nnz):
        return float(iterations) * float(nnz)

    def density(self, n_cells):
        n = max(float(n_cells), 2.0)
        return n * math.log2(n) ** 2


@dataclass
class Problem:
    example: int
    sigma2: float
    field_model: FieldModel
    phase1_value: float
    level_tol0: float
    level_ratio: float
    adapt_params: AdaptParams = dfield(default_factory=AdaptParams)
    hier_tol0: float = HIER_TOL0
    hier_ratio: float = HIER_RATIO
    max_hier_depth: int = 14
    # which uniform mesh serves SMLMC level 0 (rate studies place it past
    # the pre-asymptotic head; complexity sweeps keep the common base)
    smlmc_base_level: int = 0
    work: WorkModel = dfield(default_factory=WorkModel)
    _cache: dict = dfield(default_factory=dict)

    # -- meshes --------------------------------------------------------------

    def base_mesh(self):
        if "base" not in self._cache:
            self._cache["base"] = new_base_mesh(DOMAIN, BASE_NX, BASE_NY, neumann=NEUMANN)
        return self._cache["base"]

    def uniform_mesh(self, level):
        """Base mesh refined globally ``level`` times."""
        meshes = self._cache.setdefault("uniform", [self.base_mesh()])
        while len(meshes) <= level:
            meshes.append(meshes[-1].refine_all())
        return meshes[level]

    def smlmc_mesh(self, level):
        """Uniform mesh serving SMLMC level ``level``."""
        return self.uniform_mesh(level + self.smlmc_base_level)

    def phase1_field(self):
        return ConstantField(self.phase1_value)

    def hierarchy(self):
        """The deterministic auxiliary hierarchy (built lazily, cached)."""
        if "hierarchy" not in self._cache:
            self._cache["hierarchy"] = MeshHierarchy(
                base=self.base_mesh(), field=self.phase1_field(),
                params=self.adapt_params, tol0=self.hier_tol0,
                ratio=self.hier_ratio, max_depth=self.max_hier_depth,
                work_model=self.work)
        return self._cache["hierarchy"]

    def attach_hierarchy(self, hier):
        self._cache["hierarchy"] = hier

    def level_tol(self, ell):
        return self.level_tol0 * self.level_ratio ** ell

    def field_terms(self):
        """Per-quadrature-point field cost entering the assembly work model."""
        return float(self.field_model.basis.n_terms) if self.field_model.kind == "fourier" else 1.0

    def descriptor(self):
        return {"example": self.example, "sigma2": self.sigma2,
                "field": self.field_model.descriptor(),
                "phase1_value": self.phase1_value,
                "level_tol0": self.level_tol0, "level_ratio": self.level_ratio,
                "hier_tol0": self.hier_tol0, "hier_ratio": self.hier_ratio}


def default_level_tol0(sigma2):
    """Level tolerance openers used in the experiments: 2*4^-l and 4^(1-l)."""
    return 4.0 if sigma2 >= 4.0 else 2.0


def make_problem(example, sigma2=1.0, level_tol0=None, level_ratio=0.25,
                 matern=None, max_hier_depth=16, hier_tol0=None, hier_ratio=HIER_RATIO):
    """Configure one of the three experiment problems.

    The auxiliary hierarchy for the estimators opens at the level-tolerance
    scale (halving per mesh), so the per-sample mesh acceptance spreads
    over several auxiliary meshes on every level.  Example 0, which is used
    for the deterministic convergence studies, keeps the fine sequence
    2^-(k+5) of the mesh-generation experiments.
    """
    if example == 0:
        model = FieldModel(kind="constant", value=math.exp(2.0))
        phase1 = math.exp(2.0)
        sigma2 = 0.0
    elif example == 1:
        model = FieldModel(kind="lognormal", sigma=math.sqrt(sigma2))
        phase1 = 1.0
    elif example == 2:
        params = matern or MaternParams(sigma2=sigma2)
        basis = build_fourier_basis(params, DOMAIN)
        model = FieldModel(kind="fourier", basis=basis)
        phase1 = 1.0
    else:
        raise ValueError("example must be 0, 1 or 2")
    if level_tol0 is None:
        level_tol0 = default_level_tol0(sigma2)
    if hier_tol0 is None:
        hier_tol0 = HIER_TOL0 if example == 0 else 0.5 * level_tol0
    return Problem(example=example, sigma2=sigma2, field_model=model,
                   phase1_value=phase1, level_tol0=level_tol0,
                   level_ratio=level_ratio, max_hier_depth=max_hier_depth,
                   hier_tol0=hier_tol0, hier_ratio=hier_ratio)
