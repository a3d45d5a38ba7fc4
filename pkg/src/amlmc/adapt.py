"""Deterministic goal-oriented generation of the auxiliary mesh hierarchy.

For a decreasing tolerance sequence, each level refines the previous mesh
until the largest error indicator satisfies the stopping test, marking
cells whose indicator exceeds the refinement threshold.  The scaling
parameter script-N grows geometrically per level and is pulled up to the
realized cell count after each refinement round.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field as dfield

import numpy as np

from .mesh import QuadMesh, assemble_lines
from .fem import assemble_system, assemble_primal_rhs, assemble_dual_rhs
from .solver import solve_primal_dual, pcg
from .density import compute_density_field


@dataclass
class AdaptParams:
    c_refine: float = 2.5
    c_stop: float = 3.0
    growth: float = 2.0

    def __post_init__(self):
        # refined cells must pass the stopping test on the next round
        if not self.c_stop > self.c_refine * 0.5 ** 4:
            raise ValueError("need c_stop > c_refine / 16")
        if not self.growth > 1.0:
            raise ValueError("script-N growth factor must exceed 1")

    def to_dict(self):
        return {"c_refine": self.c_refine, "c_stop": self.c_stop, "growth": self.growth}


def stopping_satisfied(indicators, tol, script_n, c_stop):
    """max |r(K)| < c_stop * tol / script_n (strict)."""
    if script_n <= 0:
        raise ValueError("script_n must be positive")
    r = np.abs(np.asarray(indicators))
    if r.size == 0:
        return True
    return bool(r.max() < c_stop * tol / script_n)


def mark_cells(indicators, tol, script_n, c_refine):
    """Cells with |r(K)| >= c_refine * tol / script_n."""
    if script_n <= 0:
        raise ValueError("script_n must be positive")
    r = np.abs(np.asarray(indicators))
    return np.flatnonzero(r >= c_refine * tol / script_n)


@dataclass
class HierarchyLevel:
    mesh: QuadMesh
    tol: float
    e_est: float
    e_est_abs: float
    rounds: int


@dataclass
class MeshHierarchy:
    """Ordered adapted meshes with their generation tolerances.

    ``ensure(k)`` extends the hierarchy on demand by continuing the
    tolerance sequence; everything is deterministic in the inputs.
    """

    base: QuadMesh
    field: object
    params: AdaptParams
    tol0: float
    ratio: float
    solver_rtol_factor: float = 0.1
    levels: list = dfield(default_factory=list)
    script_n: float = 0.0
    work_units: float = 0.0
    max_depth: int = 14
    work_model: object = None

    def __post_init__(self):
        if self.script_n == 0.0:
            self.script_n = float(self.base.n_cells)

    def tol_of(self, k):
        return self.tol0 * self.ratio ** k

    def __len__(self):
        return len(self.levels)

    def mesh(self, k):
        self.ensure(k)
        return self.levels[k].mesh

    def ensure(self, k):
        if k >= self.max_depth:
            raise IndexError(f"hierarchy depth {k} exceeds configured maximum {self.max_depth}")
        while len(self.levels) <= k:
            self._generate_next()

    def _generate_next(self):
        k = len(self.levels)
        tol = self.tol_of(k)
        mesh = self.levels[-1].mesh if self.levels else self.base
        self.script_n *= self.params.growth
        rounds = 0
        while True:
            system = assemble_system(mesh, self.field)
            b_p = system.condense(assemble_primal_rhs(mesh))
            b_d = system.condense(assemble_dual_rhs(mesh))
            report = solve_primal_dual(system, b_p, system, b_d,
                                       tol_iter=self.solver_rtol_factor * tol)
            u = system.expand(report.u)
            phi = system.expand(report.phi)
            dens = compute_density_field(mesh, self.field, u, phi, tol)
            rounds += 1
            if self.work_model is not None:
                self.work_units += (self.work_model.assembly(mesh.n_cells, 1.0)
                                    + self.work_model.solve(report.matvecs, system.nnz)
                                    + self.work_model.density(mesh.n_cells))
            if stopping_satisfied(dens.indicators, tol, self.script_n, self.params.c_stop):
                self.levels.append(HierarchyLevel(mesh=mesh, tol=tol, e_est=dens.e_est,
                                                  e_est_abs=dens.e_est_abs, rounds=rounds))
                return
            marks = mark_cells(dens.indicators, tol, self.script_n, self.params.c_refine)
            if len(marks) == 0:
                marks = np.array([int(np.argmax(np.abs(dens.indicators)))])
            mesh = mesh.refine(marks)
            self.script_n = max(self.script_n, float(mesh.n_cells))


def generate_hierarchy(tols, base, field, params=None, solver_rtol_factor=0.1,
                       max_depth=14):
    """Build the auxiliary hierarchy for an explicit tolerance list."""
    tols = list(map(float, tols))
    if not tols:
        raise ValueError("tolerance sequence is empty")
    if any(b >= a for a, b in zip(tols, tols[1:])):
        raise ValueError("tolerances must be strictly decreasing")
    ratio = tols[1] / tols[0] if len(tols) > 1 else 0.5
    hier = MeshHierarchy(base=base, field=field, params=params or AdaptParams(),
                         tol0=tols[0], ratio=ratio, max_depth=max_depth,
                         solver_rtol_factor=solver_rtol_factor)
    hier.ensure(len(tols) - 1)
    return hier


# -- persistence -------------------------------------------------------------

def save_hierarchy(hier, directory, field_descriptor=None):
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "format": "amlmc-hierarchy-1",
        "tol0": hier.tol0,
        "ratio": hier.ratio,
        "params": hier.params.to_dict(),
        "solver_rtol_factor": hier.solver_rtol_factor,
        "script_n": hier.script_n,
        "max_depth": hier.max_depth,
        "count": len(hier.levels),
        "field": field_descriptor if field_descriptor is not None else getattr(hier.field, "descriptor", lambda: {})(),
        "levels": [{"tol": lv.tol, "e_est": lv.e_est, "e_est_abs": lv.e_est_abs,
                    "rounds": lv.rounds, "cells": lv.mesh.n_cells,
                    "vertices": lv.mesh.n_vertices} for lv in hier.levels],
    }
    hier.base.save(os.path.join(directory, "base_mesh.txt"))
    for k, lv in enumerate(hier.levels):
        lv.mesh.save(os.path.join(directory, f"mesh_{k:03d}.txt"))
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_hierarchy(directory, field):
    with open(os.path.join(directory, "manifest.json")) as f:
        manifest = json.load(f)
    if manifest.get("format") != "amlmc-hierarchy-1":
        raise ValueError("not a hierarchy directory")
    base = QuadMesh.load(os.path.join(directory, "base_mesh.txt"))
    params = AdaptParams(**manifest["params"])
    hier = MeshHierarchy(base=base, field=field, params=params,
                         tol0=manifest["tol0"], ratio=manifest["ratio"],
                         solver_rtol_factor=manifest["solver_rtol_factor"],
                         script_n=manifest["script_n"],
                         max_depth=manifest["max_depth"])
    for k, info in enumerate(manifest["levels"]):
        mesh = QuadMesh.load(os.path.join(directory, f"mesh_{k:03d}.txt"))
        hier.levels.append(HierarchyLevel(mesh=mesh, tol=info["tol"], e_est=info["e_est"],
                                          e_est_abs=info["e_est_abs"], rounds=info["rounds"]))
    return hier
