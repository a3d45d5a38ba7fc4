"""Bilinear quadrilateral (Q1) assembly, load vectors, and the QoI functional.

The stiffness entry is int_D a grad(phi_i).grad(phi_j) with a evaluated at
2x2 Gauss points per cell.  Hanging DoFs are condensed through their edge
interpolation and Dirichlet DoFs are eliminated symmetrically, so the
assembled operator is SPD on the free DoFs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import ndtr

from .mesh import hanging_constraints

SOURCE_STRENGTH = 1000.0
QOI_REGION = (0.25, 0.5, -0.5, -0.25)   # (x_lo, x_hi, y_lo, y_hi)
QOI_SIGMA = 0.25                         # Gaussian kernel: cov = (1/16) I

_G = 1.0 / np.sqrt(3.0)
# reference Gauss points and Q1 nodes, both ordered (SW, SE, NW, NE)
GAUSS_REF = np.array([(-_G, -_G), (_G, -_G), (-_G, _G), (_G, _G)])
_NODES = np.array([(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)])


def _shape_tables():
    xi, eta = GAUSS_REF[:, 0], GAUSS_REF[:, 1]
    s, t = _NODES[:, 0], _NODES[:, 1]
    phi = 0.25 * (1 + np.outer(xi, s)) * (1 + np.outer(eta, t))
    dphix = 0.25 * s[None, :] * (1 + np.outer(eta, t))
    dphiy = 0.25 * t[None, :] * (1 + np.outer(xi, s))
    # grad-product tensor; the h factors of gradient scaling and Jacobian cancel
    grad = np.einsum("qi,qj->qij", dphix, dphix) + np.einsum("qi,qj->qij", dphiy, dphiy)
    return phi, grad


PHI_AT_GAUSS, GRAD_TENSOR = _shape_tables()


class FieldEvaluationError(RuntimeError):
    """The coefficient came back non-positive or non-finite at a quadrature point."""


@dataclass
class SparseSystem:
    """Condensed SPD operator together with the constraint prolongation."""

    matrix: sp.csr_matrix        # n_free x n_free
    prolong: sp.csr_matrix       # n_vert x n_free
    mesh: object

    @property
    def n_free(self):
        return self.matrix.shape[0]

    @property
    def nnz(self):
        return self.matrix.nnz

    def condense(self, vec_full):
        return self.prolong.T @ vec_full

    def expand(self, vec_free):
        return self.prolong @ vec_free


def quad_points(mesh):
    """Physical 2x2 Gauss points, shape (n_cells, 4, 2)."""
    if "quad_pts" not in mesh.cache:
        centers = mesh.cell_centers()
        half = 0.5 * mesh.h
        pts = centers[:, None, :] + half[:, None, None] * GAUSS_REF[None, :, :]
        mesh.cache["quad_pts"] = pts
    return mesh.cache["quad_pts"]


def prolongation(mesh):
    """Map free DoFs to all vertices: identity rows, 1/2-1/2 hanging rows."""
    if "prolong" in mesh.cache:
        return mesh.cache["prolong"]
    constraints = hanging_constraints(mesh)
    rows, cols, vals = [], [], []
    for v in range(mesh.n_vertices):
        f = mesh.free_index[v]
        if f >= 0:
            rows.append(v)
            cols.append(f)
            vals.append(1.0)
        elif v in constraints:
            for master, w in constraints[v]:
                mf = mesh.free_index[master]
                if mf >= 0:
                    rows.append(v)
                    cols.append(mf)
                    vals.append(w)
    T = sp.csr_matrix((vals, (rows, cols)), shape=(mesh.n_vertices, mesh.n_free))
    mesh.cache["prolong"] = T
    return T


def _scatter_indices(mesh):
    if "scatter" not in mesh.cache:
        c = mesh.corners
        rows = np.repeat(c, 4, axis=1).ravel()
        cols = np.tile(c, (1, 4)).ravel()
        mesh.cache["scatter"] = (rows, cols)
    return mesh.cache["scatter"]


_TRIG_CACHE_MAX_POINTS = 60_000


def fourier_table(mesh, basis, where):
    """Cached cos/sin table of the basis at the mesh quadrature points or
    vertices; large point sets are evaluated in chunks without caching."""
    key = ("fourier_trig", where, id(basis))
    if key in mesh.cache:
        return mesh.cache[key]
    pts = quad_points(mesh).reshape(-1, 2) if where == "quad" else mesh.xy
    shift = (np.pi / 2.0) * basis.is_sin[None, :]
    if len(pts) > _TRIG_CACHE_MAX_POINTS:
        return (pts, shift)
    table = np.cos(pts @ basis.ang_freq.T - shift)
    mesh.cache[key] = table
    return table


def _field_values(mesh, field, where):
    basis = getattr(field, "basis", None)
    if basis is None:
        pts = quad_points(mesh).reshape(-1, 2) if where == "quad" else mesh.xy
        return np.asarray(field.evaluate(pts), dtype=float)
    table = fourier_table(mesh, basis, where)
    w = field.xi * basis.amplitude
    if isinstance(table, tuple):
        # too many points to keep the table: stream in chunks, single
        # precision on the trig evaluation (the phase is formed in double)
        pts, shift = table
        out = np.empty(len(pts))
        step = _TRIG_CACHE_MAX_POINTS
        for s in range(0, len(pts), step):
            arg = (pts[s:s + step] @ basis.ang_freq.T - shift).astype(np.float32)
            out[s:s + step] = np.cos(arg) @ w.astype(np.float32)
        return np.exp(out)
    return np.exp(table @ w)


def coefficient_at_quadrature(mesh, field):
    """Evaluate the diffusivity at all Gauss points; reject invalid values."""
    a = _field_values(mesh, field, "quad")
    if not np.all(np.isfinite(a)) or np.any(a <= 0.0):
        raise FieldEvaluationError("coefficient must be positive and finite on the domain")
    return a.reshape(mesh.n_cells, 4)


def coefficient_at_vertices(mesh, field):
    return _field_values(mesh, field, "vertices")


def assemble_system(mesh, field, constraints=None):
    """Stiffness operator for the diffusivity sample, condensed to free DoFs."""
    aq = coefficient_at_quadrature(mesh, field)
    return _assemble_from_quadrature(mesh, aq)


def _assemble_from_quadrature(mesh, aq):
    local = np.einsum("nq,qij->nij", aq, GRAD_TENSOR)
    rows, cols = _scatter_indices(mesh)
    A = sp.coo_matrix((local.ravel(), (rows, cols)),
                      shape=(mesh.n_vertices, mesh.n_vertices)).tocsr()
    T = prolongation(mesh)
    return SparseSystem(matrix=(T.T @ A @ T).tocsr(), prolong=T, mesh=mesh)


def assemble_primal_rhs(mesh):
    """Load vector of f = 1000 on all vertices (Gauss quadrature per cell)."""
    if "rhs_primal" not in mesh.cache:
        cellwise = SOURCE_STRENGTH * (mesh.h ** 2 / 4.0)
        b = np.zeros(mesh.n_vertices)
        # sum_q phi_i(xi_q) = 1 for each node of the 2x2 rule
        contrib = cellwise[:, None] * PHI_AT_GAUSS.sum(axis=0)[None, :]
        np.add.at(b, mesh.corners.ravel(), contrib.ravel())
        mesh.cache["rhs_primal"] = b
    return mesh.cache["rhs_primal"]


def qoi_weight(points):
    """Gaussian-smoothed indicator of the QoI box, evaluated pointwise.

    Separable closed form: per axis, Phi((hi-x)/s) - Phi((lo-x)/s).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    x_lo, x_hi, y_lo, y_hi = QOI_REGION
    s = QOI_SIGMA
    wx = ndtr((x_hi - pts[:, 0]) / s) - ndtr((x_lo - pts[:, 0]) / s)
    wy = ndtr((y_hi - pts[:, 1]) / s) - ndtr((y_lo - pts[:, 1]) / s)
    out = wx * wy
    return out if np.ndim(points) == 2 else out[0]


def assemble_dual_rhs(mesh):
    """Load vector of the QoI weight on all vertices."""
    if "rhs_dual" not in mesh.cache:
        pts = quad_points(mesh)
        w = qoi_weight(pts.reshape(-1, 2)).reshape(mesh.n_cells, 4)
        contrib = (mesh.h ** 2 / 4.0)[:, None] * (w @ PHI_AT_GAUSS)
        b = np.zeros(mesh.n_vertices)
        np.add.at(b, mesh.corners.ravel(), contrib.ravel())
        mesh.cache["rhs_dual"] = b
    return mesh.cache["rhs_dual"]


def evaluate_qoi(mesh, u_full):
    """Q(u_h) as the discrete duality pairing with the QoI load."""
    u_full = np.asarray(u_full)
    if u_full.shape[-1] != mesh.n_vertices:
        raise ValueError("nodal vector does not match mesh vertex count")
    return u_full @ assemble_dual_rhs(mesh)
