"""Dual-weighted residual error density from averaged difference quotients.

Second difference quotients of the primal and dual solutions are taken
along the mesh line structures (unequal spacings allowed), smoothed by a
3-point sliding mean along each line, and combined with the diffusivity
into a per-cell signed density.  A tolerance-dependent lower/upper bound
keeps the density usable for refinement decisions on coarse meshes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .mesh import assemble_lines


@dataclass
class DensityField:
    """Per-cell density data with its derived indicators and norms."""

    rho_tilde: np.ndarray
    rho_bar: np.ndarray
    indicators: np.ndarray
    e_est: float
    e_est_abs: float
    norm_l1: float
    norm_lhalf: float
    scaling_numerator: float
    bound_lower: float


def _line_segments(mesh, axis):
    """Flattened line traversal: (vertex ids, segment starts, lengths, coords).

    Segments are the contiguous runs of the line structure; quotients in
    direction x run along constant-y lines and vice versa.
    """
    key = f"lineop_{axis}"
    if key in mesh.cache:
        return mesh.cache[key]
    lines = assemble_lines(mesh)
    table = lines.y_runs if axis == "x" else lines.x_runs
    vids, starts, lens = [], [], []
    for _, ids in table:
        starts.append(sum(lens))
        lens.append(len(ids))
        vids.append(ids)
    vids = np.concatenate(vids) if vids else np.zeros(0, dtype=np.int64)
    coords = mesh.xy[vids, 0 if axis == "x" else 1]
    out = (vids, np.asarray(starts), np.asarray(lens), coords)
    mesh.cache[key] = out
    return out


def _segment_quotient(vals, coords, starts, lens):
    m = len(vals)
    out = np.full(m, np.nan)
    ends = starts + lens - 1
    interior = np.ones(m, dtype=bool)
    interior[starts] = False
    interior[ends] = False
    idx = np.flatnonzero(interior)
    if len(idx):
        h1 = coords[idx] - coords[idx - 1]
        h2 = coords[idx + 1] - coords[idx]
        out[idx] = 2.0 * (vals[idx - 1] / (h1 * (h1 + h2))
                          - vals[idx] / (h1 * h2)
                          + vals[idx + 1] / (h2 * (h1 + h2)))
    long = lens >= 3
    out[starts[long]] = out[starts[long] + 1]
    out[ends[long]] = out[ends[long] - 1]
    return out


def _segment_mean3(vals, starts, lens):
    out = np.empty_like(vals)
    ends = starts + lens - 1
    if len(vals) >= 3:
        out[1:-1] = (vals[:-2] + vals[1:-1] + vals[2:]) / 3.0
    two = lens >= 2
    s2, e2 = starts[two], ends[two]
    out[s2] = 0.5 * (vals[s2] + vals[s2 + 1])
    out[e2] = 0.5 * (vals[e2 - 1] + vals[e2])
    one = lens == 1
    out[starts[one]] = vals[starts[one]]
    return out


def difference_quotients(mesh, lines, w_full):
    """Per-vertex second difference quotients (d2/dx2, d2/dy2) of w.

    Interior line vertices use the three-point divided difference, line
    ends copy their nearest interior value.  Vertices whose line is too
    short inherit the mean of their hanging-node masters.
    """
    w = np.asarray(w_full, dtype=float)
    result = []
    for axis in ("x", "y"):
        vids, starts, lens, coords = _line_segments(mesh, axis)
        q = _segment_quotient(w[vids], coords, starts, lens)
        per_vertex = np.empty(mesh.n_vertices)
        per_vertex[vids] = q
        bad = np.isnan(per_vertex)
        if bad.any():
            for v in np.flatnonzero(bad):
                masters = mesh.hanging_masters.get(int(v))
                if masters and not np.isnan(per_vertex[masters[0]]) \
                        and not np.isnan(per_vertex[masters[1]]):
                    per_vertex[v] = 0.5 * (per_vertex[masters[0]] + per_vertex[masters[1]])
                else:
                    per_vertex[v] = 0.0
        result.append(per_vertex)
    return tuple(result)


def averaged_quotients(mesh, raw_pair):
    """3-point sliding mean of each raw quotient along its own line direction."""
    out = []
    for axis, raw in zip(("x", "y"), raw_pair):
        vids, starts, lens, _ = _line_segments(mesh, axis)
        sm = _segment_mean3(np.asarray(raw, dtype=float)[vids], starts, lens)
        per_vertex = np.empty(mesh.n_vertices)
        per_vertex[vids] = sm
        out.append(per_vertex)
    return tuple(out)


def density_cells(mesh, field, u_full, phi_full, lines=None):
    """Signed per-cell error density from primal/dual averaged quotients."""
    if lines is None:
        lines = assemble_lines(mesh)
    from .fem import coefficient_at_vertices
    du = averaged_quotients(mesh, difference_quotients(mesh, lines, u_full))
    dphi = averaged_quotients(mesh, difference_quotients(mesh, lines, phi_full))
    a_vert = coefficient_at_vertices(mesh, field)
    c = mesh.corners
    acc = np.zeros(mesh.n_cells)
    for j in range(4):
        v = c[:, j]
        acc += a_vert[v] * (du[0][v] * dphi[0][v] + du[1][v] * dphi[1][v])
    return acc / 48.0


# Exponent of the tolerance-dependent upper bound.  The cap only exists to
# stop runaway refinement from spurious coarse-mesh estimates; it must stay
# far above the genuine density peak, which grows without bound near the
# boundary singularity as the origin cells shrink.
UPPER_BOUND_EXPONENT = 3.0


def bound_density(rho_tilde, tol, mesh):
    """Clamp |density| into [delta, delta * tol^-3.5] with sign kept (sgn 0 -> +)."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    rho = np.asarray(rho_tilde, dtype=float)
    area = float(np.sum(mesh.h ** 2))
    lhalf = float(np.sum(np.sqrt(np.abs(rho)) * mesh.h ** 2)) ** 2
    delta = lhalf / area ** 2 * np.sqrt(tol)
    if delta == 0.0:
        return np.zeros_like(rho)
    upper = max(delta, lhalf / area ** 2 * tol ** -UPPER_BOUND_EXPONENT)
    sign = np.where(rho < 0, -1.0, 1.0)
    return sign * np.clip(np.abs(rho), delta, upper)


def indicators_and_estimate(rho_bar, mesh):
    """r(K) = rho_bar h^4 with the signed and unsigned totals."""
    r = np.asarray(rho_bar) * mesh.h ** 4
    return r, float(r.sum()), float(np.abs(r).sum())


def density_norms(rho, mesh):
    """(L1, L-half) of |rho| as piecewise-constant integrals."""
    w = mesh.h ** 2
    rho = np.abs(np.asarray(rho))
    return float(np.sum(rho * w)), float(np.sum(np.sqrt(rho) * w) ** 2)


def scaling_numerator(rho_bar, mesh):
    """Integral of |rho_bar|^(1/2); the per-sample half of the scaling factor."""
    return float(np.sum(np.sqrt(np.abs(rho_bar)) * mesh.h ** 2))


def compute_density_field(mesh, field, u_full, phi_full, tol, lines=None):
    rho_tilde = density_cells(mesh, field, u_full, phi_full, lines)
    rho_bar = bound_density(rho_tilde, tol, mesh)
    r, e_est, e_abs = indicators_and_estimate(rho_bar, mesh)
    l1, lhalf = density_norms(rho_bar, mesh)
    area = float(np.sum(mesh.h ** 2))
    delta = float(np.sum(np.sqrt(np.abs(rho_tilde)) * mesh.h ** 2)) ** 2 \
        / area ** 2 * np.sqrt(tol)
    return DensityField(rho_tilde=rho_tilde, rho_bar=rho_bar, indicators=r,
                        e_est=e_est, e_est_abs=e_abs,
                        norm_l1=l1, norm_lhalf=lhalf,
                        scaling_numerator=scaling_numerator(rho_bar, mesh),
                        bound_lower=delta)


def density_to_csv(density, mesh, path):
    centers = mesh.cell_centers()
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["cell", "x", "y", "h", "rho_tilde", "rho_bar", "indicator"])
        for k in range(mesh.n_cells):
            w.writerow([k, repr(centers[k, 0]), repr(centers[k, 1]), repr(float(mesh.h[k])),
                        repr(float(density.rho_tilde[k])), repr(float(density.rho_bar[k])),
                        repr(float(density.indicators[k]))])
