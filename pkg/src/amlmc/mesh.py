"""Quadtree quadrilateral meshes with hanging nodes.

Cells are axis-aligned squares addressed by (level, i, j): a level-l cell
has side h0/2**l and lower-left corner at (i, j) in the level-l grid over
the base rectangle.  Refinement quadrisects marked leaves and transitively
enforces a 2:1 edge balance, so every hanging vertex is the midpoint of
exactly one coarser leaf edge.  Meshes are immutable; refinement returns a
new mesh.
"""

from __future__ import annotations

import io
import numpy as np


class MeshError(ValueError):
    pass


class LineStructure:
    """Vertices grouped into maximal axis-aligned lines.

    y_lines maps an integer y-coordinate (in lattice units) to the vertex
    ids sharing that y, sorted by x; x_lines is the transpose.  Every mesh
    vertex appears in exactly one line of each family.  y_runs/x_runs hold
    the same vertices split into contiguous chains of leaf-cell edges:
    vertices at one coordinate may come from refined patches far apart, and
    difference quotients are only meaningful within a chain.
    """

    __slots__ = ("y_lines", "x_lines", "y_runs", "x_runs")

    def __init__(self, y_lines, x_lines, y_runs, x_runs):
        self.y_lines = y_lines
        self.x_lines = x_lines
        self.y_runs = y_runs
        self.x_runs = x_runs


class QuadMesh:
    """Immutable balanced quadtree mesh over a rectangle.

    Vertices are numbered lexicographically by (y, x) so DoF ordering is
    reproducible across runs.  Derived structures (lines, constraint maps,
    assembly scratch) are memoized in ``cache``.
    """

    def __init__(self, domain, nx, ny, leaf_keys, neumann=None):
        x0, x1, y0, y1 = map(float, domain)
        if not (x1 > x0 and y1 > y0):
            raise MeshError("domain must have positive area")
        if nx < 1 or ny < 1:
            raise MeshError("base grid needs nx, ny >= 1")
        hx = (x1 - x0) / nx
        hy = (y1 - y0) / ny
        if abs(hx - hy) > 1e-12 * max(abs(hx), abs(hy)):
            raise MeshError("cells must be squares: (x1-x0)/nx != (y1-y0)/ny")
        self.domain = (x0, x1, y0, y1)
        self.nx = int(nx)
        self.ny = int(ny)
        self.h0 = hx
        self.neumann = neumann

        lev, li, lj = (np.asarray(a, dtype=np.int64) for a in zip(*leaf_keys))
        self.max_level = int(lev.max(initial=0))
        S = np.int64(1) << self.max_level
        self.scale = int(S)
        side = S >> lev
        ix0 = li * side
        iy0 = lj * side
        order = np.lexsort((ix0, iy0))
        self.levels = lev[order]
        self.li = li[order]
        self.lj = lj[order]
        side = side[order]
        ix0, iy0 = ix0[order], iy0[order]
        self.iside = side
        self.h = self.h0 * side / self.scale
        self.leaf_set = frozenset(zip(self.levels.tolist(), self.li.tolist(), self.lj.tolist()))
        if len(self.leaf_set) != len(self.levels):
            raise MeshError("duplicate leaf cells")

        nxS = self.nx * self.scale
        nyS = self.ny * self.scale
        self._nxS, self._nyS = nxS, nyS
        enc = np.int64(nxS + 1)

        # corner codes ordered (SW, SE, NW, NE); vertex ids sorted by (y, x)
        cx = np.stack([ix0, ix0 + side, ix0, ix0 + side], axis=1)
        cy = np.stack([iy0, iy0, iy0 + side, iy0 + side], axis=1)
        codes = cy * enc + cx
        vcodes = np.unique(codes)
        self.corners = np.searchsorted(vcodes, codes)
        self._vcodes = vcodes
        vix = vcodes % enc
        viy = vcodes // enc
        self.verts_i = np.stack([vix, viy], axis=1)
        self.xy = np.stack([x0 + vix * (self.h0 / self.scale),
                            y0 + viy * (self.h0 / self.scale)], axis=1)

        # hanging vertices: existing midpoints of leaf edges
        self.hanging_masters = {}
        big = side >= 2
        if np.any(big):
            half = side[big] // 2
            bx0, by0, bs = ix0[big], iy0[big], side[big]
            bc = self.corners[big]
            edges = (
                (bx0 + half, by0, bc[:, 0], bc[:, 1]),        # bottom
                (bx0 + half, by0 + bs, bc[:, 2], bc[:, 3]),   # top
                (bx0, by0 + half, bc[:, 0], bc[:, 2]),        # left
                (bx0 + bs, by0 + half, bc[:, 1], bc[:, 3]),   # right
            )
            for mx, my, ma, mb in edges:
                mc = my * enc + mx
                pos = np.searchsorted(vcodes, mc)
                pos = np.minimum(pos, len(vcodes) - 1)
                hit = vcodes[pos] == mc
                for v, a, b in zip(pos[hit], ma[hit], mb[hit]):
                    self.hanging_masters[int(v)] = (int(a), int(b))

        n = len(vcodes)
        self.hanging = np.zeros(n, dtype=bool)
        if self.hanging_masters:
            self.hanging[np.fromiter(self.hanging_masters, dtype=np.int64)] = True

        on_bnd = (vix == 0) | (vix == nxS) | (viy == 0) | (viy == nyS)
        self.dirichlet = on_bnd & ~self._neumann_mask(vix, viy)
        free = ~self.dirichlet & ~self.hanging
        self.free_index = np.where(free, np.cumsum(free) - 1, -1)
        self.n_free = int(free.sum())
        self.cache = {}

    # -- basic queries ----------------------------------------------------

    @property
    def n_cells(self):
        return len(self.levels)

    @property
    def n_vertices(self):
        return len(self.xy)

    def leaf_keys(self):
        return list(zip(self.levels.tolist(), self.li.tolist(), self.lj.tolist()))

    def smallest_cell_size(self):
        return float(self.h.min())

    def cell_centers(self):
        side = self.iside
        cx = self.li * side + side / 2.0
        cy = self.lj * side + side / 2.0
        u = self.h0 / self.scale
        return np.stack([self.domain[0] + cx * u, self.domain[2] + cy * u], axis=1)

    def x_of(self, ix):
        return self.domain[0] + ix * (self.h0 / self.scale)

    def y_of(self, iy):
        return self.domain[2] + iy * (self.h0 / self.scale)

    def _neumann_mask(self, vix, viy):
        out = np.zeros(len(vix), dtype=bool)
        if self.neumann is None:
            return out
        side, lo, hi = self.neumann
        x = self.domain[0] + vix * (self.h0 / self.scale)
        y = self.domain[2] + viy * (self.h0 / self.scale)
        if side == "top":
            out = (viy == self._nyS) & (x > lo) & (x < hi)
        elif side == "bottom":
            out = (viy == 0) & (x > lo) & (x < hi)
        elif side == "left":
            out = (vix == 0) & (y > lo) & (y < hi)
        elif side == "right":
            out = (vix == self._nxS) & (y > lo) & (y < hi)
        else:
            raise MeshError(f"unknown boundary side {side!r}")
        return out

    def __eq__(self, other):
        return (isinstance(other, QuadMesh)
                and self.domain == other.domain
                and (self.nx, self.ny) == (other.nx, other.ny)
                and self.neumann == other.neumann
                and self.leaf_set == other.leaf_set)

    def __hash__(self):
        return hash((self.domain, self.nx, self.ny, self.neumann, self.leaf_set))

    # -- refinement --------------------------------------------------------

    def refine(self, marks):
        marks = np.asarray(marks)
        if marks.dtype == bool:
            marks = np.flatnonzero(marks)
        if len(marks) and (marks.min() < 0 or marks.max() >= self.n_cells):
            raise MeshError("marked cell index out of range")
        keys = [(int(self.levels[m]), int(self.li[m]), int(self.lj[m])) for m in marks]
        leaves = _refine_closure(self.leaf_set, keys, self.nx, self.ny)
        return QuadMesh(self.domain, self.nx, self.ny, leaves, self.neumann)

    def refine_all(self):
        return self.refine(np.arange(self.n_cells))

    # -- persistence ---------------------------------------------------------

    def serialize(self):
        buf = io.StringIO()
        x0, x1, y0, y1 = self.domain
        buf.write("amlmc-quadmesh 1\n")
        buf.write(f"domain {x0!r} {x1!r} {y0!r} {y1!r}\n")
        buf.write(f"base {self.nx} {self.ny}\n")
        if self.neumann is None:
            buf.write("neumann none\n")
        else:
            s, lo, hi = self.neumann
            buf.write(f"neumann {s} {lo!r} {hi!r}\n")
        buf.write(f"cells {self.n_cells}\n")
        for lev, i, j in zip(self.levels, self.li, self.lj):
            buf.write(f"{lev} {i} {j}\n")
        return buf.getvalue()

    @staticmethod
    def deserialize(text):
        lines = text.strip().splitlines()
        if lines[0].split() != ["amlmc-quadmesh", "1"]:
            raise MeshError("unrecognized mesh header")
        dom = tuple(float(t) for t in lines[1].split()[1:])
        nx, ny = (int(t) for t in lines[2].split()[1:])
        ntoks = lines[3].split()[1:]
        neumann = None if ntoks[0] == "none" else (ntoks[0], float(ntoks[1]), float(ntoks[2]))
        n = int(lines[4].split()[1])
        keys = [tuple(int(t) for t in ln.split()) for ln in lines[5:5 + n]]
        return QuadMesh(dom, nx, ny, keys, neumann)

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.serialize())

    @staticmethod
    def load(path):
        with open(path) as f:
            return QuadMesh.deserialize(f.read())


def _refine_closure(leaf_set, mark_keys, nx, ny):
    """Split marked leaves; force-split coarser edge neighbours to keep 2:1."""
    leaves = set(leaf_set)

    def containing(lev, i, j):
        l, a, b = lev, i, j
        while l >= 0:
            if (l, a, b) in leaves:
                return (l, a, b)
            l -= 1
            a >>= 1
            b >>= 1
        return None

    def split(key):
        stack = [key]
        while stack:
            k = stack[-1]
            if k not in leaves:
                stack.pop()
                continue
            lev, i, j = k
            pending = []
            for ni, nj in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
                if 0 <= ni < (nx << lev) and 0 <= nj < (ny << lev):
                    nb = containing(lev, ni, nj)
                    if nb is not None and nb[0] < lev:
                        pending.append(nb)
            if pending:
                stack.extend(pending)
                continue
            leaves.remove(k)
            for dj in (0, 1):
                for di in (0, 1):
                    leaves.add((lev + 1, 2 * i + di, 2 * j + dj))
            stack.pop()

    for k in mark_keys:
        split(k)
    return leaves


# -- spec-level operations -------------------------------------------------

def new_base_mesh(domain, nx, ny, neumann=None):
    """Uniform nx-by-ny grid of square leaf cells over ``domain``."""
    keys = [(0, i, j) for j in range(ny) for i in range(nx)]
    return QuadMesh(domain, nx, ny, keys, neumann)


def refine_cells(mesh, marks):
    """Quadrisect the marked leaves plus whatever 2:1 balance demands."""
    return mesh.refine(marks)


def smallest_cell_size(mesh):
    return mesh.smallest_cell_size()


def hanging_constraints(mesh):
    """Hanging vertex -> ((master, 1/2), (master, 1/2)) for edge midpoints."""
    key = "constraints"
    if key not in mesh.cache:
        mesh.cache[key] = {v: ((a, 0.5), (b, 0.5))
                           for v, (a, b) in mesh.hanging_masters.items()}
    return mesh.cache[key]


def assemble_lines(mesh):
    """Build the x/y line structures by recursive strip splitting of the tree.

    Groups of tree nodes are split into lower/upper (resp. left/right)
    child stacks until only leaves remain; each leaf then deposits its edge
    corners into the line dictionary, merging lines that share a
    coordinate.
    """
    key = "lines"
    if key in mesh.cache:
        return mesh.cache[key]
    leaf_index = {k: n for n, k in enumerate(mesh.leaf_keys())}
    roots = [(0, i, j) for j in range(mesh.ny) for i in range(mesh.nx)]

    def sweep(axis):
        out = {}
        edges = {}
        stack = [roots]
        while stack:
            group = stack.pop()
            first, second = [], []
            any_child = False
            for k in group:
                if k in leaf_index:
                    first.append(k)
                else:
                    any_child = True
                    lev, i, j = k
                    kids = [(lev + 1, 2 * i + di, 2 * j + dj)
                            for dj in (0, 1) for di in (0, 1)]
                    if axis == "y":
                        first += kids[:2]     # lower pair
                        second += kids[2:]    # upper pair
                    else:
                        first += [kids[0], kids[2]]   # left pair
                        second += [kids[1], kids[3]]  # right pair
            if any_child:
                stack.append(first)
                if second:
                    stack.append(second)
                continue
            for k in group:
                n = leaf_index[k]
                side = int(mesh.iside[n])
                c = mesh.corners[n]
                if axis == "y":
                    lo = int(mesh.lj[n]) * side
                    a0 = int(mesh.li[n]) * side
                    pairs = ((lo, c[0], c[1]), (lo + side, c[2], c[3]))
                else:
                    lo = int(mesh.li[n]) * side
                    a0 = int(mesh.lj[n]) * side
                    pairs = ((lo, c[0], c[2]), (lo + side, c[1], c[3]))
                for coord, va, vb in pairs:
                    line = out.setdefault(coord, {})
                    line[a0] = int(va)
                    line[a0 + side] = int(vb)
                    edges.setdefault(coord, set()).add((a0, a0 + side))
        lines = {}
        runs = []
        for coord, line in sorted(out.items()):
            items = sorted(line.items())
            lines[coord] = np.asarray([v for _, v in items], dtype=np.int64)
            linked = edges[coord]
            start = 0
            for p in range(1, len(items) + 1):
                if p == len(items) or (items[p - 1][0], items[p][0]) not in linked:
                    runs.append((coord, lines[coord][start:p]))
                    start = p
        return lines, runs

    y_lines, y_runs = sweep("y")
    x_lines, x_runs = sweep("x")
    result = LineStructure(y_lines=y_lines, x_lines=x_lines,
                           y_runs=y_runs, x_runs=x_runs)
    mesh.cache[key] = result
    return result
