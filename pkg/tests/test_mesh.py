import numpy as np
import pytest

from amlmc.mesh import (QuadMesh, MeshError, new_base_mesh, refine_cells,
                        assemble_lines, hanging_constraints, smallest_cell_size)

PAPER_DOMAIN = (-1.0, 1.0, -1.0, 0.0)
NEUMANN = ("top", -1.0, 0.0)


def brute_force_balanced(mesh):
    """Oracle: exhaustive pairwise edge-neighbour level-gap check."""
    keys = mesh.leaf_keys()
    S = mesh.scale
    boxes = [(i * (S >> l), j * (S >> l), S >> l, l) for l, i, j in keys]
    for a in range(len(boxes)):
        ax, ay, asz, al = boxes[a]
        for b in range(a + 1, len(boxes)):
            bx, by, bsz, bl = boxes[b]
            touch_x = (ax + asz == bx or bx + bsz == ax) and \
                min(ay + asz, by + bsz) > max(ay, by)
            touch_y = (ay + asz == by or by + bsz == ay) and \
                min(ax + asz, bx + bsz) > max(ax, bx)
            if (touch_x or touch_y) and abs(al - bl) > 1:
                return False
    return True


def random_refined(seed, rounds=4, base=None):
    mesh = base or new_base_mesh(PAPER_DOMAIN, 4, 2, neumann=NEUMANN)
    rng = np.random.default_rng(seed)
    for _ in range(rounds):
        marks = rng.choice(mesh.n_cells, size=max(1, mesh.n_cells // 5), replace=False)
        mesh = mesh.refine(marks)
    return mesh


def test_base_mesh_2x1_counts():
    m = new_base_mesh(PAPER_DOMAIN, 2, 1)
    assert m.n_cells == 2
    assert m.n_vertices == 6
    assert np.allclose(m.h, 1.0)


def test_base_mesh_4x2_counts():
    m = new_base_mesh(PAPER_DOMAIN, 4, 2)
    assert m.n_cells == 8
    assert m.n_vertices == 15


def test_base_mesh_rejects_bad_grid():
    with pytest.raises(MeshError):
        new_base_mesh(PAPER_DOMAIN, 0, 1)
    with pytest.raises(MeshError):
        new_base_mesh(PAPER_DOMAIN, 3, 1)   # non-square cells
    with pytest.raises(MeshError):
        new_base_mesh((0.0, 1.0, 1.0, 1.0), 1, 1)


def test_dirichlet_tags_paper_domain():
    m = new_base_mesh(PAPER_DOMAIN, 4, 2, neumann=NEUMANN)
    x, y = m.xy[:, 0], m.xy[:, 1]
    inner_neumann = (np.abs(y) < 1e-14) & (x > -1.0) & (x < 0.0)
    # the boundary splits into the open Neumann segment and everything else;
    # the interface points carry the Dirichlet value of the continuous trace
    on_bnd = (np.abs(x + 1) < 1e-14) | (np.abs(x - 1) < 1e-14) | \
             (np.abs(y + 1) < 1e-14) | (np.abs(y) < 1e-14)
    assert np.array_equal(m.dirichlet, on_bnd & ~inner_neumann)
    assert m.dirichlet[np.flatnonzero((np.abs(x) < 1e-14) & (np.abs(y) < 1e-14))].all()


def test_refine_single_cell():
    m = new_base_mesh(PAPER_DOMAIN, 2, 1)
    m2 = refine_cells(m, [0])
    assert m2.n_cells == 5
    assert len(m2.hanging_masters) == 1
    (v, (a, b)), = m2.hanging_masters.items()
    assert np.allclose(sorted(m2.xy[[a, b], 1]), [-1.0, 0.0])


def test_refine_all_has_no_hanging():
    m = new_base_mesh(PAPER_DOMAIN, 4, 2).refine_all()
    assert m.n_cells == 32
    assert not m.hanging_masters


def test_balance_closure_refines_coarse_neighbour():
    m = new_base_mesh(PAPER_DOMAIN, 2, 1)
    # drill three levels in one corner; the coarse neighbour must split too
    for _ in range(3):
        m = m.refine([0])
    assert brute_force_balanced(m)
    assert m.levels.max() - m.levels.min() >= 2   # depth contrast survives


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_random_refinement_stays_balanced(seed):
    assert brute_force_balanced(random_refined(seed))


def test_smallest_cell_size():
    m = new_base_mesh((0.0, 1.0, 0.0, 1.0), 4, 4)
    assert smallest_cell_size(m) == 0.25
    assert smallest_cell_size(m.refine([0])) == 0.125
    assert smallest_cell_size(new_base_mesh(PAPER_DOMAIN, 2, 1)) == 1.0


def test_lines_uniform_4x2():
    m = new_base_mesh(PAPER_DOMAIN, 4, 2)
    lines = assemble_lines(m)
    assert len(lines.y_lines) == 3
    assert all(len(v) == 5 for v in lines.y_lines.values())
    assert len(lines.x_lines) == 5
    assert all(len(v) == 3 for v in lines.x_lines.values())


def test_lines_single_cell():
    m = new_base_mesh((0.0, 1.0, 0.0, 1.0), 1, 1)
    lines = assemble_lines(m)
    assert len(lines.y_lines) == 2
    assert all(len(v) == 2 for v in lines.y_lines.values())


def test_hanging_vertex_lands_in_its_line():
    m = refine_cells(new_base_mesh(PAPER_DOMAIN, 2, 1), [1])
    lines = assemble_lines(m)
    (v, _), = m.hanging_masters.items()
    y_int = m.verts_i[v, 1]
    assert v in lines.y_lines[y_int].tolist()
    assert np.isclose(m.y_of(y_int), -0.5)


@pytest.mark.parametrize("seed", [0, 5])
def test_lines_partition_and_sorted(seed):
    m = random_refined(seed)
    lines = assemble_lines(m)
    # oracle: direct enumeration of vertices grouped by coordinate
    for table, key_col, sort_col in ((lines.y_lines, 1, 0), (lines.x_lines, 0, 1)):
        seen = []
        for coord, vids in table.items():
            assert np.array_equal(m.verts_i[vids, key_col],
                                  np.full(len(vids), coord))
            assert np.all(np.diff(m.verts_i[vids, sort_col]) > 0)
            seen.extend(vids.tolist())
        assert sorted(seen) == list(range(m.n_vertices))
        groups = {}
        for v in range(m.n_vertices):
            groups.setdefault(m.verts_i[v, key_col], set()).add(v)
        assert {c: set(v.tolist()) for c, v in table.items()} == groups


def test_constraints_empty_on_conforming():
    assert hanging_constraints(new_base_mesh(PAPER_DOMAIN, 4, 2)) == {}


def test_constraint_weights_are_halves():
    m = refine_cells(new_base_mesh(PAPER_DOMAIN, 2, 1), [0])
    cons = hanging_constraints(m)
    assert len(cons) == 1
    (v, masters), = cons.items()
    assert masters[0][1] == 0.5 and masters[1][1] == 0.5
    mid = 0.5 * (m.xy[masters[0][0]] + m.xy[masters[1][0]])
    assert np.allclose(mid, m.xy[v])


@pytest.mark.parametrize("seed", [0, 1, 7])
def test_no_constraint_chains(seed):
    m = random_refined(seed, rounds=5)
    cons = hanging_constraints(m)
    hanging = set(cons)
    for v, masters in cons.items():
        for master, _ in masters:
            assert master not in hanging


def test_serialization_round_trip(tmp_path):
    m = random_refined(3)
    path = tmp_path / "mesh.txt"
    m.save(path)
    m2 = QuadMesh.load(path)
    assert m2 == m
    assert m2.n_vertices == m.n_vertices
    assert np.array_equal(m2.dirichlet, m.dirichlet)
    assert m.serialize() == m2.serialize()


def test_refine_marks_out_of_range():
    m = new_base_mesh(PAPER_DOMAIN, 2, 1)
    with pytest.raises(MeshError):
        m.refine([7])
