import numpy as np
import pytest

from mmesh.interp import PointLocator, locate, star_seeds, transfer
from mmesh.mesh import build_structured_mesh, perturb_nodes


def test_locate_returns_containing_cell():
    mesh = build_structured_mesh(4, 4)
    point = np.array([0.3, 0.6])
    loc = locate(mesh, point)
    assert not loc.clamped
    assert loc.bary.min() >= -1e-12
    assert loc.bary.sum() == pytest.approx(1.0)
    verts = mesh.nodes_x[mesh.cells[loc.cell]]
    np.testing.assert_allclose(loc.bary @ verts, point)


def test_walk_and_exhaustive_search_agree():
    mesh = perturb_nodes(build_structured_mesh(6, 6), 0.2, np.random.default_rng(3), view='x')
    locator = PointLocator(mesh)
    rng = np.random.default_rng(4)
    for p in rng.uniform(0.0, 1.0, size=(50, 2)):
        walked = locator.locate(p, seed=int(rng.integers(mesh.num_cells)))
        verts = mesh.nodes_x[mesh.cells[walked.cell]]
        np.testing.assert_allclose(walked.bary @ verts, p, atol=1e-12)
        assert walked.bary.min() >= -1e-10


def test_transfer_reproduces_linear_fields():
    src = perturb_nodes(build_structured_mesh(5, 5), 0.2, np.random.default_rng(0), view='x')
    values = np.column_stack([1.0 + 2.0 * src.nodes_x[:, 0] - src.nodes_x[:, 1], src.nodes_x[:, 1]])
    points = np.random.default_rng(1).uniform(0.0, 1.0, size=(40, 2))
    out = transfer(src, values, points)
    np.testing.assert_allclose(out[:, 0], 1.0 + 2.0 * points[:, 0] - points[:, 1], atol=1e-12)
    np.testing.assert_allclose(out[:, 1], points[:, 1], atol=1e-12)


def test_transfer_in_computational_view():
    mesh = build_structured_mesh(3, 3)
    moved = mesh.with_coordinates(nodes_xi=mesh.nodes_xi * 2.0)
    out = transfer(moved, mesh.nodes_x, np.array([[1.0, 1.0], [2.0, 0.5]]), view='xi')
    np.testing.assert_allclose(out, [[0.5, 0.5], [1.0, 0.25]], atol=1e-12)


def test_points_outside_are_clamped():
    mesh = build_structured_mesh(2, 2)
    loc = locate(mesh, np.array([1.5, 0.5]))
    assert loc.clamped
    assert loc.bary.min() >= 0.0
    assert loc.bary.sum() == pytest.approx(1.0)
    value = transfer(mesh, mesh.nodes_x[:, 0], np.array([[1.5, 0.5]]))
    assert value[0] == pytest.approx(1.0)


def test_points_on_the_boundary_are_not_clamped():
    mesh = build_structured_mesh(2, 2)
    loc = locate(mesh, np.array([1.0 + 1e-12, 0.5]))
    assert not loc.clamped


def test_star_seeds_are_incident_cells():
    mesh = build_structured_mesh(4, 3)
    seeds = star_seeds(mesh)
    assert seeds.shape == (mesh.num_nodes,)
    for node, cell in enumerate(seeds):
        assert node in mesh.cells[cell]
