import numpy as np
import pytest

from mmesh.assembly import (assemble_global, assemble_x_view, element_grad_xi, element_gradients_xi,
                            element_velocity_x, element_W, gradient_consistency_check, gradient_xi,
                            lemma_identities_check, metric_derivative, project_boundary)
from mmesh.functionals import FUNCTIONAL_KINDS, PROPOSED, FunctionalParams, energy, pullback_core
from mmesh.mesh import CORNER, EDGE, build_structured_mesh, edge_matrices, element_geometry, perturb_nodes
from mmesh.metric import MetricField, random_spd


def random_problem(seed, n=4):
    rng = np.random.default_rng(seed)
    mesh = perturb_nodes(build_structured_mesh(n, n), 0.2, rng, view='x')
    mesh = perturb_nodes(mesh, 0.2, rng, view='xi')
    return mesh, MetricField.from_tensors(random_spd(rng, mesh.num_cells, 2, 0.5, 5.0), mesh)


def params_for(kind, theta):
    return FunctionalParams(kind=kind, gamma=1.25 if kind == PROPOSED else 1.5, theta=theta)


def test_uniform_mesh_with_identity_metric_is_stationary():
    mesh = build_structured_mesh(8, 8)
    M = np.broadcast_to(np.eye(2), (mesh.num_cells, 2, 2))
    g = gradient_xi(mesh, M, FunctionalParams(kind=PROPOSED, gamma=1.25, theta=1.0))
    assert np.abs(g).max() <= 1e-12 * mesh.diameter


def test_x_view_is_stationary_on_uniform_mesh():
    mesh = build_structured_mesh(6, 6)
    M = np.broadcast_to(np.eye(2), (mesh.num_cells, 2, 2))
    field = assemble_x_view(mesh, M, FunctionalParams(kind=PROPOSED, gamma=1.25, theta=1.0))
    assert np.abs(field.rhs).max() <= 1e-12


def test_element_gradient_rows_sum_to_zero():
    mesh, metric = random_problem(1)
    geom = edge_matrices(mesh, 3)
    grad = element_grad_xi(geom, metric.M[3], params_for(PROPOSED, metric.theta))
    assert grad.g_xi.shape == (3, 2)
    np.testing.assert_allclose(grad.g_xi.sum(axis=0), 0.0, atol=1e-12 * np.abs(grad.g_xi).max())


def test_element_w_reproduces_gradient():
    mesh, metric = random_problem(2)
    params = params_for(PROPOSED, metric.theta)
    geom = edge_matrices(mesh, 5)
    W = element_W(geom, metric.M[5], params)
    xi = mesh.nodes_xi[mesh.cells[5]]
    np.testing.assert_allclose(W @ xi, element_grad_xi(geom, metric.M[5], params).g_xi, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(W, W.T, rtol=1e-10, atol=1e-12)


def test_threaded_assembly_matches_serial(monkeypatch):
    import mmesh.assembly as assembly
    monkeypatch.setattr(assembly, "CHUNK_CELLS", 7)
    mesh, metric = random_problem(3)
    geom = element_geometry(mesh)
    B = pullback_core(geom.E, metric.M)
    params = params_for(PROPOSED, metric.theta)
    serial = element_gradients_xi(geom.Ehat, B, metric.rho, params, threads=1)
    threaded = element_gradients_xi(geom.Ehat, B, metric.rho, params, threads=4)
    np.testing.assert_allclose(threaded.g_xi, serial.g_xi, rtol=1e-14, atol=0.0)


@pytest.mark.parametrize("kind", FUNCTIONAL_KINDS)
def test_gradient_matches_finite_differences(kind):
    for seed in range(4):
        mesh, metric = random_problem(100 + seed)
        report = gradient_consistency_check(mesh, metric, params_for(kind, metric.theta))
        assert report.passed, report.summary()


def test_lemma_identities():
    report = lemma_identities_check(samples=20, rng=np.random.default_rng(0))
    assert report.passed, report.summary()


def test_project_boundary():
    mesh = build_structured_mesh(3, 3)
    g = project_boundary(np.ones((mesh.num_nodes, 2)), mesh)
    assert np.all(g[mesh.boundary_kind == CORNER] == 0.0)
    edge = np.flatnonzero(mesh.boundary_kind == EDGE)
    axis = mesh.boundary_face[edge] // 2
    assert np.all(g[edge, axis] == 0.0)
    assert np.all(g[edge, 1 - axis] == 1.0)


def test_assemble_global_rhs_uses_balancing():
    mesh, metric = random_problem(4)
    geom = element_geometry(mesh)
    params = params_for(PROPOSED, metric.theta)
    grad = element_gradients_xi(geom.Ehat, pullback_core(geom.E, metric.M), metric.rho, params)
    P = np.linspace(0.5, 2.0, mesh.num_nodes)
    field = assemble_global(mesh, grad.g_xi, P=P, tau=0.01, vol=geom.vol)
    np.testing.assert_allclose(field.rhs, -(P / 0.01)[:, None] * project_boundary(field.g, mesh))
    np.testing.assert_allclose(field.g, gradient_xi(mesh, metric, params))


def test_x_view_gradient_matches_finite_differences():
    mesh, metric = random_problem(5)
    params = params_for(PROPOSED, metric.theta)
    g = assemble_x_view(mesh, metric.M, params).g
    node = int(np.flatnonzero(mesh.boundary_kind == 0)[0])
    step = 1e-6
    for axis in range(2):
        x = mesh.nodes_x.copy()
        x[node, axis] += step
        up = energy(mesh.with_coordinates(nodes_x=x), metric.M, params)
        x[node, axis] -= 2 * step
        down = energy(mesh.with_coordinates(nodes_x=x), metric.M, params)
        assert (up - down) / (2 * step) == pytest.approx(g[node, axis], rel=1e-5, abs=1e-8)


def test_x_view_velocity_rows_sum_to_zero_without_vertex_metrics():
    mesh, metric = random_problem(6)
    geom = edge_matrices(mesh, 0)
    v = element_velocity_x(geom, metric.M[0], params_for(PROPOSED, metric.theta)).v_x
    np.testing.assert_allclose(v.sum(axis=0), 0.0, atol=1e-10 * np.abs(v).max())


def test_metric_derivative_matches_finite_differences():
    mesh, metric = random_problem(7)
    params = params_for(PROPOSED, metric.theta)
    geom = edge_matrices(mesh, 2)
    M = metric.M[2]
    dG = metric_derivative(geom, M, params)

    def G(Mk):
        from mmesh.functionals import t_and_derivs
        Jinv = np.linalg.inv(geom.J)
        A = Jinv @ np.linalg.inv(Mk) @ Jinv.T
        return np.sqrt(np.linalg.det(Mk)) * t_and_derivs(0.5 * (A + A.T), params).T

    H = np.array([[0.3, -0.2], [-0.2, 0.5]])
    step = 1e-6
    fd = (G(M + step * H) - G(M - step * H)) / (2 * step)
    assert fd == pytest.approx(np.sum(dG * H), rel=1e-6)


def affine_metric(points):
    x, y = points[:, 0], points[:, 1]
    M = np.zeros((len(points), 2, 2))
    M[:, 0, 0] = 2.0 + x
    M[:, 1, 1] = 1.5 + y
    M[:, 0, 1] = M[:, 1, 0] = 0.3 * x - 0.2 * y
    return M


def test_x_view_gradient_with_vertex_metrics_matches_finite_differences():
    rng = np.random.default_rng(11)
    mesh = perturb_nodes(build_structured_mesh(4, 4), 0.2, rng, view='x')

    def cell_metric(nodes_x):
        return affine_metric(nodes_x[mesh.cells].mean(axis=1))

    M = cell_metric(mesh.nodes_x)
    params = params_for(PROPOSED, MetricField.from_tensors(M, mesh).theta)
    g = assemble_x_view(mesh, M, params, vertex_metrics=affine_metric(mesh.nodes_x)).g
    frozen = assemble_x_view(mesh, M, params).g
    node = int(np.flatnonzero(mesh.boundary_kind == 0)[0])
    step = 1e-6
    for axis in range(2):
        x = mesh.nodes_x.copy()
        x[node, axis] += step
        up = energy(mesh.with_coordinates(nodes_x=x), cell_metric(x), params)
        x[node, axis] -= 2 * step
        down = energy(mesh.with_coordinates(nodes_x=x), cell_metric(x), params)
        assert (up - down) / (2 * step) == pytest.approx(g[node, axis], rel=1e-5, abs=1e-8)
    assert np.abs(g[node] - frozen[node]).max() > 1e-6


def test_constant_vertex_metrics_leave_velocity_unchanged():
    mesh, metric = random_problem(12)
    params = params_for(PROPOSED, metric.theta)
    geom = edge_matrices(mesh, 4)
    M_K = metric.M[4]
    plain = element_velocity_x(geom, M_K, params).v_x
    with_vertices = element_velocity_x(geom, M_K, params, vertex_metrics=np.broadcast_to(M_K, (3, 2, 2))).v_x
    np.testing.assert_allclose(with_vertices, plain, rtol=1e-10, atol=1e-12)
