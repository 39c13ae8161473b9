import math

import numpy as np
import pytest

from mmesh.mesh import SimplicialMesh, build_structured_mesh, perturb_nodes
from mmesh.metric import (MetricField, balancing_function, build_metric, global_scalars, metric_arclength,
                          metric_eigendecomp, metric_hessian, nodal_metrics, normalize_metric, random_spd,
                          recover_gradient, recover_hessian, smooth_metric)


def constant_metric(mesh, M):
    return MetricField.from_tensors(np.broadcast_to(M, (mesh.num_cells, mesh.dim, mesh.dim)).copy(), mesh)


def test_random_spd_eigenvalues_in_range():
    A = random_spd(np.random.default_rng(0), 200, 3, 0.1, 10.0)
    np.testing.assert_allclose(A, np.swapaxes(A, 1, 2))
    eig = np.linalg.eigvalsh(A)
    assert eig.min() >= 0.1 * (1 - 1e-10)
    assert eig.max() <= 10.0 * (1 + 1e-10)


def test_identity_metric_scalars():
    mesh = build_structured_mesh(4, 4)
    metric = constant_metric(mesh, np.eye(2))
    np.testing.assert_allclose(metric.rho, 1.0)
    assert metric.sigma_h == pytest.approx(1.0)
    assert metric.theta == pytest.approx(1.0)


def test_balancing_for_scaled_identity():
    mesh = build_structured_mesh(4, 4)
    metric = constant_metric(mesh, 4.0 * np.eye(2))
    assert metric.sigma_h == pytest.approx(4.0)
    assert metric.theta == pytest.approx(0.25)
    P = balancing_function(metric, mesh, "ours")
    # [M] = sqrt(theta^(-1/2) det(M)^(1/2)) = 2 sqrt 2 and P = [M]^(-1)
    np.testing.assert_allclose(P, 1.0 / (2.0 * math.sqrt(2.0)))
    np.testing.assert_allclose(balancing_function(metric, mesh, "huang", p=1.0), 1.0)
    with pytest.raises(ValueError):
        balancing_function(metric, mesh, "other")


def test_non_spd_metric_is_rejected():
    mesh = build_structured_mesh(2, 2)
    M = np.broadcast_to(np.diag([1.0, -1.0]), (mesh.num_cells, 2, 2)).copy()
    with pytest.raises(ValueError, match="not positive definite"):
        MetricField.from_tensors(M, mesh)


def test_hessian_recovery_is_exact_for_quadratics():
    mesh = perturb_nodes(build_structured_mesh(6, 6), 0.2, np.random.default_rng(2), view='x')
    x, y = mesh.nodes_x[:, 0], mesh.nodes_x[:, 1]
    values = x ** 2 + 3.0 * x * y - y ** 2
    H = recover_hessian(mesh, values)
    np.testing.assert_allclose(H, np.broadcast_to([[2.0, 3.0], [3.0, -2.0]], H.shape), atol=1e-8)


def test_hessian_recovery_of_a_smooth_field():
    mesh = build_structured_mesh(40, 40)
    x = mesh.nodes_x[:, 0]
    H = recover_hessian(mesh, np.sin(np.pi * x))
    exact = np.zeros_like(H)
    exact[:, 0, 0] = -np.pi ** 2 * np.sin(np.pi * x)
    # patches next to the boundary are one-sided
    inner = np.all((mesh.nodes_x >= 0.1 - 1e-12) & (mesh.nodes_x <= 0.9 + 1e-12), axis=1)
    error = np.linalg.norm(H[inner] - exact[inner]) / np.linalg.norm(exact[inner])
    assert error <= 5e-2


def test_gradient_recovery_is_exact_for_linear_fields():
    mesh = build_structured_mesh(3, 3)
    values = 2.0 * mesh.nodes_x[:, 0] - mesh.nodes_x[:, 1]
    np.testing.assert_allclose(recover_gradient(mesh, values), np.broadcast_to([2.0, -1.0], (mesh.num_cells, 2)))


def test_hessian_metric_of_constant_hessian():
    mesh = build_structured_mesh(3, 3)
    H = np.broadcast_to(2.0 * np.eye(2), (mesh.num_nodes, 2, 2))
    metric = metric_hessian(H, mesh)
    np.testing.assert_allclose(metric.M, np.broadcast_to(2.0 * 4.0 ** (-1.0 / 6.0) * np.eye(2), metric.M.shape))


def test_hessian_metric_floors_vanishing_eigenvalues():
    mesh = build_structured_mesh(3, 3)
    H = np.broadcast_to(np.diag([1.0, 0.0]), (mesh.num_nodes, 2, 2))
    metric = metric_hessian(H, mesh, floor=1e-3)
    assert metric.m0 > 0
    assert metric.m1 / metric.m0 == pytest.approx(1e3)


def test_arclength_metric():
    mesh = build_structured_mesh(3, 3)
    grad = np.tile([3.0, 4.0], (mesh.num_cells, 1))
    np.testing.assert_allclose(metric_arclength(grad, 0.0, mesh).M, np.broadcast_to(np.eye(2), (18, 2, 2)))
    np.testing.assert_allclose(metric_arclength(grad, 1.0, mesh).M[0], math.sqrt(26.0) * np.eye(2))


def test_eigen_metric_stretches_along_the_gradient():
    mesh = build_structured_mesh(3, 3)
    grad = np.tile([2.0, 0.0], (mesh.num_cells, 1))
    metric = metric_eigendecomp(grad, 0.5, mesh)
    # uniform psi gives lambda_1 = 1/(1 - beta)
    np.testing.assert_allclose(metric.M[0], np.diag([2.0, 1.0]))
    with pytest.raises(ValueError):
        metric_eigendecomp(grad, 1.0, mesh)


def test_smoothing_keeps_constant_metrics_and_spd():
    mesh = build_structured_mesh(4, 4)
    metric = constant_metric(mesh, np.diag([3.0, 1.0]))
    np.testing.assert_allclose(smooth_metric(metric, mesh, 3).M, metric.M)
    rough = MetricField.from_tensors(random_spd(np.random.default_rng(4), mesh.num_cells, 2), mesh)
    smoothed = smooth_metric(rough, mesh, 2)
    assert np.linalg.eigvalsh(smoothed.M).min() > 0
    assert smoothed.m1 <= rough.m1


def test_smoothing_contracts_toward_a_constant():
    mesh = perturb_nodes(build_structured_mesh(6, 6), 0.2, np.random.default_rng(5), view='x')
    metric = MetricField.from_tensors(random_spd(np.random.default_rng(6), mesh.num_cells, 2, 0.5, 20.0), mesh)
    mean = metric.M.mean(axis=0)
    spread = [np.linalg.norm(metric.M - mean, axis=(1, 2)).max()]
    for _ in range(6):
        metric = smooth_metric(metric, mesh, 1)
        spread.append(np.linalg.norm(metric.M - mean, axis=(1, 2)).max())
    assert all(b <= a * (1 + 1e-12) for a, b in zip(spread, spread[1:]))
    assert spread[-1] < spread[0]


def test_one_sweep_averages_a_checkerboard():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    cells = np.array([[0, 1, 2], [1, 3, 2], [0, 2, 4], [0, 5, 1]])
    mesh = SimplicialMesh(nodes, nodes.copy(), cells, (-1.0, -1.0), (1.0, 1.0))
    M = np.array([np.eye(2), 3.0 * np.eye(2), 3.0 * np.eye(2), 3.0 * np.eye(2)])
    smoothed = smooth_metric(MetricField.from_tensors(M, mesh), mesh, 1)
    np.testing.assert_allclose(smoothed.M[0], 2.5 * np.eye(2))
    np.testing.assert_allclose(smoothed.M[1:], np.broadcast_to(2.0 * np.eye(2), (3, 2, 2)))


def test_global_scalars_for_identity():
    mesh = build_structured_mesh(4, 4)
    sigma, theta, kappa = global_scalars(constant_metric(mesh, np.eye(2)), mesh, 1.25)
    assert sigma == pytest.approx(1.0)
    assert theta == pytest.approx(1.0)
    assert kappa == pytest.approx(2.0 ** -1.25)


@pytest.mark.parametrize("c", [0.3, 2.0, 7.5])
def test_global_scalars_scale_with_the_metric(c):
    mesh = perturb_nodes(build_structured_mesh(5, 5), 0.2, np.random.default_rng(7), view='x')
    M = random_spd(np.random.default_rng(8), mesh.num_cells, 2, 0.5, 5.0)
    sigma, theta, _ = global_scalars(MetricField.from_tensors(M, mesh), mesh, 1.25)
    sigma_c, theta_c, _ = global_scalars(MetricField.from_tensors(c * M, mesh), mesh, 1.25)
    assert sigma_c == pytest.approx(c * sigma, rel=1e-12)
    assert theta_c == pytest.approx(theta / c, rel=1e-12)


def test_global_scalars_undefined_kappa():
    mesh = build_structured_mesh(2, 2)
    # theta = e^2 makes 1 - q ln(theta) negative
    metric = constant_metric(mesh, math.exp(-2.0) * np.eye(2))
    _, theta, kappa = global_scalars(metric, mesh, 1.25)
    assert theta == pytest.approx(math.exp(2.0))
    assert math.isnan(kappa)


def test_nodal_metrics_of_constant_field():
    mesh = build_structured_mesh(3, 3)
    M = np.broadcast_to(np.diag([2.0, 5.0]), (mesh.num_cells, 2, 2))
    np.testing.assert_allclose(nodal_metrics(M, mesh), np.broadcast_to(np.diag([2.0, 5.0]), (16, 2, 2)))


def test_normalize_metric():
    M = np.array([np.diag([4.0, 8.0]), np.diag([2.0, 3.0])])
    N = normalize_metric(M)
    assert np.linalg.eigvalsh(N).min() == pytest.approx(1.0)


def test_build_metric_pipeline():
    mesh = build_structured_mesh(10, 10)
    x, y = mesh.nodes_x[:, 0], mesh.nodes_x[:, 1]
    values = np.tanh(10.0 * (y - 0.5 - 0.1 * np.sin(2 * np.pi * x)))
    metric = build_metric(mesh, values, kind="hessian", gamma=1.25, hessian_floor=1e-3)
    assert math.isfinite(metric.kappa) and metric.kappa > 0
    # normalized to M >= I, then stretched by kappa^(2/d)
    assert metric.m0 == pytest.approx(metric.kappa)
    assert metric.P.shape == (mesh.num_nodes,)
    assert np.all(metric.P > 0)
    with pytest.raises(ValueError):
        build_metric(mesh, values, kind="unknown")


def test_build_metric_without_kappa():
    mesh = build_structured_mesh(4, 4)
    values = mesh.nodes_x[:, 0]
    metric = build_metric(mesh, values, kind="arclength", beta=0.0, apply_kappa=False)
    assert metric.kappa == 1.0
    np.testing.assert_allclose(metric.M, np.broadcast_to(np.eye(2), metric.M.shape))
