#
# Copyright 2025 The mmesh contributors.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
#

"""Element and global gradients of the discrete functional (xi-view and x-view)."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
import scipy.sparse as sp

from .functionals import (CheckReport, FunctionalParams, element_energies, metric_arrays, pullback_core,
                          pullbacks, t_and_derivs_batch)
from .mesh import (CORNER, EDGE, INTERIOR, ElementGeometry, SimplicialMesh, apply_r, barycentric_gradients,
                   edge_matrix_batch, element_geometry, element_stars, star_incidence)
from .metric import MetricField, random_spd

logger = logging.getLogger(__name__)

# Cells per task when element work is spread over threads
CHUNK_CELLS = 4096


@dataclass
class ElementGradient:
    """Per-element derivative data.

    g_xi rows are dI_K/dxi_j for local vertices j = 0..d (without the |K|
    factor); v_x rows are the x-view velocities.
    """
    g_xi: Optional[np.ndarray] = None
    v_x: Optional[np.ndarray] = None
    Q: Optional[np.ndarray] = None
    U: Optional[np.ndarray] = None
    T: Optional[np.ndarray] = None


@dataclass
class GradientField:
    """Assembled nodal gradient with its boundary-projected flow velocity."""
    g: np.ndarray
    constrained: np.ndarray
    rhs: Optional[np.ndarray] = None


def xi_kernel(Ehat: np.ndarray, B: np.ndarray, rho: np.ndarray,
              params: FunctionalParams) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched (g_xi, Q, T) with g_xi = 2 rho R Ehat^-1 Q."""
    A = pullbacks(Ehat, B)
    alpha = np.linalg.det(A)
    T, dA, dalpha = t_and_derivs_batch(A, alpha, params)
    d = A.shape[-1]
    Q = A @ dA + (alpha * dalpha)[:, None, None] * np.eye(d)
    g = 2.0 * rho[:, None, None] * apply_r(np.linalg.solve(Ehat, Q))
    return g, Q, T


def element_gradients_xi(Ehat: np.ndarray, B: np.ndarray, rho: np.ndarray, params: FunctionalParams,
                         threads: int = 1) -> ElementGradient:
    """xi-view element gradients for all cells, optionally split over a thread pool.

    Chunks are contiguous and concatenated in order, so the result does not
    depend on the thread count.
    """
    nc = Ehat.shape[0]
    if threads <= 1 or nc <= CHUNK_CELLS:
        g, Q, T = xi_kernel(Ehat, B, rho, params)
        return ElementGradient(g_xi=g, Q=Q, T=T)

    bounds = [(s, min(s + CHUNK_CELLS, nc)) for s in range(0, nc, CHUNK_CELLS)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda b: xi_kernel(Ehat[b[0]:b[1]], B[b[0]:b[1]], rho[b[0]:b[1]], params), bounds))
    return ElementGradient(g_xi=np.concatenate([p[0] for p in parts]),
                           Q=np.concatenate([p[1] for p in parts]),
                           T=np.concatenate([p[2] for p in parts]))


def element_grad_xi(geom: ElementGeometry, M_K: np.ndarray, params: FunctionalParams) -> ElementGradient:
    """xi-view gradient of a single element (geometry from mesh.edge_matrices)."""
    M_K = np.asarray(M_K, dtype=float)
    B = pullback_core(np.asarray(geom.E)[None], M_K[None])
    rho = np.sqrt(np.linalg.det(M_K))
    g, Q, T = xi_kernel(np.asarray(geom.Ehat)[None], B, np.array([rho]), params)
    return ElementGradient(g_xi=g[0], Q=Q[0], T=T[0])


def element_W(geom: ElementGeometry, M_K: np.ndarray, params: FunctionalParams) -> np.ndarray:
    """(d+1) x (d+1) matrix W_K = 2 rho R Ehat^-1 Q Ehat^-T R^T.

    W_K applied to the element's computational coordinates (rows = vertices)
    reproduces g_xi.
    """
    grad = element_grad_xi(geom, M_K, params)
    rho = np.sqrt(np.linalg.det(np.asarray(M_K, dtype=float)))
    Ehat_inv = np.linalg.inv(np.asarray(geom.Ehat))
    inner = 2.0 * rho * Ehat_inv @ grad.Q @ Ehat_inv.T
    return apply_r(apply_r(inner).T).T


def x_kernel(E: np.ndarray, Ehat: np.ndarray, M: np.ndarray, rho: np.ndarray, params: FunctionalParams,
             vertex_metrics: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched x-view (v, U, dG/dM).

    U = J(-T/2 I + Q)J^-1, dG/dM = -rho U M^-1 and
    v = 2 rho V U - (e u^T) V / (d+1) with u_j = tr(dG/dM M_j).
    """
    d = E.shape[-1]
    B = pullback_core(E, M)
    A = pullbacks(Ehat, B)
    alpha = np.linalg.det(A)
    T, dA, dalpha = t_and_derivs_batch(A, alpha, params)
    eye = np.eye(d)
    Q = A @ dA + (alpha * dalpha)[:, None, None] * eye
    J = E @ np.linalg.inv(Ehat)
    U = J @ (-0.5 * T[:, None, None] * eye + Q) @ np.linalg.inv(J)
    dG_dM = -rho[:, None, None] * U @ np.linalg.inv(M)
    V = barycentric_gradients(E)
    v = 2.0 * rho[:, None, None] * V @ U
    if vertex_metrics is not None:
        u = np.einsum('kab,kjba->kj', dG_dM, vertex_metrics)
        v = v - (u[:, :, None] * V).sum(axis=1, keepdims=True) / (d + 1)
    return v, U, dG_dM


def element_velocity_x(geom: ElementGeometry, M_K: np.ndarray, params: FunctionalParams,
                       vertex_metrics: Optional[np.ndarray] = None) -> ElementGradient:
    """x-view velocity rows and U for one element.

    vertex_metrics, when given, holds the (d+1, d, d) metrics at the element
    vertices; without them every vertex carries M_K and the u-term vanishes.
    """
    M_K = np.asarray(M_K, dtype=float)
    rho = np.sqrt(np.linalg.det(M_K))
    vm = None if vertex_metrics is None else np.asarray(vertex_metrics, dtype=float)[None]
    v, U, _ = x_kernel(np.asarray(geom.E)[None], np.asarray(geom.Ehat)[None], M_K[None],
                       np.array([rho]), params, vm)
    return ElementGradient(v_x=v[0], U=U[0])


def metric_derivative(geom: ElementGeometry, M_K: np.ndarray, params: FunctionalParams) -> np.ndarray:
    """dG/dM_K = -rho U M_K^-1 for one element (symmetric)."""
    M_K = np.asarray(M_K, dtype=float)
    rho = np.sqrt(np.linalg.det(M_K))
    _, _, dG = x_kernel(np.asarray(geom.E)[None], np.asarray(geom.Ehat)[None], M_K[None],
                        np.array([rho]), params)
    return dG[0]


def lemma_identities_check(samples: int = 100, d: int = 2, rng: Optional[np.random.Generator] = None,
                           step: float = 1e-6) -> CheckReport:
    """Finite-difference check of the two trace-derivative identities.

    d tr(G A M A^T)/dA^T = 2 M A^T G and d tr(G A M^-1 A^T)/dM = -M^-1 A^T G A M^-1
    for symmetric G and SPD M.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    failing = None
    for n in range(samples):
        A = rng.standard_normal((d, d))
        G = rng.standard_normal((d, d))
        G = 0.5 * (G + G.T)
        M = random_spd(rng, 1, d, 0.5, 2.0)[0]

        closed_a = (2.0 * M @ A.T @ G).T
        closed_m = -np.linalg.inv(M) @ A.T @ G @ A @ np.linalg.inv(M)
        fd_a = np.zeros((d, d))
        fd_m = np.zeros((d, d))
        for i in range(d):
            for j in range(d):
                dE = np.zeros((d, d))
                dE[i, j] = step
                fd_a[i, j] = (np.trace(G @ (A + dE) @ M @ (A + dE).T)
                              - np.trace(G @ (A - dE) @ M @ (A - dE).T)) / (2 * step)
                fd_m[i, j] = (np.trace(G @ A @ np.linalg.inv(M + dE) @ A.T)
                              - np.trace(G @ A @ np.linalg.inv(M - dE) @ A.T)) / (2 * step)
        err = max(np.abs(fd_a - closed_a).max() / max(np.abs(closed_a).max(), 1e-300),
                  np.abs(fd_m - closed_m).max() / max(np.abs(closed_m).max(), 1e-300))
        if err > worst:
            worst = float(err)
            failing = {"sample": n, "A": A.tolist(), "G": G.tolist(), "M": M.tolist()}
    tol = 1e-6
    passed = worst <= tol
    return CheckReport(name="lemma_identities", passed=passed, samples=samples, max_error=worst,
                       tolerance=tol, failing_sample=None if passed else failing)


def project_boundary(g: np.ndarray, mesh: SimplicialMesh) -> np.ndarray:
    """Zero corner rows and remove the face-normal component of edge rows."""
    out = np.array(g, dtype=float).reshape(mesh.num_nodes, mesh.dim)
    out[mesh.boundary_kind == CORNER] = 0.0
    edge = np.flatnonzero(mesh.boundary_kind == EDGE)
    out[edge, mesh.boundary_face[edge] // 2] = 0.0
    return out


def assemble_global(mesh: SimplicialMesh, g_xi: np.ndarray, P: Optional[np.ndarray] = None, tau: float = 1.0,
                    vol: Optional[np.ndarray] = None, incidence: Optional[sp.csr_matrix] = None) -> GradientField:
    """Star-sum |K| g_xi into nodal gradients, then form rhs = -(P/tau) projected g.

    `g` is the unprojected gradient of I_h; `rhs` carries the boundary projection.
    """
    d = mesh.dim
    if vol is None:
        vol = element_geometry(mesh, check=False).vol
    S = incidence if incidence is not None else star_incidence(mesh)
    weighted = (vol[:, None, None] * g_xi).reshape(-1, d)
    g = np.asarray(S @ weighted)
    P = np.ones(mesh.num_nodes) if P is None else np.asarray(P, dtype=float)
    rhs = -(P / tau)[:, None] * project_boundary(g, mesh)
    return GradientField(g=g, constrained=mesh.boundary_kind != INTERIOR, rhs=rhs)


def gradient_xi(mesh: SimplicialMesh, metric: Union[MetricField, np.ndarray], params: FunctionalParams,
                threads: int = 1) -> np.ndarray:
    """Unprojected dI_h/dxi at every node."""
    geom = element_geometry(mesh)
    M, rho = metric_arrays(metric)
    grad = element_gradients_xi(geom.Ehat, pullback_core(geom.E, M), rho, params, threads)
    return assemble_global(mesh, grad.g_xi, vol=geom.vol).g


def assemble_x_view(mesh: SimplicialMesh, metric: Union[MetricField, np.ndarray], params: FunctionalParams,
                    vertex_metrics: Optional[np.ndarray] = None) -> GradientField:
    """x-view gradient dI_h/dx_i = -sum_K |K| v_j^K with boundary projection in `rhs`.

    vertex_metrics is an optional (N, d, d) nodal metric field; each element
    then uses the metrics of its own vertices for the u-term.
    """
    geom = element_geometry(mesh)
    M, rho = metric_arrays(metric)
    vm = None if vertex_metrics is None else np.asarray(vertex_metrics, dtype=float)[mesh.cells]
    v, _, _ = x_kernel(geom.E, geom.Ehat, M, rho, params, vm)
    field = assemble_global(mesh, -v, vol=geom.vol)
    field.rhs = -project_boundary(field.g, mesh)
    return field


def gradient_consistency_check(mesh: SimplicialMesh, metric: Union[MetricField, np.ndarray],
                               params: FunctionalParams, rel_step: float = 1e-7,
                               tol: float = 1e-6) -> CheckReport:
    """Compare the assembled xi-gradient with central differences of energy().

    Every coordinate a node may move along is checked: all of them for
    interior nodes, the tangential ones for edge nodes. Only the cells of the
    node's star change, so the difference of I_h is taken over the star.
    """
    M, rho = metric_arrays(metric)
    g = gradient_xi(mesh, M, params)
    geom = element_geometry(mesh)
    B = pullback_core(geom.E, M)
    edges = np.linalg.norm(mesh.nodes_xi[mesh.cells[:, 1:]] - mesh.nodes_xi[mesh.cells[:, :1]], axis=2)
    local_h = np.zeros(mesh.num_nodes)
    np.maximum.at(local_h, mesh.cells.ravel(), np.repeat(edges.min(axis=1), mesh.dim + 1))
    stars = element_stars(mesh)

    def star_energy(i: int, xi: np.ndarray) -> float:
        cells = np.asarray(stars[i])
        Ehat = edge_matrix_batch(xi, mesh.cells[cells])
        return float(np.sum(element_energies(Ehat, B[cells], rho[cells], geom.vol[cells], params)))

    free = project_boundary(np.ones_like(mesh.nodes_xi), mesh) > 0
    fd = np.zeros_like(g)
    for i, a in zip(*np.nonzero(free)):
        h = rel_step * local_h[i]
        xi = mesh.nodes_xi.copy()
        xi[i, a] += h
        up = star_energy(i, xi)
        xi[i, a] -= 2 * h
        down = star_energy(i, xi)
        fd[i, a] = (up - down) / (2 * h)

    scale = max(float(np.abs(g[free]).max()), np.finfo(float).tiny)
    err = float(np.abs(fd[free] - g[free]).max()) / scale
    passed = err <= tol
    report = CheckReport(name=f"gradient_consistency[{params.kind}]", passed=passed, samples=int(free.sum()),
                         max_error=err, tolerance=tol)
    if not passed:
        i, a = np.unravel_index(int(np.argmax(np.abs(fd - g) * free)), g.shape)
        report.failing_sample = {"node": int(i), "axis": int(a), "assembled": float(g[i, a]), "fd": float(fd[i, a])}
        logger.warning(f"Gradient mismatch at node {i} axis {a}: {g[i, a]:.6e} vs {fd[i, a]:.6e}")
    return report
