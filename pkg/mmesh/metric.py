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

"""Metric tensor construction, smoothing, global scalars and balancing."""

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sp

from .mesh import (SimplicialMesh, barycentric_gradients, cell_neighbors, cell_volumes,
                   edge_matrix_batch, node_adjacency, star_incidence)

logger = logging.getLogger(__name__)

METRIC_KINDS = ("hessian", "arclength", "eigen")
BALANCING_KINDS = ("ours", "huang")

# Absolute Hessian eigenvalue floor when the recovered Hessian vanishes everywhere
HESSIAN_ABS_FLOOR = 1e-12


@dataclass
class MetricField:
    """Per-cell SPD metric with the global quantities derived from it.

    Args:
        M: (NC, d, d) metric tensors
        rho: (NC,) sqrt(det M_K)
        sigma_h: sum of |K| rho_K over physical volumes
        theta: (sigma_h / |Omega_c|)^(-2/d)
        kappa: stretching factor applied to the normalized metric (1.0 if none)
        P: (N,) nodal balancing weights, filled by build_metric()
        m0, m1: smallest and largest eigenvalue over all cells
    """
    M: np.ndarray
    rho: np.ndarray
    sigma_h: float
    theta: float
    kappa: float = 1.0
    P: Optional[np.ndarray] = None
    m0: float = 0.0
    m1: float = 0.0

    @classmethod
    def from_tensors(cls, M: np.ndarray, mesh: SimplicialMesh, kappa: float = 1.0) -> 'MetricField':
        M = 0.5 * (M + np.swapaxes(M, 1, 2))
        eig = np.linalg.eigvalsh(M)
        if np.any(eig[:, 0] <= 0):
            bad = int(np.argmin(eig[:, 0]))
            raise ValueError(f"metric of cell {bad} is not positive definite (min eigenvalue {eig[bad, 0]:.3e})")
        rho = np.sqrt(np.linalg.det(M))
        sigma_h, theta = _sigma_theta(rho, mesh)
        return cls(M=M, rho=rho, sigma_h=sigma_h, theta=theta, kappa=kappa,
                   m0=float(eig[:, 0].min()), m1=float(eig[:, -1].max()))

    @property
    def num_cells(self) -> int:
        return self.M.shape[0]


def _sigma_theta(rho: np.ndarray, mesh: SimplicialMesh) -> Tuple[float, float]:
    vol = cell_volumes(mesh.nodes_x, mesh.cells)
    omega_c = float(np.sum(cell_volumes(mesh.nodes_xi, mesh.cells)))
    sigma_h = float(np.sum(vol * rho))
    theta = (sigma_h / omega_c) ** (-2.0 / mesh.dim)
    return sigma_h, theta


def random_spd(rng: np.random.Generator, n: int, d: int,
               low: float = 1e-3, high: float = 1e3) -> np.ndarray:
    """(n, d, d) SPD matrices with log-uniform eigenvalues in [low, high] and random axes."""
    lam = np.exp(rng.uniform(np.log(low), np.log(high), size=(n, d)))
    Q, R = np.linalg.qr(rng.standard_normal((n, d, d)))
    Q = Q * np.sign(np.diagonal(R, axis1=1, axis2=2))[:, None, :]
    A = np.einsum('kij,kj,klj->kil', Q, lam, Q)
    return 0.5 * (A + np.swapaxes(A, 1, 2))


def recover_gradient(mesh: SimplicialMesh, values: np.ndarray) -> np.ndarray:
    """Per-cell gradient of the P1 interpolant on the physical mesh."""
    V = barycentric_gradients(edge_matrix_batch(mesh.nodes_x, mesh.cells))
    return np.einsum('kja,kj->ka', V, np.asarray(values, dtype=float)[mesh.cells])


def _quadratic_basis(dx: np.ndarray) -> np.ndarray:
    d = dx.shape[1]
    cols = [np.ones(dx.shape[0])]
    cols.extend(dx[:, a] for a in range(d))
    cols.extend(dx[:, a] * dx[:, b] for a in range(d) for b in range(a, d))
    return np.column_stack(cols)


def recover_hessian(mesh: SimplicialMesh, values: np.ndarray, max_ring: int = 3) -> np.ndarray:
    """Nodal Hessians from local quadratic least-squares fits.

    The patch of node i is its 2-ring; a rank-deficient patch is widened to
    the 3-ring, and a node whose patch stays deficient gets the identity.
    """
    values = np.asarray(values, dtype=float)
    d = mesh.dim
    ncols = 1 + d + d * (d + 1) // 2
    adjacency = node_adjacency(mesh)
    rings = {1: adjacency}
    for k in range(2, max_ring + 1):
        ring = (rings[k - 1] @ adjacency).tocsr()
        ring.data[:] = 1.0
        rings[k] = ring

    H = np.zeros((mesh.num_nodes, d, d))
    fallbacks = 0
    for i in range(mesh.num_nodes):
        fitted = False
        for k in range(2, max_ring + 1):
            row = rings[k]
            patch = row.indices[row.indptr[i]:row.indptr[i + 1]]
            if patch.size < ncols:
                continue
            dx = mesh.nodes_x[patch] - mesh.nodes_x[i]
            h = float(np.max(np.abs(dx)))
            phi = _quadratic_basis(dx / h)
            coef, _, rank, _ = np.linalg.lstsq(phi, values[patch], rcond=None)
            if rank < ncols:
                logger.debug(f"Hessian patch of node {i} rank-deficient at ring {k}")
                continue
            q = coef[1 + d:]
            pos = 0
            for a in range(d):
                for b in range(a, d):
                    if a == b:
                        H[i, a, a] = 2.0 * q[pos] / h ** 2
                    else:
                        H[i, a, b] = H[i, b, a] = q[pos] / h ** 2
                    pos += 1
            fitted = True
            break
        if not fitted:
            H[i] = np.eye(d)
            fallbacks += 1
    if fallbacks:
        logger.warning(f"Hessian recovery fell back to identity at {fallbacks} node(s)")
    return H


def metric_hessian(H: np.ndarray, mesh: SimplicialMesh, floor: float = 1e-8) -> MetricField:
    """M_K = det(|H_K|)^(-1/(d+4)) |H_K| from vertex-averaged nodal Hessians.

    Eigenvalues of |H_K| are floored at floor * (largest |eigenvalue| over the
    mesh), or at an absolute 1e-12 when the Hessian vanishes everywhere.
    """
    d = mesh.dim
    Hc = np.asarray(H, dtype=float)[mesh.cells].mean(axis=1)
    Hc = 0.5 * (Hc + np.swapaxes(Hc, 1, 2))
    lam, Q = np.linalg.eigh(Hc)
    lam = np.abs(lam)
    top = float(lam.max()) if lam.size else 0.0
    eps = floor * top if top > 0 else HESSIAN_ABS_FLOOR
    lam = np.maximum(lam, eps)
    det = np.prod(lam, axis=1)
    scaled = lam * det[:, None] ** (-1.0 / (d + 4))
    M = np.einsum('kij,kj,klj->kil', Q, scaled, Q)
    return MetricField.from_tensors(M, mesh)


def metric_arclength(grad: np.ndarray, beta: float, mesh: SimplicialMesh) -> MetricField:
    """Isotropic M_K = sqrt(1 + beta |grad u_K|^2) I."""
    if beta < 0:
        raise ValueError(f"arc-length beta must be >= 0, got {beta}")
    grad = np.asarray(grad, dtype=float)
    scale = np.sqrt(1.0 + beta * np.sum(grad ** 2, axis=1))
    M = scale[:, None, None] * np.eye(mesh.dim)
    return MetricField.from_tensors(M, mesh)


def metric_eigendecomp(grad: np.ndarray, beta: float, mesh: SimplicialMesh) -> MetricField:
    """Anisotropic metric stretched along the gradient direction (d = 2).

    lambda_1 = 1 + alpha * psi along v = grad/|grad| with psi = sqrt(1+|grad|^2) - 1
    and alpha = beta / (<psi> (1 - beta)); the transverse eigenvalue is 1.
    """
    if mesh.dim != 2:
        raise ValueError("eigen-decomposition metric is defined for d = 2 only")
    if not 0.0 < beta < 1.0:
        raise ValueError(f"eigen-decomposition beta must lie in (0, 1), got {beta}")
    grad = np.asarray(grad, dtype=float)
    norm = np.linalg.norm(grad, axis=1)
    psi = np.sqrt(1.0 + norm ** 2) - 1.0
    vol = cell_volumes(mesh.nodes_x, mesh.cells)
    mean_psi = float(np.sum(vol * psi) / np.sum(vol))
    if mean_psi <= 0.0:
        return MetricField.from_tensors(np.broadcast_to(np.eye(2), (mesh.num_cells, 2, 2)).copy(), mesh)

    alpha = beta / (mean_psi * (1.0 - beta))
    lam1 = 1.0 + alpha * psi
    v = np.tile([1.0, 0.0], (mesh.num_cells, 1))
    ok = norm >= 1e-12
    v[ok] = grad[ok] / norm[ok, None]
    vperp = np.column_stack([-v[:, 1], v[:, 0]])
    M = lam1[:, None, None] * np.einsum('ki,kj->kij', v, v) + np.einsum('ki,kj->kij', vperp, vperp)
    return MetricField.from_tensors(M, mesh)


def smoothing_operator(mesh: SimplicialMesh) -> sp.csr_matrix:
    """Row-stochastic |K|-weighted averaging over each cell and its facet neighbours."""
    nc = mesh.num_cells
    vol = np.abs(cell_volumes(mesh.nodes_x, mesh.cells))
    neighbors = cell_neighbors(mesh.cells)
    rows = [np.arange(nc)]
    cols = [np.arange(nc)]
    for local in range(neighbors.shape[1]):
        has = neighbors[:, local] >= 0
        rows.append(np.flatnonzero(has))
        cols.append(neighbors[has, local])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    W = sp.csr_matrix((vol[cols], (rows, cols)), shape=(nc, nc))
    inv_row = 1.0 / np.asarray(W.sum(axis=1)).ravel()
    return sp.diags(inv_row) @ W


def smooth_metric(metric: MetricField, mesh: SimplicialMesh, sweeps: int = 2) -> MetricField:
    """Apply `sweeps` passes of neighbour averaging (convex combinations keep SPD)."""
    if sweeps < 0:
        raise ValueError(f"smoothing sweeps must be >= 0, got {sweeps}")
    if sweeps == 0:
        return metric
    d = mesh.dim
    W = smoothing_operator(mesh)
    flat = metric.M.reshape(mesh.num_cells, d * d)
    for _ in range(sweeps):
        flat = W @ flat
    return MetricField.from_tensors(flat.reshape(-1, d, d), mesh, kappa=metric.kappa)


def global_scalars(metric: MetricField, mesh: SimplicialMesh, gamma: float) -> Tuple[float, float, float]:
    """(sigma_h, theta, kappa) for the given metric.

    kappa = (d^q theta^q (1 - q ln theta))^-1 with q = d*gamma/2; it is NaN when
    the bracket is not positive.
    """
    d = mesh.dim
    rho = np.sqrt(np.linalg.det(metric.M))
    sigma_h, theta = _sigma_theta(rho, mesh)
    q = d * gamma / 2.0
    denom = d ** q * theta ** q * (1.0 - q * math.log(theta))
    kappa = 1.0 / denom if denom > 0 else float('nan')
    return sigma_h, theta, kappa


def nodal_metrics(M: np.ndarray, mesh: SimplicialMesh) -> np.ndarray:
    """|K|-weighted average of the cell metrics over each node's element star."""
    d = mesh.dim
    vol = np.abs(cell_volumes(mesh.nodes_x, mesh.cells))
    S = star_incidence(mesh)
    weights = np.repeat(vol, d + 1)
    weighted = (np.repeat(M, d + 1, axis=0) * weights[:, None, None]).reshape(-1, d * d)
    total = S @ weights
    return (S @ weighted).reshape(-1, d, d) / total[:, None, None]


def balancing_function(metric: MetricField, mesh: SimplicialMesh, kind: str = "ours",
                       p: float = 1.0) -> np.ndarray:
    """Nodal balancing weights P_i.

    ours:  P_i = [M_i]^(-d/2), [M] = sqrt(theta^(-1/2) det(M)^(1/d))
    huang: P_i = det(M_i)^((p-1)/2)
    """
    d = mesh.dim
    det = np.linalg.det(nodal_metrics(metric.M, mesh))
    if kind == "ours":
        bracket = np.sqrt(metric.theta ** -0.5 * det ** (1.0 / d))
        return bracket ** (-d / 2.0)
    if kind == "huang":
        return det ** ((p - 1.0) / 2.0)
    raise ValueError(f"unknown balancing kind '{kind}'")


def normalize_metric(M: np.ndarray) -> np.ndarray:
    """Scale so that the smallest eigenvalue over all cells is one (M >= I)."""
    m0 = float(np.linalg.eigvalsh(M)[:, 0].min())
    return M / m0


def build_metric(mesh: SimplicialMesh, values: np.ndarray, kind: str = "hessian", beta: float = 0.0,
                 smoothing_sweeps: int = 2, apply_kappa: bool = True, gamma: float = 1.25,
                 balancing: str = "ours", p: float = 1.0, hessian_floor: float = 1e-8) -> MetricField:
    """Full metric pipeline: construct, smooth, normalize, stretch by kappa, balance."""
    if kind == "hessian":
        metric = metric_hessian(recover_hessian(mesh, values), mesh, floor=hessian_floor)
    elif kind == "arclength":
        metric = metric_arclength(recover_gradient(mesh, values), beta, mesh)
    elif kind == "eigen":
        metric = metric_eigendecomp(recover_gradient(mesh, values), beta, mesh)
    else:
        raise ValueError(f"unknown metric kind '{kind}'")

    metric = smooth_metric(metric, mesh, smoothing_sweeps)
    M = normalize_metric(metric.M)
    kappa = 1.0
    if apply_kappa:
        _, theta, k = global_scalars(MetricField.from_tensors(M, mesh), mesh, gamma)
        if math.isfinite(k) and k > 0:
            kappa = k
            M = kappa ** (2.0 / mesh.dim) * M
        else:
            logger.warning(f"Stretching factor undefined for theta={theta:.4g}; metric left unscaled")

    metric = MetricField.from_tensors(M, mesh, kappa=kappa)
    P = balancing_function(metric, mesh, balancing, p)
    metric = replace(metric, P=P)
    logger.debug(f"Metric ({kind}): sigma_h={metric.sigma_h:.6g} theta={metric.theta:.6g} "
                 f"kappa={kappa:.6g} m0={metric.m0:.4g} m1={metric.m1:.4g}")
    return metric
