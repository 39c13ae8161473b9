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

"""Mesh quality measures, element lower bounds and interpolation errors."""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np

from .functionals import FunctionalParams, coercivity_constants, metric_arrays
from .mesh import (SimplicialMesh, barycentric_gradients, element_geometry, inscribed_diameters,
                   min_heights_in_metric)
from .metric import MetricField

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 50

# Degree-4 six-point triangle rule: (weight, barycentric point); weights sum to one
_DUNAVANT_4 = (
    (0.223381589678011, (0.108103018168070, 0.445948490915965, 0.445948490915965)),
    (0.109951743655322, (0.816847572980459, 0.091576213509771, 0.091576213509771)),
)


def _triangle_rule() -> Tuple[np.ndarray, np.ndarray]:
    weights, points = [], []
    for w, (a, b, c) in _DUNAVANT_4:
        for perm in ((a, b, c), (b, c, a), (c, a, b)):
            weights.append(w)
            points.append(perm)
    return np.array(weights), np.array(points)


@dataclass
class QualityReport:
    """Global (RMS) and per-cell quality measures of the physical mesh.

    Q_eq,K = |K| rho_K / (sigma_h / NC) with the physical volume |K|.
    per_cell holds Q_eq,K, 1/Q_ali,K and Q_geo,K.
    """
    q_eq: float
    q_ali: float
    q_geo: float
    min_vol: float
    min_height: float
    num_cells: int
    per_cell: Dict[str, np.ndarray] = field(default_factory=dict)
    e_L2: Optional[float] = None
    e_H1: Optional[float] = None


def alignment_measure(J: np.ndarray, M: Optional[np.ndarray] = None) -> np.ndarray:
    """tr(J^T M J) / (d det(J^T M J)^(1/d)) per cell; >= 1 with equality iff J^T M J = cI."""
    d = J.shape[-1]
    JT = np.swapaxes(J, -2, -1)
    C = JT @ J if M is None else JT @ M @ J
    tr = np.trace(C, axis1=-2, axis2=-1)
    return tr / (d * np.linalg.det(C) ** (1.0 / d))


def _rms(values: np.ndarray) -> float:
    return float(np.sqrt(np.mean(values ** 2)))


def quality_metrics(mesh: SimplicialMesh, metric: Union[MetricField, np.ndarray]) -> QualityReport:
    """Q_eq, Q_ali and Q_geo of the physical mesh in the given metric.

    Q_eq uses physical cell volumes; Q_ali and Q_geo use the Jacobian of the
    map from the computational to the physical cell.
    """
    geom = element_geometry(mesh)
    M, rho = metric_arrays(metric)
    nc = mesh.num_cells
    sigma_h = float(np.sum(geom.vol * rho))
    q_eq = geom.vol * rho / (sigma_h / nc)
    q_ali = alignment_measure(geom.J, M)
    q_geo = alignment_measure(geom.J)
    heights = min_heights_in_metric(geom.E, M)
    return QualityReport(
        q_eq=_rms(q_eq), q_ali=_rms(q_ali), q_geo=_rms(q_geo),
        min_vol=float(geom.vol.min()), min_height=float(heights.min()), num_cells=nc,
        per_cell={"q_eq": q_eq, "inv_q_ali": 1.0 / q_ali, "q_geo": q_geo},
    )


def quality_histograms(report: QualityReport, bins: int = HISTOGRAM_BINS) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """(counts, edges) per per-cell measure, uniform bins over [min, max]."""
    out = {}
    for name, values in report.per_cell.items():
        lo, hi = float(values.min()), float(values.max())
        out[name] = np.histogram(values, bins=bins, range=(lo, hi) if hi > lo else None)
    return out


@dataclass
class SizeBounds:
    """Lower bounds on the metric height a_K,M and volume |K| along the flow."""
    C1: float
    C2: float
    r0: float
    alpha: float
    beta: float
    a_bound: float
    vol_bound: float


def reference_simplex(d: int) -> Tuple[float, float]:
    """(h_hat, a_hat) of the regular simplex with unit edge: diameter and minimum height."""
    return 1.0, math.sqrt((d + 1) / (2.0 * d))


def corollary_bounds(params: FunctionalParams, mesh0: SimplicialMesh, metric: Union[MetricField, np.ndarray],
                     I_h0: float) -> SizeBounds:
    """Evaluate the element-size lower bounds from the coercivity constants.

    alpha = c0 m0^(d/2) and beta = m1^(d/2) C with m0, m1 the extreme metric
    eigenvalues; r0 = (smallest inscribed diameter of the computational mesh) * NC^(1/d).
    """
    if not params.gamma > 1.0:
        raise ValueError(f"bounds require gamma > 1, got {params.gamma}")
    d = mesh0.dim
    gamma = params.gamma
    M, _ = metric_arrays(metric)
    eig = np.linalg.eigvalsh(M)
    m0, m1 = float(eig[:, 0].min()), float(eig[:, -1].max())
    c0, C = coercivity_constants(params, d)
    alpha = c0 * m0 ** (d / 2.0)
    beta = m1 ** (d / 2.0) * max(C, 0.0)
    h_hat, a_hat = reference_simplex(d)
    nc = mesh0.num_cells

    geom = element_geometry(mesh0)
    r0 = float(inscribed_diameters(geom.Ehat).min()) * nc ** (1.0 / d)
    omega_p = float(np.sum(geom.vol))
    C1 = (alpha * a_hat ** (4 * gamma) / (math.factorial(d) * h_hat ** (4 * gamma) * (beta * omega_p + I_h0))) \
        ** (1.0 / (4 * gamma - d))
    C2 = C1 ** d / math.factorial(d)
    a_bound = C1 * r0 ** (gamma / (gamma - 1)) * m1 ** (-1.0 / (2 * (gamma - 1))) * nc ** (-gamma / (d * gamma - d))
    vol_bound = (C2 * r0 ** (d * gamma / (gamma - 1)) * m1 ** (-d / (2 * (gamma - 1)) - d / 2.0)
                 * nc ** (-gamma / (gamma - 1)))
    return SizeBounds(C1=C1, C2=C2, r0=r0, alpha=alpha, beta=beta, a_bound=a_bound, vol_bound=vol_bound)


def interp_error(mesh: SimplicialMesh, fn: Callable[[np.ndarray], np.ndarray], degree: str = "L2",
                 grad_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                 values: Optional[np.ndarray] = None) -> float:
    """Error of the P1 interpolant of fn on the physical mesh.

    degree is 'L2' or 'H1' (full norm, needs grad_fn). Nodal values default to
    fn at the nodes. Triangles only.
    """
    if mesh.dim != 2:
        raise NotImplementedError("interpolation error quadrature is implemented for triangles only")
    if degree not in ("L2", "H1"):
        raise ValueError(f"degree must be 'L2' or 'H1', got '{degree}'")
    if degree == "H1" and grad_fn is None:
        raise ValueError("H1 error needs the analytic gradient")

    geom = element_geometry(mesh, check=False)
    area = np.abs(geom.vol)
    u = np.asarray(fn(mesh.nodes_x) if values is None else values, dtype=float)
    weights, bary = _triangle_rule()
    verts = mesh.nodes_x[mesh.cells]
    qp = np.einsum('qj,kja->kqa', bary, verts)
    exact = np.asarray(fn(qp.reshape(-1, 2)), dtype=float).reshape(qp.shape[:2])
    approx = np.einsum('qj,kj->kq', bary, u[mesh.cells])
    total = np.sum(area * np.einsum('q,kq->k', weights, (exact - approx) ** 2))

    if degree == "H1":
        V = barycentric_gradients(geom.E)
        grad_h = np.einsum('kja,kj->ka', V, u[mesh.cells])
        grad_exact = np.asarray(grad_fn(qp.reshape(-1, 2)), dtype=float).reshape(qp.shape[0], qp.shape[1], 2)
        diff = np.sum((grad_exact - grad_h[:, None, :]) ** 2, axis=2)
        total += np.sum(area * np.einsum('q,kq->k', weights, diff))
    return float(np.sqrt(total))
