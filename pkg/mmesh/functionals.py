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

"""Mesh functionals written on the pullback A = J^-1 M^-1 J^-T and their checks."""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .mesh import SimplicialMesh, element_geometry, perturb_nodes
from .metric import MetricField, random_spd

logger = logging.getLogger(__name__)

PROPOSED = "proposed"
HUANG = "huang"
KOLASINSKI_HUANG = "kolasinski_huang"
FUNCTIONAL_KINDS = (PROPOSED, HUANG, KOLASINSKI_HUANG)


@dataclass(frozen=True)
class FunctionalParams:
    """Functional selection and parameters.

    Args:
        kind: One of FUNCTIONAL_KINDS
        gamma: Exponent, > 1
        mu: Alignment/equidistribution weight of the Huang functional, in [0, 1]
        theta: Combined scaling (sigma_h/|Omega_c|)^(-2/d), > 0
    """
    kind: str = PROPOSED
    gamma: float = 1.25
    mu: float = 1.0 / 3.0
    theta: float = 1.0

    def __post_init__(self):
        if self.kind not in FUNCTIONAL_KINDS:
            raise ValueError(f"unknown functional kind '{self.kind}' (expected one of {', '.join(FUNCTIONAL_KINDS)})")
        if not self.gamma > 1.0:
            raise ValueError(f"gamma must be > 1, got {self.gamma}")
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError(f"mu must lie in [0, 1], got {self.mu}")
        if not self.theta > 0.0:
            raise ValueError(f"theta must be > 0, got {self.theta}")

    def q(self, d: int) -> float:
        return d * self.gamma / 2.0

    def with_theta(self, theta: float) -> 'FunctionalParams':
        return replace(self, theta=float(theta))

    def scale_exponent(self, d: int) -> float:
        """Exponent e with I[xi; cM] = c^e I[xi; M] + b(c)."""
        if self.kind == KOLASINSKI_HUANG:
            return d / 2.0 - 2.0 * self.gamma
        return d / 2.0 - self.q(d)


@dataclass
class APullback:
    A: np.ndarray
    alpha: float
    trA: float

    @classmethod
    def from_matrix(cls, A: np.ndarray) -> 'APullback':
        A = np.asarray(A, dtype=float)
        if not np.allclose(A, A.T, rtol=0.0, atol=1e-12 * max(1.0, float(np.abs(A).max()))):
            raise ValueError("A must be symmetric")
        alpha = float(np.linalg.det(A))
        if alpha <= 0.0:
            raise ValueError(f"det(A) must be > 0, got {alpha:.3e}")
        return cls(A=A, alpha=alpha, trA=float(np.trace(A)))

    @classmethod
    def from_jacobian(cls, J: np.ndarray, M: np.ndarray) -> 'APullback':
        Jinv = np.linalg.inv(J)
        A = Jinv @ np.linalg.inv(M) @ Jinv.T
        return cls.from_matrix(0.5 * (A + A.T))


@dataclass
class TDerivs:
    T: float
    dT_dA: np.ndarray
    dT_dalpha: float


def t_and_derivs_batch(A: np.ndarray, alpha: np.ndarray,
                       params: FunctionalParams) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """T, dT/dA and dT/dalpha for a stack of pullbacks A with shape (n, d, d)."""
    d = A.shape[-1]
    q = params.q(d)
    gamma, theta = params.gamma, params.theta
    eye = np.eye(d)
    tr = np.trace(A, axis1=-2, axis2=-1)

    if params.kind == PROPOSED:
        if np.any(alpha <= 0):
            raise ValueError("det(A) must be > 0 for the proposed functional")
        coef = d ** q * (gamma / 2.0) * theta ** q
        T = tr ** q - coef * np.log(alpha)
        dA = (q * tr ** (q - 1.0))[:, None, None] * eye
        dalpha = -coef / alpha
    elif params.kind == HUANG:
        mu = params.mu
        T = mu * tr ** q + (1.0 - 2.0 * mu) * d ** q * alpha ** (gamma / 2.0)
        dA = (mu * q * tr ** (q - 1.0))[:, None, None] * eye
        dalpha = (1.0 - 2.0 * mu) * d ** q * (gamma / 2.0) * alpha ** (gamma / 2.0 - 1.0)
    else:
        D = A - theta * eye
        F = np.sqrt(np.sum(D * D, axis=(-2, -1)))
        T = F ** (2.0 * gamma)
        dA = (2.0 * gamma * F ** (2.0 * gamma - 2.0))[:, None, None] * D
        dalpha = np.zeros_like(tr)
    return T, dA, dalpha


def t_and_derivs(A: Union[APullback, np.ndarray], params: FunctionalParams) -> TDerivs:
    """T(A, alpha) and its partial derivatives for one pullback."""
    if not isinstance(A, APullback):
        A = APullback.from_matrix(A)
    T, dA, dalpha = t_and_derivs_batch(A.A[None], np.array([A.alpha]), params)
    return TDerivs(T=float(T[0]), dT_dA=dA[0], dT_dalpha=float(dalpha[0]))


def basic_kernel(A: np.ndarray, theta: float) -> float:
    """tr(A) - theta ln det(A); minimized over fixed det(A) at A = theta I."""
    A = np.asarray(A, dtype=float)
    sign, logdet = np.linalg.slogdet(A)
    if sign <= 0:
        raise ValueError("det(A) must be > 0")
    return float(np.trace(A) - theta * logdet)


def metric_arrays(metric: Union[MetricField, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """(M, rho) from a MetricField or a raw (NC, d, d) tensor stack."""
    if isinstance(metric, MetricField):
        return metric.M, metric.rho
    M = np.asarray(metric, dtype=float)
    return M, np.sqrt(np.linalg.det(M))


def pullback_core(E: np.ndarray, M: np.ndarray) -> np.ndarray:
    """B = E^-1 M^-1 E^-T, so that A = Ehat B Ehat^T for any computational edge matrix Ehat."""
    Einv = np.linalg.inv(E)
    B = Einv @ np.linalg.inv(M) @ np.swapaxes(Einv, 1, 2)
    return 0.5 * (B + np.swapaxes(B, 1, 2))


def pullbacks(Ehat: np.ndarray, B: np.ndarray) -> np.ndarray:
    A = Ehat @ B @ np.swapaxes(Ehat, 1, 2)
    return 0.5 * (A + np.swapaxes(A, 1, 2))


def energy(mesh: SimplicialMesh, metric: Union[MetricField, np.ndarray], params: FunctionalParams) -> float:
    """Discrete functional I_h = sum_K |K| rho_K T(A_K, alpha_K) with physical |K|."""
    geom = element_geometry(mesh)
    M, rho = metric_arrays(metric)
    A = pullbacks(geom.Ehat, pullback_core(geom.E, M))
    T, _, _ = t_and_derivs_batch(A, np.linalg.det(A), params)
    return float(np.sum(geom.vol * rho * T))


@dataclass
class CheckReport:
    """Outcome of a numerical property check."""
    name: str
    passed: bool
    samples: int
    max_error: float
    tolerance: float
    detail: str = ""
    failing_sample: Optional[Dict] = None
    values: Dict[str, float] = field(default_factory=dict)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = f"{status} {self.name}: {self.samples} samples, max error {self.max_error:.3e} (tol {self.tolerance:.1e})"
        if self.detail:
            text += f" - {self.detail}"
        return text


def coercivity_constants(params: FunctionalParams, d: int) -> Tuple[float, float]:
    """(c0, C) with T(A) >= c0 tr(A)^(d gamma/2) - C for every SPD A.

    Proposed: C(c, theta) = d^q theta^q (ln(theta^q/(1-c)) - 1) and
    c0 = 1 - eps/2 with eps = min(1, theta^q/e). Huang with mu <= 1/2: (mu, 0).
    """
    q = params.q(d)
    if params.kind == PROPOSED:
        tq = params.theta ** q
        eps = min(1.0, tq / math.e)
        c0 = 1.0 - eps / 2.0
        C = d ** q * tq * (math.log(tq / (1.0 - c0)) - 1.0)
        return c0, C
    if params.kind == HUANG and params.mu <= 0.5:
        return params.mu, 0.0
    raise ValueError(f"no explicit coercivity constants for kind '{params.kind}' (mu={params.mu})")


def coercivity_check(samples: int, params: FunctionalParams, d: int = 2,
                     rng: Optional[np.random.Generator] = None) -> CheckReport:
    """Sample random SPD A and verify T(A) >= c0 tr(A)^q - C."""
    if not params.gamma > 1.0:
        raise ValueError(f"coercivity requires gamma > 1, got {params.gamma}")
    rng = rng if rng is not None else np.random.default_rng(0)
    c0, C = coercivity_constants(params, d)
    q = params.q(d)
    A = random_spd(rng, samples, d)
    A = np.concatenate([A, params.theta * np.eye(d)[None]], axis=0)
    T, _, _ = t_and_derivs_batch(A, np.linalg.det(A), params)
    tr = np.trace(A, axis1=1, axis2=2)
    lower = c0 * tr ** q - C
    slack = T - lower
    scale = np.maximum(np.abs(T), tr ** q)
    tol = 1e-10
    violation = -slack / scale
    worst = int(np.argmax(violation))
    passed = bool(violation[worst] <= tol)
    report = CheckReport(
        name=f"coercivity[{params.kind}]", passed=passed, samples=A.shape[0],
        max_error=float(max(violation[worst], 0.0)), tolerance=tol,
        detail=f"c0={c0:.6g} C={C:.6g}", values={"c0": c0, "C": C},
    )
    if not passed:
        report.failing_sample = {"A": A[worst].tolist(), "T": float(T[worst]), "bound": float(lower[worst])}
        logger.warning(f"Coercivity bound violated: T={T[worst]:.6g} < {lower[worst]:.6g}")
    return report


def scale_invariance_check(mesh: SimplicialMesh, metric: Union[MetricField, np.ndarray], c: float,
                           params: FunctionalParams, configurations: int = 3,
                           rng: Optional[np.random.Generator] = None, amplitude: float = 0.2) -> CheckReport:
    """Verify I[xi; cM] = a I[xi; M] + b over several computational meshes.

    b must not depend on xi, and the assembled gradients must scale by a.
    theta follows the metric: theta(cM) = theta(M)/c.
    """
    from .assembly import gradient_xi

    if not c > 0:
        raise ValueError(f"scale factor must be > 0, got {c}")
    if configurations < 3:
        raise ValueError("at least three configurations are needed for the affine fit")
    rng = rng if rng is not None else np.random.default_rng(0)
    d = mesh.dim
    M, _ = metric_arrays(metric)
    a = c ** params.scale_exponent(d)
    scaled_params = params.with_theta(params.theta / c)

    meshes: List[SimplicialMesh] = [mesh]
    while len(meshes) < configurations:
        meshes.append(perturb_nodes(mesh, amplitude, rng, view='xi'))

    offsets = []
    grad_err = 0.0
    energies = []
    for m in meshes:
        base = energy(m, M, params)
        scaled = energy(m, c * M, scaled_params)
        energies.append(base)
        offsets.append(scaled - a * base)
        g = gradient_xi(m, M, params)
        gs = gradient_xi(m, c * M, scaled_params)
        denom = max(float(np.abs(a * g).max()), np.finfo(float).tiny)
        grad_err = max(grad_err, float(np.abs(gs - a * g).max()) / denom)

    spread = float(max(offsets) - min(offsets))
    ref = max(abs(e) for e in energies)
    affine_err = spread / ref
    tol = 1e-10
    passed = affine_err <= tol and grad_err <= tol
    report = CheckReport(
        name=f"scale_invariance[{params.kind}, c={c:g}]", passed=passed, samples=len(meshes),
        max_error=max(affine_err, grad_err), tolerance=tol,
        detail=f"a={a:.6g} b={offsets[0]:.6g} affine={affine_err:.2e} gradient={grad_err:.2e}",
        values={"a": a, "b": float(offsets[0])},
    )
    if not passed:
        logger.warning(f"Scale invariance violated: {report.detail}")
    return report


def element_energies(Ehat: np.ndarray, B: np.ndarray, rho: np.ndarray, vol: np.ndarray,
                     params: FunctionalParams) -> np.ndarray:
    """Per-cell |K| rho_K T_K for frozen B, rho and physical volumes."""
    A = pullbacks(Ehat, B)
    T, _, _ = t_and_derivs_batch(A, np.linalg.det(A), params)
    return vol * rho * T
