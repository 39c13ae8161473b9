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

"""Matrix-free Newton-Krylov with quasi-Newton (DFP / good Broyden) operator updates."""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.sparse.linalg import LinearOperator, aslinearoperator

from .errors import DegenerateCellError, MeshError, SolverError

logger = logging.getLogger(__name__)

# Curvature guard: DFP needs s^T t > CURVATURE_EPS |s| |t|
CURVATURE_EPS = 1e-10
ARMIJO_C = 1e-4
MAX_BACKTRACKS = 20


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    converged: bool
    breakdown: bool
    residual_norm: float


def cg_solve(A, b: np.ndarray, tol: float = 1e-8, maxit: Optional[int] = None,
             x0: Optional[np.ndarray] = None) -> CGResult:
    """Conjugate gradients on a symmetric operator.

    Stops when |b - Ax| <= tol |b|. A direction with p^T A p <= 0 ends the
    iteration early with the current iterate and breakdown=True.
    """
    A = aslinearoperator(A)
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    maxit = maxit if maxit is not None else 10 * n
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return CGResult(x=np.zeros(n), iterations=0, converged=True, breakdown=False, residual_norm=0.0)

    r = b - A.matvec(x) if x0 is not None else b.copy()
    p = r.copy()
    rr = float(r @ r)
    target = tol * bnorm
    for k in range(maxit):
        if np.sqrt(rr) <= target:
            return CGResult(x=x, iterations=k, converged=True, breakdown=False, residual_norm=float(np.sqrt(rr)))
        Ap = A.matvec(p)
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            logger.debug(f"CG breakdown at iteration {k}: p^T A p = {pAp:.3e}")
            return CGResult(x=x, iterations=k, converged=False, breakdown=True, residual_norm=float(np.sqrt(rr)))
        step = rr / pAp
        x = x + step * p
        r = r - step * Ap
        rr_new = float(r @ r)
        p = r + (rr_new / rr) * p
        rr = rr_new
    res = float(np.sqrt(rr))
    return CGResult(x=x, iterations=maxit, converged=res <= target, breakdown=False, residual_norm=res)


def base_matvec(v: np.ndarray, xi: np.ndarray, fun: Callable[[np.ndarray], np.ndarray], h: float,
                weight: Optional[np.ndarray] = None) -> np.ndarray:
    """weight * v - h * (directional derivative of fun at xi along v).

    The derivative is a central difference with step 1e-7 (1 + |xi|) / |v|;
    if a perturbed point is not admissible the step is shrunk once.
    """
    v = np.asarray(v, dtype=float)
    vnorm = float(np.linalg.norm(v))
    if vnorm == 0.0:
        return np.zeros_like(v)
    eps = 1e-7 * (1.0 + float(np.linalg.norm(xi))) / vnorm
    try:
        jv = (fun(xi + eps * v) - fun(xi - eps * v)) / (2.0 * eps)
    except MeshError:
        eps *= 1e-3
        jv = (fun(xi + eps * v) - fun(xi - eps * v)) / (2.0 * eps)
    wv = v if weight is None else weight * v
    return wv - h * jv


class QuasiNewtonOperator(LinearOperator):
    """J_NT = base + low-rank secant corrections.

    DFP:     J + t t^T/(s^T t) - w w^T/(s^T w)   with w = J s
    Broyden: J + (t - w) s^T/(s^T s)
    The base operator is assumed symmetric; DFP keeps the sum symmetric.
    """

    def __init__(self, base: LinearOperator, curvature_eps: float = CURVATURE_EPS):
        self.base = aslinearoperator(base)
        self.curvature_eps = curvature_eps
        self.terms: List[Tuple[str, np.ndarray, np.ndarray, float]] = []
        self.symmetric = True
        super().__init__(dtype=np.dtype(float), shape=self.base.shape)

    def _matvec(self, v):
        v = np.ravel(v)
        y = self.base.matvec(v)
        for kind, a, b, denom in self.terms:
            if kind == 'dfp':
                # a = t, b = w, denom = (s^T t, s^T w)
                y = y + a * (a @ v) / denom[0] - b * (b @ v) / denom[1]
            else:
                # a = t - w, b = s
                y = y + a * (b @ v) / denom
        return y

    def _rmatvec(self, v):
        v = np.ravel(v)
        y = self.base.matvec(v)
        for kind, a, b, denom in self.terms:
            if kind == 'dfp':
                y = y + a * (a @ v) / denom[0] - b * (b @ v) / denom[1]
            else:
                y = y + b * (a @ v) / denom
        return y

    def update(self, s: np.ndarray, t: np.ndarray) -> str:
        """Apply the secant update for the pair (s, t); returns 'dfp', 'broyden' or 'skip'."""
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        snorm, tnorm = float(np.linalg.norm(s)), float(np.linalg.norm(t))
        if snorm == 0.0:
            return 'skip'
        w = self.matvec(s)
        if np.linalg.norm(t - w) <= 1e-14 * max(tnorm, 1e-300):
            return 'skip'
        st = float(s @ t)
        sw = float(s @ w)
        if st > self.curvature_eps * snorm * tnorm and sw > 0.0:
            self.terms.append(('dfp', t.copy(), w.copy(), (st, sw)))
            return 'dfp'
        self.terms.append(('broyden', t - w, s.copy(), snorm ** 2))
        self.symmetric = False
        return 'broyden'

    def symmetrized(self) -> LinearOperator:
        """(A + A^T)/2, used for CG after a Broyden update."""
        return LinearOperator(self.shape, matvec=lambda v: 0.5 * (self._matvec(v) + self._rmatvec(v)),
                              dtype=np.dtype(float))

    def reset(self):
        self.terms.clear()
        self.symmetric = True

    @property
    def rank(self) -> int:
        return sum(2 if kind == 'dfp' else 1 for kind, *_ in self.terms)


def fd_operator(xi: np.ndarray, fun: Callable[[np.ndarray], np.ndarray], h: float,
                weight: Optional[np.ndarray] = None) -> LinearOperator:
    """Matrix-free base operator built by base_matvec around a frozen point."""
    xi = np.array(xi, dtype=float)
    n = xi.shape[0]
    return LinearOperator((n, n), matvec=lambda v: base_matvec(np.ravel(v), xi, fun, h, weight),
                          dtype=np.dtype(float))


def dense_operator(xi: np.ndarray, fun: Callable[[np.ndarray], np.ndarray], h: float,
                   weight: Optional[np.ndarray] = None) -> np.ndarray:
    """Assembled (symmetrized) matrix of the base operator, one difference per column."""
    n = xi.shape[0]
    cols = np.empty((n, n))
    unit = np.zeros(n)
    for j in range(n):
        unit[j] = 1.0
        cols[:, j] = base_matvec(unit, xi, fun, h, weight)
        unit[j] = 0.0
    return 0.5 * (cols + cols.T)


@dataclass
class NewtonSettings:
    """Nonlinear and linear tolerances; convergence when |G| <= newton_tol (atol + rtol |xi|)."""
    newton_tol: float = 1.0
    rtol: float = 1e-6
    atol: float = 1e-6
    cg_tol: float = 1e-6
    max_newton: int = 30
    max_cg: int = 200
    curvature_eps: float = CURVATURE_EPS
    dense_jacobian: bool = False
    dense_max_size: int = 2000
    line_search: bool = True


@dataclass
class ImplicitSystem:
    """BDF stage equation G(xi) = xi - c - h f(xi).

    Args:
        fun: Flow right-hand side f
        c: Explicit part of the BDF formula
        h: Implicit coefficient (dt for BDF1, 2/3 dt for BDF2)
        weight: Optional positive diagonal W; Newton then works on W G
        energy: Optional I_h with f = -W^-1 grad I_h, enabling the merit line search
        project: Optional projection onto admissible directions
    """
    fun: Callable[[np.ndarray], np.ndarray]
    c: np.ndarray
    h: float
    weight: Optional[np.ndarray] = None
    energy: Optional[Callable[[np.ndarray], float]] = None
    project: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def residual(self, xi: np.ndarray) -> np.ndarray:
        return xi - self.c - self.h * self.fun(xi)

    def weighted(self, G: np.ndarray) -> np.ndarray:
        return G if self.weight is None else self.weight * G

    def weighted_fun(self, xi: np.ndarray) -> np.ndarray:
        f = self.fun(xi)
        return f if self.weight is None else self.weight * f

    def merit(self, xi: np.ndarray) -> float:
        """1/2 (xi-c)^T W (xi-c) + h I_h(xi); its gradient is the weighted residual."""
        d = xi - self.c
        wd = d if self.weight is None else self.weight * d
        return 0.5 * float(d @ wd) + self.h * float(self.energy(xi))

    def proj(self, v: np.ndarray) -> np.ndarray:
        return v if self.project is None else self.project(v)


@dataclass
class NewtonResult:
    xi: np.ndarray
    iterations: int
    cg_iterations: int
    residual_norm: float
    converged: bool
    operator: Optional[QuasiNewtonOperator] = None
    updates: List[str] = field(default_factory=list)


def _line_search(system: ImplicitSystem, xi: np.ndarray, delta: np.ndarray,
                 Gw: np.ndarray) -> Tuple[float, np.ndarray]:
    slope = float(Gw @ delta)
    phi0 = system.merit(xi)
    lam = 1.0
    for _ in range(MAX_BACKTRACKS):
        trial = xi + lam * delta
        try:
            if system.merit(trial) <= phi0 + ARMIJO_C * lam * slope:
                return lam, trial
        except DegenerateCellError as e:
            logger.debug(f"Backtracking: step {lam:g} hits {e}")
        lam *= 0.5
    raise SolverError(f"line search failed after {MAX_BACKTRACKS} backtracks")


def newton_krylov_solve(xi_guess: np.ndarray, system: ImplicitSystem,
                        settings: Optional[NewtonSettings] = None) -> NewtonResult:
    """Solve G(xi) = 0 with quasi-Newton-Krylov iterations.

    The first iteration fixes a finite-difference base operator (I - hJ, or
    W - hWJ when a weight is set); later iterations apply DFP updates, or a
    good-Broyden update when the curvature test fails. Each step solves
    J_NT delta = -G with CG.
    """
    settings = settings or NewtonSettings()
    xi = np.array(xi_guess, dtype=float)
    G = system.residual(xi)
    if system.project is not None:
        G = system.proj(G)
    Gw = system.weighted(G)

    if settings.dense_jacobian and xi.shape[0] <= settings.dense_max_size:
        base = aslinearoperator(dense_operator(xi, system.weighted_fun, system.h, system.weight))
    else:
        base = fd_operator(xi, system.weighted_fun, system.h, system.weight)
    op = QuasiNewtonOperator(base, settings.curvature_eps)
    updates: List[str] = []
    cg_total = 0

    for k in range(settings.max_newton + 1):
        gnorm = float(np.linalg.norm(G))
        threshold = settings.newton_tol * (settings.atol + settings.rtol * float(np.linalg.norm(xi)))
        logger.debug(f"Newton {k}: |G| = {gnorm:.3e} (threshold {threshold:.3e})")
        if gnorm <= threshold:
            return NewtonResult(xi=xi, iterations=k, cg_iterations=cg_total, residual_norm=gnorm,
                                converged=True, operator=op, updates=updates)
        if k == settings.max_newton:
            break

        A = op if op.symmetric else op.symmetrized()
        cg = cg_solve(A, -Gw, settings.cg_tol, settings.max_cg)
        cg_total += cg.iterations
        if cg.breakdown:
            cg = cg_solve(base, -Gw, settings.cg_tol, settings.max_cg)
            cg_total += cg.iterations
        delta = system.proj(cg.x)

        if system.energy is not None and settings.line_search:
            if float(Gw @ delta) >= 0.0:
                logger.debug("Quasi-Newton direction is not a descent direction; using -W G")
                delta = -system.proj(Gw)
            lam, xi_new = _line_search(system, xi, delta, Gw)
        else:
            lam, xi_new = 1.0, xi + delta

        G_new = system.proj(system.residual(xi_new)) if system.project is not None else system.residual(xi_new)
        Gw_new = system.weighted(G_new)
        updates.append(op.update(lam * delta, Gw_new - Gw))
        xi, G, Gw = xi_new, G_new, Gw_new

    raise SolverError(f"Newton did not converge in {settings.max_newton} iterations "
                      f"(|G| = {float(np.linalg.norm(G)):.3e})")
