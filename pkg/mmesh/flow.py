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

"""xi-view gradient flow: BDF time stepping and the outer adaptation loop."""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional

import numpy as np
import scipy.sparse as sp

from .assembly import element_gradients_xi, project_boundary
from .errors import ConfigError, MeshError, SolverError
from .functionals import FunctionalParams, element_energies, pullback_core
from .interp import PointLocator, star_seeds, transfer
from .mesh import (SimplicialMesh, check_admissible, edge_matrix_batch, element_geometry, min_heights_in_metric,
                   snap_to_boundary, star_incidence)
from .metric import MetricField
from .solvers import NewtonSettings, QuasiNewtonOperator, ImplicitSystem, newton_krylov_solve

logger = logging.getLogger(__name__)

SCHEMES = ("bdf1", "bdf2")

# Relative energy increase that rejects a step
ENERGY_TOL = 1e-10


@dataclass
class SolverConfig:
    """Time integration and nonlinear solver settings (the `flow.*` keys)."""
    tau: float = 0.004
    t_span: float = 0.1
    n_t: int = 2
    outer_iters: int = 10
    rtol: float = 1e-6
    atol: float = 1e-6
    newton_tol: float = 1.0
    cg_tol: float = 1e-6
    max_newton: int = 30
    max_cg: int = 200
    scheme: str = "bdf2"
    max_dt_halvings: int = 5
    dense_jacobian: bool = False

    def __post_init__(self):
        for name in ("tau", "t_span", "rtol", "atol", "newton_tol", "cg_tol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"flow.{name} must be > 0, got {getattr(self, name)}")
        for name in ("n_t", "max_newton", "max_cg"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"flow.{name} must be >= 1, got {getattr(self, name)}")
        if int(self.outer_iters) < 0:
            raise ConfigError(f"flow.outer_iters must be >= 0, got {self.outer_iters}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"flow.scheme must be one of {', '.join(SCHEMES)}, got '{self.scheme}'")

    @property
    def dt(self) -> float:
        return self.t_span / self.n_t

    def newton_settings(self) -> NewtonSettings:
        return NewtonSettings(newton_tol=self.newton_tol, rtol=self.rtol, atol=self.atol, cg_tol=self.cg_tol,
                              max_newton=self.max_newton, max_cg=self.max_cg, dense_jacobian=self.dense_jacobian)


class FrozenInvariants:
    """Quantities fixed during one BDF span: physical geometry, metric, P, theta.

    With x frozen, A_K = Ehat_K B_K Ehat_K^T where B_K = E_K^-1 M_K^-1 E_K^-T.
    """

    def __init__(self, mesh: SimplicialMesh, metric: MetricField, params: FunctionalParams, tau: float,
                 threads: int = 1):
        geom = element_geometry(mesh)
        self.mesh = mesh
        self.metric = metric
        self.params = params.with_theta(metric.theta)
        self.tau = float(tau)
        self.threads = threads
        self.B = pullback_core(geom.E, metric.M)
        self.rho = metric.rho
        self.vol = geom.vol
        self.P = np.ones(mesh.num_nodes) if metric.P is None else np.asarray(metric.P, dtype=float)
        self.incidence: sp.csr_matrix = star_incidence(mesh)
        self.weight = np.repeat(self.tau / self.P, mesh.dim)

    def _ehat(self, xi: np.ndarray) -> np.ndarray:
        Ehat = edge_matrix_batch(np.reshape(xi, (-1, self.mesh.dim)), self.mesh.cells)
        check_admissible(Ehat, self.mesh.diameter, 'xi')
        return Ehat

    def gradient(self, xi: np.ndarray) -> np.ndarray:
        """Unprojected dI_h/dxi, shape (N, d)."""
        grad = element_gradients_xi(self._ehat(xi), self.B, self.rho, self.params, self.threads)
        weighted = (self.vol[:, None, None] * grad.g_xi).reshape(-1, self.mesh.dim)
        return np.asarray(self.incidence @ weighted)

    def energy(self, xi: np.ndarray) -> float:
        return float(np.sum(element_energies(self._ehat(xi), self.B, self.rho, self.vol, self.params)))

    def rhs(self, xi: np.ndarray) -> np.ndarray:
        return residual(xi, self)

    def project(self, v: np.ndarray) -> np.ndarray:
        return project_boundary(v, self.mesh).ravel()

    def min_volume(self, xi: np.ndarray) -> float:
        Ehat = edge_matrix_batch(np.reshape(xi, (-1, self.mesh.dim)), self.mesh.cells)
        return float(np.linalg.det(Ehat).min()) / math.factorial(self.mesh.dim)


def residual(xi: np.ndarray, frozen: FrozenInvariants) -> np.ndarray:
    """Flow velocity f(xi) = -(P/tau) dI_h/dxi, boundary-projected and flattened."""
    g = project_boundary(frozen.gradient(xi), frozen.mesh)
    return (-(frozen.P / frozen.tau)[:, None] * g).ravel()


@dataclass
class FlowProblem:
    """Right-hand side of xi' = f(xi) plus the optional hooks the integrator uses."""
    rhs: Callable[[np.ndarray], np.ndarray]
    weight: Optional[np.ndarray] = None
    energy: Optional[Callable[[np.ndarray], float]] = None
    project: Optional[Callable[[np.ndarray], np.ndarray]] = None
    min_volume: Optional[Callable[[np.ndarray], float]] = None

    @classmethod
    def from_invariants(cls, frozen: FrozenInvariants) -> 'FlowProblem':
        return cls(rhs=frozen.rhs, weight=frozen.weight, energy=frozen.energy,
                   project=frozen.project, min_volume=frozen.min_volume)


@dataclass
class StepRecord:
    """One history row; step 0 of an outer iteration is the state before integration."""
    outer_iter: int
    step: int
    t: float
    I_h: float
    min_vol: float
    min_height_M: float
    newton_iters: int
    cg_iters_total: int
    dt: float
    order: int

    def as_row(self) -> dict:
        return asdict(self)


@dataclass
class FlowState:
    """Integrator state: xi history (latest last), time, step size and diagnostics."""
    xi_history: List[np.ndarray]
    t: float
    dt: float
    last_dt: Optional[float] = None
    operator: Optional[QuasiNewtonOperator] = None
    records: List[StepRecord] = field(default_factory=list)

    @property
    def xi(self) -> np.ndarray:
        return self.xi_history[-1]

    def reset_history(self):
        self.xi_history = [self.xi_history[-1]]
        self.last_dt = None


def bdf_advance(state: FlowState, problem: FlowProblem, steps: int, settings: Optional[NewtonSettings] = None,
                scheme: str = "bdf2", max_halvings: int = 5, outer_iter: Optional[int] = None,
                min_height_M: float = float('nan')) -> FlowState:
    """Advance `steps` nominal steps of size state.dt with BDF1/BDF2.

    A step whose Newton solve fails, that leaves the admissible set, or that
    raises the energy is retried with half the step size. Each accepted step
    doubles a reduced step size again, up to state.dt. After a change of step
    size the next step restarts with BDF1.
    """
    settings = settings or NewtonSettings()
    t_end = state.t + steps * state.dt
    dt = state.dt
    energy_prev = problem.energy(state.xi) if problem.energy is not None else float('nan')
    step = len([r for r in state.records if r.outer_iter == outer_iter and r.step > 0])
    span_tol = 1e-12 * max(1.0, abs(t_end))

    while t_end - state.t > span_tol:
        h_dt = min(dt, t_end - state.t)
        halvings = 0
        while True:
            xn = state.xi
            bdf2 = (scheme == "bdf2" and len(state.xi_history) >= 2 and state.last_dt is not None
                    and abs(state.last_dt - h_dt) <= 1e-12 * h_dt)
            if bdf2:
                c = (4.0 * xn - state.xi_history[-2]) / 3.0
                h = 2.0 * h_dt / 3.0
            else:
                c = xn
                h = h_dt
            system = ImplicitSystem(fun=problem.rhs, c=c, h=h, weight=problem.weight,
                                    energy=problem.energy, project=problem.project)
            try:
                result = newton_krylov_solve(xn, system, settings)
                energy_new = problem.energy(result.xi) if problem.energy is not None else float('nan')
                if energy_new > energy_prev + ENERGY_TOL * abs(energy_prev):
                    raise SolverError(f"energy increased from {energy_prev:.10g} to {energy_new:.10g}")
                break
            except (SolverError, MeshError) as e:
                halvings += 1
                if halvings > max_halvings:
                    raise SolverError(f"step rejected after {max_halvings} step-size halvings: {e}",
                                      step=step + 1, outer_iter=outer_iter) from e
                h_dt /= 2.0
                dt = h_dt
                state.reset_history()
                logger.warning(f"Rejected step {step + 1} ({e}); retrying with dt={h_dt:.4g}")

        step += 1
        state.t += h_dt
        state.xi_history = (state.xi_history + [result.xi])[-2:]
        state.last_dt = h_dt
        state.operator = result.operator
        energy_prev = energy_new
        record = StepRecord(
            outer_iter=outer_iter if outer_iter is not None else 0, step=step, t=state.t, I_h=energy_new,
            min_vol=problem.min_volume(result.xi) if problem.min_volume is not None else float('nan'),
            min_height_M=min_height_M, newton_iters=result.iterations, cg_iters_total=result.cg_iterations,
            dt=h_dt, order=2 if bdf2 else 1,
        )
        state.records.append(record)
        logger.debug(f"Step {step}: t={state.t:.6g} I_h={energy_new:.10g} newton={result.iterations} "
                     f"cg={result.cg_iterations} order={record.order}")
        dt = min(2.0 * dt, state.dt)
    return state


@dataclass
class IterationSummary:
    outer_iter: int
    energy_start: float
    energy_end: float
    theta: float
    kappa: float
    min_height_M: float
    min_volume_x: float
    newton_iters: int
    cg_iters: int


@dataclass
class OuterLoopResult:
    mesh: SimplicialMesh
    values: np.ndarray
    history: List[StepRecord]
    iterations: List[IterationSummary]
    metric: Optional[MetricField] = None

    @property
    def newton_total(self) -> int:
        return sum(r.newton_iters for r in self.history)

    @property
    def cg_total(self) -> int:
        return sum(r.cg_iters_total for r in self.history)


def update_physical_nodes(mesh: SimplicialMesh, xi_moved: np.ndarray) -> np.ndarray:
    """Evaluate the map xi -> x carried by the moved computational mesh at the reference nodes."""
    moved = mesh.with_coordinates(nodes_xi=np.reshape(xi_moved, (-1, mesh.dim)))
    locator = PointLocator(moved, view='xi')
    x_new = transfer(moved, mesh.nodes_x, mesh.nodes_xi, view='xi', seeds=star_seeds(mesh), locator=locator)
    return snap_to_boundary(x_new, mesh)


def run_outer_loop(mesh: SimplicialMesh, values: np.ndarray,
                   metric_builder: Callable[[SimplicialMesh, np.ndarray], MetricField],
                   params: FunctionalParams, flow: SolverConfig,
                   field_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                   callback: Optional[Callable[[int, SimplicialMesh, MetricField, np.ndarray], None]] = None,
                   threads: int = 1) -> OuterLoopResult:
    """Adapt `mesh` to the metric of the field over flow.outer_iters iterations.

    Each iteration builds the metric on the current physical mesh, integrates
    the xi-flow over t_span starting from the reference computational mesh,
    moves x by the resulting map and updates the field (resampling through
    field_fn when given, piecewise-linear transfer otherwise).
    """
    values = np.asarray(values, dtype=float)
    xi0 = mesh.nodes_xi.copy()
    history: List[StepRecord] = []
    summaries: List[IterationSummary] = []
    settings = flow.newton_settings()
    metric: Optional[MetricField] = None
    t = 0.0

    try:
        for it in range(1, flow.outer_iters + 1):
            metric = metric_builder(mesh, values)
            frozen = FrozenInvariants(mesh, metric, params, flow.tau, threads)
            geom = element_geometry(mesh)
            height = float(min_heights_in_metric(geom.E, metric.M).min())
            xi_flat = xi0.ravel().copy()
            energy0 = frozen.energy(xi_flat)
            state = FlowState(xi_history=[xi_flat], t=t, dt=flow.dt)
            state.records.append(StepRecord(outer_iter=it, step=0, t=t, I_h=energy0,
                                            min_vol=frozen.min_volume(xi_flat), min_height_M=height,
                                            newton_iters=0, cg_iters_total=0, dt=0.0, order=0))
            try:
                bdf_advance(state, FlowProblem.from_invariants(frozen), flow.n_t, settings, flow.scheme,
                            flow.max_dt_halvings, outer_iter=it, min_height_M=height)
            except SolverError as e:
                history.extend(state.records)
                if e.outer_iter is None:
                    raise SolverError(str(e), outer_iter=it) from e
                raise
            history.extend(state.records)
            t = state.t

            x_new = update_physical_nodes(mesh, state.xi)
            new_mesh = mesh.with_coordinates(nodes_x=x_new, nodes_xi=xi0)
            try:
                element_geometry(new_mesh)
            except MeshError as e:
                raise SolverError(f"physical mesh update failed: {e}", outer_iter=it) from e

            if field_fn is not None:
                values = np.asarray(field_fn(new_mesh.nodes_x), dtype=float)
            else:
                values = transfer(mesh, values, new_mesh.nodes_x, view='x', seeds=star_seeds(mesh))
            mesh = new_mesh

            steps = [r for r in state.records if r.step > 0]
            summary = IterationSummary(
                outer_iter=it, energy_start=energy0, energy_end=state.records[-1].I_h, theta=metric.theta,
                kappa=metric.kappa, min_height_M=height, min_volume_x=float(element_geometry(mesh).vol.min()),
                newton_iters=sum(r.newton_iters for r in steps), cg_iters=sum(r.cg_iters_total for r in steps),
            )
            summaries.append(summary)
            logger.info(f"Outer iteration {it}/{flow.outer_iters}: I_h {summary.energy_start:.6g} -> "
                        f"{summary.energy_end:.6g}, theta={summary.theta:.4g}, kappa={summary.kappa:.4g}, "
                        f"newton={summary.newton_iters}, cg={summary.cg_iters}")
            if callback is not None:
                callback(it, mesh, metric, values)
    except (SolverError, MeshError) as e:
        # the caller keeps the partial history as an artifact
        e.history = history
        raise

    return OuterLoopResult(mesh=mesh, values=values, history=history, iterations=summaries, metric=metric)
