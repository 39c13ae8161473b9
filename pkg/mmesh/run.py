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

"""Experiment orchestration: mesh setup, the adaptation loop and artifact emission."""

import logging
import math
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .assembly import gradient_consistency_check, lemma_identities_check
from .config import ExperimentConfig
from .database import RunStore
from .errors import MeshError, SolverError
from .fields import field_functions
from .flow import OuterLoopResult, StepRecord, run_outer_loop
from .functionals import (FUNCTIONAL_KINDS, HUANG, PROPOSED, CheckReport, FunctionalParams, coercivity_check,
                          scale_invariance_check)
from .mesh import (SimplicialMesh, build_structured_mesh, build_structured_mesh_3d, element_geometry,
                   min_heights_in_metric, perturb_nodes)
from .metric import MetricField, build_metric, random_spd
from .quality import QualityReport, corollary_bounds, interp_error, quality_histograms, quality_metrics
from .vtk import read_vtk, write_vtk

logger = logging.getLogger(__name__)

HISTORY_FILE = "history.csv"
SUMMARY_FILE = "summary.csv"
HISTOGRAM_FILE = "quality_hist.csv"
CONFIG_FILE = "config.conf"
STORE_FILE = "runs.db"

HISTORY_COLUMNS = [f.name for f in fields(StepRecord)]

SUMMARY_COLUMNS = [
    "name", "functional", "NC", "Q_eq", "Q_ali", "Q_geo", "e_L2", "e_H1", "e_L2_uniform", "time_s",
    "steps", "newton_iters", "cg_iters", "outer_iters", "theta", "kappa", "a_bound", "vol_bound",
    "min_height_M", "min_vol", "status",
]

# Columns shown by `mmesh report`
REPORT_COLUMNS = ["name", "functional", "NC", "Q_eq", "Q_ali", "e_L2", "e_H1", "time_s", "steps",
                  "newton_iters", "outer_iters", "status"]


@dataclass
class RunResult:
    out_dir: Path
    status: str
    summary: Dict[str, Any]
    quality: Optional[QualityReport] = None
    outer: Optional[OuterLoopResult] = None


def build_initial_mesh(config: ExperimentConfig, rng: np.random.Generator) -> SimplicialMesh:
    """Structured (or loaded) mesh, optionally with randomly perturbed physical nodes."""
    mc = config.mesh
    if mc.input:
        mesh = read_vtk(mc.input).mesh
        logger.info(f"Loaded mesh {mc.input}: {mesh.num_nodes} nodes, {mesh.num_cells} cells")
    elif mc.dim == 3:
        mesh = build_structured_mesh_3d(mc.nx, mc.ny, mc.nz,
                                        ((mc.x_min, mc.x_max), (mc.y_min, mc.y_max), (mc.z_min, mc.z_max)))
    else:
        mesh = build_structured_mesh(mc.nx, mc.ny, ((mc.x_min, mc.x_max), (mc.y_min, mc.y_max)))
    if mc.perturb > 0:
        mesh = perturb_nodes(mesh, mc.perturb, rng, view='x')
    element_geometry(mesh)
    return mesh


def functional_params(config: ExperimentConfig) -> FunctionalParams:
    fc = config.functional
    return FunctionalParams(kind=fc.kind, gamma=fc.gamma, mu=fc.mu)


def make_metric_builder(config: ExperimentConfig):
    mc, fc = config.metric, config.functional

    def builder(mesh: SimplicialMesh, values: np.ndarray) -> MetricField:
        return build_metric(mesh, values, kind=mc.kind, beta=mc.beta, smoothing_sweeps=mc.smoothing_sweeps,
                            apply_kappa=mc.apply_kappa, gamma=fc.gamma, balancing=fc.balancing,
                            p=fc.balancing_exponent(mesh.dim), hessian_floor=mc.hessian_floor)

    return builder


def snapshot_fields(mesh: SimplicialMesh, metric: Optional[MetricField]) -> Dict[str, np.ndarray]:
    if metric is None:
        return {}
    report = quality_metrics(mesh, metric)
    return {"M": metric.M, "rho": metric.rho, **report.per_cell}


def _frame(rows: List[Dict[str, Any]], columns: List[str]) -> pd.DataFrame:
    return pd.DataFrame(rows, columns=columns)


def write_history(path: Path, records: List[StepRecord]) -> Path:
    _frame([r.as_row() for r in records], HISTORY_COLUMNS).to_csv(path, index=False, float_format="%.12g")
    return path


def write_summary(path: Path, row: Dict[str, Any]) -> Path:
    _frame([row], SUMMARY_COLUMNS).to_csv(path, index=False, float_format="%.10g")
    return path


def write_histograms(path: Path, report: QualityReport) -> Path:
    """Long-format histogram table: measure, bin index, bin edges and count."""
    rows = []
    for name, (counts, edges) in quality_histograms(report).items():
        for i, count in enumerate(counts):
            rows.append({"measure": name, "bin": i, "lo": edges[i], "hi": edges[i + 1], "count": int(count)})
    _frame(rows, ["measure", "bin", "lo", "hi", "count"]).to_csv(path, index=False, float_format="%.10g")
    return path


def _safe_interp_error(mesh: SimplicialMesh, fn, degree: str, grad_fn) -> float:
    try:
        return interp_error(mesh, fn, degree, grad_fn)
    except NotImplementedError:
        return float('nan')


def _uniform_baseline(config: ExperimentConfig, mesh0: SimplicialMesh) -> SimplicialMesh:
    mc = config.mesh
    if mc.input or mc.dim == 3:
        return mesh0
    return build_structured_mesh(mc.nx, mc.ny, ((mc.x_min, mc.x_max), (mc.y_min, mc.y_max)))


def _observed_minima(result: OuterLoopResult) -> Tuple[float, float]:
    """Smallest metric height and physical cell volume seen over the whole run.

    The physical mesh only changes between outer iterations, so the heights
    recorded at the start of every iteration plus the final mesh cover every
    physical mesh the flow produced.
    """
    geom = element_geometry(result.mesh)
    volumes = [float(geom.vol.min())] + [s.min_volume_x for s in result.iterations]
    heights = [r.min_height_M for r in result.history if np.isfinite(r.min_height_M)]
    if result.metric is not None:
        heights.append(float(min_heights_in_metric(geom.E, result.metric.M).min()))
    return (min(heights) if heights else float('nan')), min(volumes)


def _bounds_and_minima(params: FunctionalParams, result: OuterLoopResult) -> Tuple[float, float, float, float]:
    """(a_bound, vol_bound, observed min metric height, observed min volume).

    The bounds use the last metric and the largest starting energy of any outer
    iteration.
    """
    min_height, min_vol = _observed_minima(result)
    if result.metric is None or not result.iterations or params.kind not in (PROPOSED, HUANG):
        return float('nan'), float('nan'), min_height, min_vol
    metric = result.metric
    I_h0 = max(s.energy_start for s in result.iterations)
    bounds = corollary_bounds(params.with_theta(metric.theta), result.mesh, metric, I_h0)
    if min_height < bounds.a_bound:
        logger.warning(f"Observed minimum metric height {min_height:.4e} is below the bound {bounds.a_bound:.4e}")
    if min_vol < bounds.vol_bound:
        logger.warning(f"Observed minimum volume {min_vol:.4e} is below the bound {bounds.vol_bound:.4e}")
    return bounds.a_bound, bounds.vol_bound, min_height, min_vol


def run_experiment(config: ExperimentConfig, name: Optional[str] = None) -> RunResult:
    """Run one adaptation experiment and write its artifacts to config.output.dir.

    On a solver or mesh failure the history gathered so far, the snapshots and a
    summary row with status 'failed' are still written; the error is re-raised.
    """
    out_dir = Path(config.output.dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = name or out_dir.name
    rng = np.random.default_rng(config.runtime.seed)
    threads = config.runtime.resolved_threads()
    params = functional_params(config)
    value_fn, grad_fn = field_functions(config.field.name, **config.field.parameters())
    config_text = config.to_text()
    (out_dir / CONFIG_FILE).write_text(config_text, encoding="utf-8")

    mesh0 = build_initial_mesh(config, rng)
    values0 = np.asarray(value_fn(mesh0.nodes_x), dtype=float)
    builder = make_metric_builder(config)
    logger.info(f"Run '{name}': {params.kind} functional, NC={mesh0.num_cells}, field={config.field.name}, "
                f"{config.flow.outer_iters} outer iterations, {threads} threads")

    store = RunStore(str(out_dir / STORE_FILE)) if config.output.store else None
    run_id = store.start_run(name, params.kind, mesh0.num_cells, config_text) if store else None

    write_vtk(out_dir / "mesh_0000.vtk", mesh0, point_data={"u": values0}, title=f"{name} initial")
    io_seconds = 0.0
    last_written = 0

    def on_iteration(it: int, mesh: SimplicialMesh, metric: MetricField, values: np.ndarray):
        nonlocal io_seconds, last_written
        every = config.output.vtk_every
        if every > 0 and it % every == 0:
            start = time.perf_counter()
            path = write_vtk(out_dir / f"mesh_{it:04d}.vtk", mesh, cell_data=snapshot_fields(mesh, metric),
                             point_data={"u": values}, title=f"{name} iteration {it}")
            last_written = it
            io_seconds += time.perf_counter() - start
            logger.debug(f"Wrote snapshot {path}")

    summary: Dict[str, Any] = {column: float('nan') for column in SUMMARY_COLUMNS}
    summary.update({"name": name, "functional": params.kind, "NC": mesh0.num_cells,
                    "outer_iters": config.flow.outer_iters})
    history: List[StepRecord] = []
    started = time.perf_counter()
    try:
        result = run_outer_loop(mesh0, values0, builder, params, config.flow,
                                field_fn=value_fn if config.field.resample else None,
                                callback=on_iteration, threads=threads)
    except (SolverError, MeshError) as e:
        history = list(getattr(e, "history", []) or [])
        summary["status"] = "failed"
        summary["time_s"] = (time.perf_counter() - started - io_seconds) if config.output.record_timing else 0.0
        _emit_tables(out_dir, config, history, summary, None)
        if store:
            store.add_history(run_id, [r.as_row() for r in history])
            store.finish_run(run_id, "failed", str(e), _json_safe(summary))
        logger.error(f"Run '{name}' aborted: {e}")
        raise
    elapsed = time.perf_counter() - started - io_seconds

    mesh = result.mesh
    final_metric = builder(mesh, result.values)
    report = quality_metrics(mesh, final_metric)
    report.e_L2 = _safe_interp_error(mesh, value_fn, "L2", grad_fn)
    report.e_H1 = _safe_interp_error(mesh, value_fn, "H1", grad_fn)
    e_uniform = _safe_interp_error(_uniform_baseline(config, mesh0), value_fn, "L2", grad_fn)
    a_bound, vol_bound, min_height, min_vol = _bounds_and_minima(params, result)
    if last_written != config.flow.outer_iters or config.flow.outer_iters == 0:
        write_vtk(out_dir / f"mesh_{config.flow.outer_iters:04d}.vtk", mesh,
                  cell_data=snapshot_fields(mesh, final_metric), point_data={"u": result.values},
                  title=f"{name} final")

    steps = sum(1 for r in result.history if r.step > 0)
    summary.update({
        "Q_eq": report.q_eq, "Q_ali": report.q_ali, "Q_geo": report.q_geo,
        "e_L2": report.e_L2, "e_H1": report.e_H1, "e_L2_uniform": e_uniform,
        "time_s": elapsed if config.output.record_timing else 0.0,
        "steps": steps, "newton_iters": result.newton_total, "cg_iters": result.cg_total,
        "theta": result.metric.theta if result.metric is not None else final_metric.theta,
        "kappa": result.metric.kappa if result.metric is not None else final_metric.kappa,
        "a_bound": a_bound, "vol_bound": vol_bound, "min_height_M": min_height, "min_vol": min_vol,
        "status": "ok",
    })
    _emit_tables(out_dir, config, result.history, summary, report)
    if store:
        store.add_history(run_id, [r.as_row() for r in result.history])
        store.finish_run(run_id, "ok", None, _json_safe(summary))

    logger.info(f"Run '{name}' finished: Q_eq={report.q_eq:.5f} Q_ali={report.q_ali:.5f} "
                f"e_L2={report.e_L2:.5g} (uniform {e_uniform:.5g}), {steps} steps, "
                f"{result.newton_total} Newton / {result.cg_total} CG iterations")
    logger.info(f"Artifacts written to {out_dir}")
    return RunResult(out_dir=out_dir, status="ok", summary=summary, quality=report, outer=result)


def _json_safe(summary: Dict[str, Any]) -> Dict[str, Any]:
    out = {}
    for key, value in summary.items():
        if isinstance(value, float) and not math.isfinite(value):
            value = None
        elif isinstance(value, np.generic):
            value = value.item()
        out[key] = value
    return out


def _emit_tables(out_dir: Path, config: ExperimentConfig, history: List[StepRecord], summary: Dict[str, Any],
                 report: Optional[QualityReport]):
    if not config.output.csv:
        return
    write_history(out_dir / HISTORY_FILE, history)
    write_summary(out_dir / SUMMARY_FILE, summary)
    if report is not None:
        write_histograms(out_dir / HISTOGRAM_FILE, report)


def collect_summaries(root: Path) -> pd.DataFrame:
    """All summary.csv rows found below root, ordered by path."""
    root = Path(root)
    paths = sorted(root.rglob(SUMMARY_FILE))
    if not paths:
        return pd.DataFrame(columns=SUMMARY_COLUMNS)
    frames = []
    for path in paths:
        frame = pd.read_csv(path)
        frame.insert(0, "dir", str(path.parent.relative_to(root)) or ".")
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def format_report(root: Path) -> str:
    """Text table of every run below root, plus failed runs from the run stores."""
    table = collect_summaries(root)
    if table.empty:
        return f"No {SUMMARY_FILE} found below {root}"
    columns = ["dir"] + [c for c in REPORT_COLUMNS if c in table.columns]
    lines = [table[columns].to_string(index=False, float_format=lambda v: f"{v:.5g}")]

    failed = []
    for db in sorted(Path(root).rglob(STORE_FILE)):
        for run in RunStore(str(db)).list_runs():
            if run['status'] != 'ok':
                failed.append(f"  {db.parent}: run {run['run_id']} ({run['name']}) {run['status']}: "
                              f"{run['message'] or ''}")
    if failed:
        lines.append("")
        lines.append("Runs not completed:")
        lines.extend(failed)
    return "\n".join(lines)


CHECK_SCALES = (0.25, 2.0, 10.0)


def random_check_problem(rng: np.random.Generator, n: int = 5) -> Tuple[SimplicialMesh, MetricField]:
    """Small perturbed mesh (both views) with a random SPD metric field."""
    mesh = build_structured_mesh(n, n)
    mesh = perturb_nodes(mesh, 0.2, rng, view='x')
    mesh = perturb_nodes(mesh, 0.2, rng, view='xi')
    return mesh, MetricField.from_tensors(random_spd(rng, mesh.num_cells, 2, 0.5, 5.0), mesh)


def run_checks(seed: int = 0, meshes: int = 20, coercivity_samples: int = 10_000) -> List[CheckReport]:
    """Property oracles: trace identities, gradient consistency, scale invariance and coercivity."""
    rng = np.random.default_rng(seed)
    reports = [lemma_identities_check(100, 2, rng)]

    for kind in FUNCTIONAL_KINDS:
        worst: Optional[CheckReport] = None
        for _ in range(meshes):
            mesh, metric = random_check_problem(rng)
            params = FunctionalParams(kind=kind, gamma=1.5 if kind != PROPOSED else 1.25, theta=metric.theta)
            report = gradient_consistency_check(mesh, metric, params)
            if worst is None or report.max_error > worst.max_error:
                worst = report
        worst.samples = meshes
        worst.detail = f"worst of {meshes} random meshes"
        reports.append(worst)

    mesh, metric = random_check_problem(rng)
    for kind in FUNCTIONAL_KINDS:
        params = FunctionalParams(kind=kind, gamma=1.5 if kind != PROPOSED else 1.25, theta=metric.theta)
        for c in CHECK_SCALES:
            reports.append(scale_invariance_check(mesh, metric, c, params, rng=rng))

    for params in (FunctionalParams(kind=PROPOSED, gamma=1.25, theta=0.3),
                   FunctionalParams(kind=PROPOSED, gamma=1.25, theta=3.0),
                   FunctionalParams(kind=HUANG, gamma=1.5, mu=1.0 / 3.0)):
        reports.append(coercivity_check(coercivity_samples, params, 2, rng))

    for report in reports:
        log = logger.info if report.passed else logger.error
        log(report.summary())
    return reports
