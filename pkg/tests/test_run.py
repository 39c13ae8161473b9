import logging
import sqlite3

import numpy as np
import pandas as pd
import pytest

import mmesh.run as run_module
from mmesh.config import ExperimentConfig
from mmesh.errors import SolverError
from mmesh.flow import IterationSummary, OuterLoopResult, StepRecord
from mmesh.functionals import PROPOSED, FunctionalParams
from mmesh.mesh import build_structured_mesh
from mmesh.metric import MetricField
from mmesh.quality import corollary_bounds
from mmesh.run import (HISTORY_COLUMNS, SUMMARY_COLUMNS, collect_summaries, format_report, run_checks,
                       run_experiment)

SMALL = """
mesh.nx = 6
mesh.ny = 6
field.name = "burgers_profile"
field.re = 2
metric.kind = "arclength"
metric.beta = 1
flow.outer_iters = 1
flow.t_span = 0.02
flow.n_t = 2
"""


def small_config(out_dir, extra: str = "") -> ExperimentConfig:
    return ExperimentConfig.from_text(SMALL + extra).with_output_dir(out_dir)


def test_run_writes_all_artifacts(tmp_path):
    out = tmp_path / "small"
    result = run_experiment(small_config(out))
    assert result.status == "ok"
    for name in ("config.conf", "history.csv", "summary.csv", "quality_hist.csv", "runs.db",
                 "mesh_0000.vtk", "mesh_0001.vtk"):
        assert (out / name).is_file(), name

    history = pd.read_csv(out / "history.csv")
    assert list(history.columns) == HISTORY_COLUMNS
    assert history["step"].tolist() == [0, 1, 2]
    assert history["order"].tolist() == [0, 1, 2]
    assert (history["I_h"].diff().dropna() <= 1e-10 * history["I_h"].abs().max()).all()

    summary = pd.read_csv(out / "summary.csv")
    assert list(summary.columns) == SUMMARY_COLUMNS
    row = summary.iloc[0]
    assert row["status"] == "ok"
    assert row["NC"] == 72
    assert row["steps"] == 2
    assert row["Q_eq"] >= 1.0 and row["Q_ali"] >= 1.0
    assert row["e_L2"] > 0
    assert row["a_bound"] > 0
    assert row["min_height_M"] >= row["a_bound"]

    hist = pd.read_csv(out / "quality_hist.csv")
    assert set(hist["measure"]) == {"q_eq", "inv_q_ali", "q_geo"}
    assert (hist.groupby("measure")["count"].sum() == 72).all()

    again = ExperimentConfig.from_file(out / "config.conf")
    assert again == small_config(out)


def test_zero_iterations_on_constant_metric_is_equidistributed(tmp_path):
    config = small_config(tmp_path / "still", "flow.outer_iters = 0\nmetric.beta = 0\n")
    result = run_experiment(config)
    assert result.summary["Q_eq"] == pytest.approx(1.0)
    assert result.summary["Q_ali"] == pytest.approx(1.0)
    assert result.summary["steps"] == 0
    assert np.isnan(result.summary["a_bound"])
    assert (tmp_path / "still" / "mesh_0000.vtk").is_file()


def test_csv_output_is_reproducible(tmp_path):
    extra = "output.record_timing = false\nmesh.perturb = 0.1\nruntime.seed = 3\n"
    run_experiment(small_config(tmp_path / "a", extra), name="repro")
    run_experiment(small_config(tmp_path / "b", extra), name="repro")
    for name in ("history.csv", "summary.csv", "quality_hist.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    assert pd.read_csv(tmp_path / "a" / "summary.csv")["time_s"].iloc[0] == 0.0


def test_csv_can_be_disabled(tmp_path):
    run_experiment(small_config(tmp_path / "quiet", "output.csv = false\noutput.store = false\n"))
    assert not (tmp_path / "quiet" / "summary.csv").exists()
    assert not (tmp_path / "quiet" / "runs.db").exists()
    assert (tmp_path / "quiet" / "mesh_0001.vtk").is_file()


def test_failure_keeps_partial_artifacts(tmp_path, monkeypatch):
    def failing(*args, **kwargs):
        error = SolverError("Newton did not converge", step=1, outer_iter=1)
        error.history = [StepRecord(outer_iter=1, step=0, t=0.0, I_h=3.0, min_vol=0.01, min_height_M=0.1,
                                    newton_iters=0, cg_iters_total=0, dt=0.0, order=0)]
        raise error

    monkeypatch.setattr(run_module, "run_outer_loop", failing)
    out = tmp_path / "broken"
    with pytest.raises(SolverError):
        run_experiment(small_config(out))

    assert pd.read_csv(out / "summary.csv")["status"].iloc[0] == "failed"
    assert len(pd.read_csv(out / "history.csv")) == 1
    conn = sqlite3.connect(out / "runs.db")
    status, message = conn.execute("SELECT status, message FROM runs").fetchone()
    conn.close()
    assert status == "failed"
    assert "Newton did not converge" in message
    assert "Runs not completed" in format_report(tmp_path)


def test_collect_summaries_and_report(tmp_path):
    run_experiment(small_config(tmp_path / "one"), name="one")
    run_experiment(small_config(tmp_path / "nested" / "two"), name="two")
    table = collect_summaries(tmp_path)
    assert table["name"].tolist() == ["two", "one"]
    assert table["dir"].tolist() == ["nested/two", "one"]
    text = format_report(tmp_path)
    assert "Q_eq" in text and "two" in text
    assert "Runs not completed" not in text


def test_report_of_empty_directory(tmp_path):
    assert "No summary.csv" in format_report(tmp_path)
    assert collect_summaries(tmp_path).empty


def test_property_checks_pass():
    reports = run_checks(seed=0, meshes=2, coercivity_samples=500)
    assert len(reports) == 16
    failed = [r.summary() for r in reports if not r.passed]
    assert failed == []


def step(outer_iter, step_no, min_height):
    return StepRecord(outer_iter=outer_iter, step=step_no, t=0.01 * step_no, I_h=2.5, min_vol=0.01,
                      min_height_M=min_height, newton_iters=1, cg_iters_total=3, dt=0.01, order=1)


def iteration(outer_iter, min_height, min_volume, energy_start=2.5):
    return IterationSummary(outer_iter=outer_iter, energy_start=energy_start, energy_end=2.4, theta=1.0,
                            kappa=1.0, min_height_M=min_height, min_volume_x=min_volume, newton_iters=1,
                            cg_iters=3)


def test_bound_monitor_uses_the_smallest_values_of_the_run(caplog):
    mesh = build_structured_mesh(4, 4)
    metric = MetricField.from_tensors(np.broadcast_to(np.eye(2), (mesh.num_cells, 2, 2)).copy(), mesh)
    result = OuterLoopResult(
        mesh=mesh, values=np.zeros(mesh.num_nodes), metric=metric,
        history=[step(1, 0, 0.2), step(1, 1, 0.2), step(2, 0, 1e-15), step(2, 1, 1e-15)],
        iterations=[iteration(1, 0.2, 1e-20), iteration(2, 1e-15, 1.0 / 32.0, energy_start=3.0)],
    )
    params = FunctionalParams(kind=PROPOSED, gamma=1.25)
    with caplog.at_level(logging.WARNING, logger="mmesh.run"):
        a_bound, vol_bound, min_height, min_vol = run_module._bounds_and_minima(params, result)
    assert min_height == pytest.approx(1e-15)
    assert min_vol == pytest.approx(1e-20)
    assert min_height < a_bound and min_vol < vol_bound
    assert "metric height" in caplog.text and "minimum volume" in caplog.text

    bounds = corollary_bounds(params.with_theta(metric.theta), mesh, metric, I_h0=3.0)
    assert a_bound == pytest.approx(bounds.a_bound)
    assert vol_bound == pytest.approx(bounds.vol_bound)


def test_bound_monitor_passes_on_a_uniform_run(caplog):
    mesh = build_structured_mesh(4, 4)
    metric = MetricField.from_tensors(np.broadcast_to(np.eye(2), (mesh.num_cells, 2, 2)).copy(), mesh)
    height = 1.0 / (4.0 * np.sqrt(2.0))
    result = OuterLoopResult(mesh=mesh, values=np.zeros(mesh.num_nodes), metric=metric,
                             history=[step(1, 0, height), step(1, 1, height)],
                             iterations=[iteration(1, height, 1.0 / 32.0, energy_start=2.0 ** 1.25)])
    with caplog.at_level(logging.WARNING, logger="mmesh.run"):
        a_bound, vol_bound, min_height, min_vol = run_module._bounds_and_minima(
            FunctionalParams(kind=PROPOSED, gamma=1.25), result)
    assert min_height == pytest.approx(height)
    assert min_vol == pytest.approx(1.0 / 32.0)
    assert min_height >= a_bound and min_vol >= vol_bound
    assert "below the bound" not in caplog.text
