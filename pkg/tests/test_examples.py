"""Full-size adaptation runs of the bundled presets (minutes each)."""

from pathlib import Path

import pytest

from mmesh.config import ExperimentConfig
from mmesh.run import run_experiment

PRESETS = Path(__file__).resolve().parent.parent / "presets"


def run_preset(name, out_dir):
    config = ExperimentConfig.from_file(PRESETS / f"{name}.conf").with_output_dir(out_dir)
    return run_experiment(config, name=name)


def assert_energy_monotone(result):
    for it in result.outer.iterations:
        energies = [r.I_h for r in result.outer.history if r.outer_iter == it.outer_iter]
        assert all(b <= a + 1e-10 * abs(a) for a, b in zip(energies, energies[1:]))


def assert_size_bounds_hold(summary):
    assert summary["min_height_M"] >= summary["a_bound"] > 0
    assert summary["min_vol"] >= summary["vol_bound"] > 0


@pytest.mark.slow
def test_sine_band(tmp_path):
    result = run_preset("sine_band", tmp_path)
    s = result.summary
    assert s["NC"] == 1600
    assert 1.0 <= s["Q_eq"] <= 1.2
    assert 1.0 <= s["Q_ali"] <= 1.3
    assert s["e_L2"] <= 0.022
    assert s["e_L2"] < s["e_L2_uniform"]
    assert_energy_monotone(result)
    assert_size_bounds_hold(s)


@pytest.mark.slow
def test_x_shape(tmp_path):
    result = run_preset("x_shape", tmp_path)
    s = result.summary
    assert 1.0 <= s["Q_eq"] <= 1.15
    assert s["e_L2"] <= 0.029
    assert s["e_L2"] < s["e_L2_uniform"]
    assert_energy_monotone(result)
    assert_size_bounds_hold(s)


@pytest.mark.slow
def test_burgers_front(tmp_path):
    result = run_preset("burgers_static", tmp_path)
    assert result.status == "ok"
    assert result.summary["e_L2"] < result.summary["e_L2_uniform"]
    assert (tmp_path / "mesh_0010.vtk").is_file()
