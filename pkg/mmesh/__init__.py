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

"""mmesh - simplicial moving-mesh adaptation driven by the A-pullback functionals."""

from .__version__ import __version__

__author__ = "mmesh contributors"
__description__ = "Moving-mesh adaptation of simplicial meshes by xi-view gradient flow"

from .config import ExperimentConfig
from .errors import ConfigError, DegenerateCellError, MeshError, MmeshError, SolverError
from .fields import builtin_field
from .flow import SolverConfig, run_outer_loop
from .functionals import FunctionalParams, energy
from .mesh import SimplicialMesh, build_structured_mesh
from .metric import MetricField, build_metric
from .quality import quality_metrics
from .run import run_checks, run_experiment

__all__ = [
    "__version__",
    "ExperimentConfig",
    "ConfigError",
    "DegenerateCellError",
    "MeshError",
    "MmeshError",
    "SolverError",
    "builtin_field",
    "SolverConfig",
    "run_outer_loop",
    "FunctionalParams",
    "energy",
    "SimplicialMesh",
    "build_structured_mesh",
    "MetricField",
    "build_metric",
    "quality_metrics",
    "run_checks",
    "run_experiment",
]
