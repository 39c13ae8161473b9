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

"""Exception types shared across mmesh."""

from typing import Optional


class MmeshError(Exception):
    """Base class for all mmesh errors."""


class ConfigError(MmeshError, ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


class MeshError(MmeshError, ValueError):
    """Invalid mesh topology or geometry."""


class DegenerateCellError(MeshError):
    """A cell with non-positive (or round-off sized) orientation.

    Args:
        cell: Index of the offending cell
        det: Determinant that failed the admissibility test
        view: 'x' for the physical mesh, 'xi' for the computational mesh
    """

    def __init__(self, cell: int, det: float, view: str = 'x'):
        self.cell = int(cell)
        self.det = float(det)
        self.view = view
        super().__init__(f"Degenerate {view}-cell {self.cell} (det={self.det:.3e})")


class SolverError(MmeshError, RuntimeError):
    """Nonlinear/time-integration failure (CLI exit code 3)."""

    def __init__(self, message: str, step: Optional[int] = None, outer_iter: Optional[int] = None):
        self.step = step
        self.outer_iter = outer_iter
        where = []
        if outer_iter is not None:
            where.append(f"outer iteration {outer_iter}")
        if step is not None:
            where.append(f"step {step}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")
