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

"""Point location and piecewise-linear transfer of nodal fields."""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .mesh import SimplicialMesh, cell_neighbors, edge_matrix_batch

logger = logging.getLogger(__name__)

# Barycentric slack accepted as inside
INSIDE_TOL = 1e-10
# Points farther than this (relative to the domain diameter) are clamped
CLAMP_TOL = 1e-8


@dataclass
class LocationResult:
    cell: int
    bary: np.ndarray
    clamped: bool = False


class PointLocator:
    """Walking search over one coordinate view of a mesh.

    Args:
        mesh: Source mesh
        view: 'x' to locate physical points, 'xi' for computational points
    """

    def __init__(self, mesh: SimplicialMesh, view: str = 'x'):
        self.mesh = mesh
        self.points = mesh.nodes_x if view == 'x' else mesh.nodes_xi
        self.cells = mesh.cells
        self.origin = self.points[self.cells[:, 0]]
        self.Einv = np.linalg.inv(edge_matrix_batch(self.points, self.cells))
        self.grad_norms = None
        self._neighbors = None
        self.diameter = float(np.linalg.norm(self.points.max(axis=0) - self.points.min(axis=0)))
        self.max_walk = 4 * int(np.sqrt(mesh.num_cells)) + 16
        self.walks = 0
        self.fallbacks = 0

    @property
    def neighbors(self) -> np.ndarray:
        if self._neighbors is None:
            self._neighbors = cell_neighbors(self.cells)
        return self._neighbors

    def barycentric(self, cell: int, point: np.ndarray) -> np.ndarray:
        lam = self.Einv[cell] @ (point - self.origin[cell])
        return np.concatenate([[1.0 - lam.sum()], lam])

    def _exhaustive(self, point: np.ndarray) -> LocationResult:
        self.fallbacks += 1
        lam = np.einsum('kab,kb->ka', self.Einv, point - self.origin)
        bary = np.concatenate([1.0 - lam.sum(axis=1, keepdims=True), lam], axis=1)
        worst = bary.min(axis=1)
        cell = int(np.argmax(worst))
        b = bary[cell]
        if worst[cell] >= -INSIDE_TOL:
            return LocationResult(cell=cell, bary=b)

        # distance to the cell ~ -lambda_j / |grad lambda_j| for the violated coordinate
        if self.grad_norms is None:
            V = np.concatenate([-self.Einv.sum(axis=1, keepdims=True), self.Einv], axis=1)
            self.grad_norms = np.linalg.norm(V, axis=2)
        dist = float(np.max(-np.minimum(b, 0.0) / self.grad_norms[cell]))
        clipped = np.maximum(b, 0.0)
        clipped /= clipped.sum()
        clamped = dist > CLAMP_TOL * self.diameter
        if clamped:
            logger.warning(f"Point {point.tolist()} lies outside the mesh (distance {dist:.3e}); clamped to cell {cell}")
        return LocationResult(cell=cell, bary=clipped, clamped=clamped)

    def locate(self, point: np.ndarray, seed: Optional[int] = None) -> LocationResult:
        point = np.asarray(point, dtype=float)
        cell = 0 if seed is None else int(seed)
        visited = set()
        for _ in range(self.max_walk):
            self.walks += 1
            b = self.barycentric(cell, point)
            j = int(np.argmin(b))
            if b[j] >= -INSIDE_TOL:
                return LocationResult(cell=cell, bary=b)
            visited.add(cell)
            nxt = int(self.neighbors[cell, j])
            if nxt < 0 or nxt in visited:
                break
            cell = nxt
        return self._exhaustive(point)


def locate(mesh: SimplicialMesh, point: np.ndarray, seed: Optional[int] = None, view: str = 'x') -> LocationResult:
    """Containing cell and barycentric coordinates of one point."""
    return PointLocator(mesh, view).locate(point, seed)


def transfer(mesh: SimplicialMesh, values: np.ndarray, points: np.ndarray, view: str = 'x',
             seeds: Optional[np.ndarray] = None, locator: Optional[PointLocator] = None) -> np.ndarray:
    """Evaluate the piecewise-linear interpolant of nodal `values` at `points`.

    values may be (N,) or (N, k); seeds optionally give a starting cell per point.
    """
    values = np.asarray(values, dtype=float)
    points = np.asarray(points, dtype=float)
    locator = locator or PointLocator(mesh, view)
    out = np.empty((points.shape[0],) + values.shape[1:])
    clamped = 0
    for i, p in enumerate(points):
        loc = locator.locate(p, None if seeds is None else seeds[i])
        clamped += loc.clamped
        out[i] = np.tensordot(loc.bary, values[mesh.cells[loc.cell]], axes=1)
    if clamped:
        logger.warning(f"{clamped} of {points.shape[0]} points were clamped during transfer")
    logger.debug(f"Transfer of {points.shape[0]} points: {locator.walks} walk steps, "
                 f"{locator.fallbacks} exhaustive searches")
    return out


def star_seeds(mesh: SimplicialMesh) -> np.ndarray:
    """One incident cell per node, a good walking seed for nearby points."""
    seeds = np.zeros(mesh.num_nodes, dtype=np.int64)
    seeds[mesh.cells[::-1].ravel()] = np.repeat(np.arange(mesh.num_cells)[::-1], mesh.dim + 1)
    return seeds
