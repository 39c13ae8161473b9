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

"""Simplicial mesh with physical and computational coordinates."""

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateCellError, MeshError

logger = logging.getLogger(__name__)

# Boundary classification per node
INTERIOR = 0
EDGE = 1
CORNER = 2

# det(E_K) <= DEGENERACY_TOL * diameter**d counts as degenerate
DEGENERACY_TOL = 1e-14


@dataclass
class ElementGeometry:
    """Edge matrices and derived quantities of one cell (or a batch of cells).

    Arrays carry a leading cell axis when produced by element_geometry().
    Edge matrix columns are x_i - x_0 for i = 1..d.
    """
    E: np.ndarray
    Ehat: np.ndarray
    J: np.ndarray
    r: np.ndarray
    vol: np.ndarray
    volhat: np.ndarray


@dataclass
class SimplicialMesh:
    """Shared simplicial topology carrying physical (x) and computational (xi) nodes.

    Args:
        nodes_x: (N, d) physical coordinates
        nodes_xi: (N, d) computational coordinates
        cells: (NC, d+1) node indices
        box_lo, box_hi: corners of the axis-aligned domain used for boundary tags
    """
    nodes_x: np.ndarray
    nodes_xi: np.ndarray
    cells: np.ndarray
    box_lo: np.ndarray
    box_hi: np.ndarray
    boundary_kind: np.ndarray = field(default=None)
    boundary_face: np.ndarray = field(default=None)

    def __post_init__(self):
        self.nodes_x = np.asarray(self.nodes_x, dtype=float)
        self.nodes_xi = np.asarray(self.nodes_xi, dtype=float)
        self.cells = np.asarray(self.cells, dtype=np.int64)
        self.box_lo = np.asarray(self.box_lo, dtype=float)
        self.box_hi = np.asarray(self.box_hi, dtype=float)

        if self.nodes_x.ndim != 2 or self.nodes_x.shape[1] not in (2, 3):
            raise MeshError(f"nodes_x must be (N, d) with d in {{2, 3}}, got {self.nodes_x.shape}")
        if self.nodes_x.shape != self.nodes_xi.shape:
            raise MeshError(f"nodes_x {self.nodes_x.shape} and nodes_xi {self.nodes_xi.shape} differ")
        d = self.nodes_x.shape[1]
        if self.cells.ndim != 2 or self.cells.shape[1] != d + 1:
            raise MeshError(f"cells must be (NC, {d + 1}), got {self.cells.shape}")
        n = self.nodes_x.shape[0]
        if self.cells.size and (self.cells.min() < 0 or self.cells.max() >= n):
            raise MeshError("cells reference node indices outside [0, N)")
        used = np.zeros(n, dtype=bool)
        used[self.cells.ravel()] = True
        if not used.all():
            raise MeshError(f"node {int(np.flatnonzero(~used)[0])} belongs to no cell")

        if self.boundary_kind is None or self.boundary_face is None:
            self.boundary_kind, self.boundary_face = classify_boundary(self.nodes_xi, self.box_lo, self.box_hi)

    @property
    def dim(self) -> int:
        return self.nodes_x.shape[1]

    @property
    def num_nodes(self) -> int:
        return self.nodes_x.shape[0]

    @property
    def num_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def diameter(self) -> float:
        """Diagonal of the domain box."""
        return float(np.linalg.norm(self.box_hi - self.box_lo))

    def face_normals(self) -> np.ndarray:
        """Unit normal of the boundary face for EDGE nodes, zero elsewhere."""
        normals = np.zeros_like(self.nodes_x)
        edge = np.flatnonzero(self.boundary_kind == EDGE)
        normals[edge, self.boundary_face[edge] // 2] = 1.0
        return normals

    def with_coordinates(self, nodes_x: Optional[np.ndarray] = None,
                         nodes_xi: Optional[np.ndarray] = None) -> 'SimplicialMesh':
        """Copy with replaced coordinates; topology and boundary tags are shared."""
        return replace(
            self,
            nodes_x=np.array(self.nodes_x if nodes_x is None else nodes_x, dtype=float),
            nodes_xi=np.array(self.nodes_xi if nodes_xi is None else nodes_xi, dtype=float),
        )


def classify_boundary(points: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                      rtol: float = 1e-10) -> Tuple[np.ndarray, np.ndarray]:
    """Tag nodes as interior, edge (with face id) or corner.

    Face ids are 2*axis for the lower bound and 2*axis + 1 for the upper bound.
    A node on two or more faces is a corner.
    """
    points = np.asarray(points, dtype=float)
    tol = rtol * float(np.max(hi - lo))
    on_lo = np.abs(points - lo) <= tol
    on_hi = np.abs(points - hi) <= tol
    on_face = on_lo | on_hi
    count = on_face.sum(axis=1)

    kind = np.full(points.shape[0], INTERIOR, dtype=np.int64)
    kind[count == 1] = EDGE
    kind[count >= 2] = CORNER

    face = np.full(points.shape[0], -1, dtype=np.int64)
    edge = np.flatnonzero(count == 1)
    axis = np.argmax(on_face[edge], axis=1)
    face[edge] = 2 * axis + on_hi[edge, axis].astype(np.int64)
    return kind, face


def snap_to_boundary(points: np.ndarray, mesh: SimplicialMesh) -> np.ndarray:
    """Put EDGE nodes exactly on their face and CORNER nodes exactly on the box corner."""
    out = np.array(points, dtype=float)
    lo, hi = mesh.box_lo, mesh.box_hi
    edge = np.flatnonzero(mesh.boundary_kind == EDGE)
    axis = mesh.boundary_face[edge] // 2
    upper = mesh.boundary_face[edge] % 2 == 1
    out[edge, axis] = np.where(upper, hi[axis], lo[axis])

    corner = np.flatnonzero(mesh.boundary_kind == CORNER)
    if corner.size:
        mid = 0.5 * (lo + hi)
        out[corner] = np.where(out[corner] < mid, lo, hi)
    return out


def build_structured_mesh(nx: int, ny: int,
                          domain: Sequence[Sequence[float]] = ((0.0, 1.0), (0.0, 1.0))) -> SimplicialMesh:
    """Staggered triangulation of a box with 2*nx*ny triangles.

    Quads in even rows are split along the (i,j)-(i+1,j+1) diagonal, odd rows
    along the other one, so every interior node has six incident triangles.
    """
    if int(nx) < 1 or int(ny) < 1:
        raise MeshError(f"subdivision counts must be >= 1, got nx={nx}, ny={ny}")
    nx, ny = int(nx), int(ny)
    (x0, x1), (y0, y1) = domain
    if not (x1 > x0 and y1 > y0):
        raise MeshError(f"empty domain {domain}")

    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    def node(i, j):
        return j * (nx + 1) + i

    cells = []
    for j in range(ny):
        for i in range(nx):
            a, b, c, e = node(i, j), node(i + 1, j), node(i + 1, j + 1), node(i, j + 1)
            if j % 2 == 0:
                cells.append((a, b, c))
                cells.append((a, c, e))
            else:
                cells.append((a, b, e))
                cells.append((b, c, e))

    lo = np.array([x0, y0])
    hi = np.array([x1, y1])
    mesh = SimplicialMesh(nodes, nodes.copy(), np.array(cells), lo, hi)
    logger.debug(f"Structured mesh {nx}x{ny}: {mesh.num_nodes} nodes, {mesh.num_cells} cells")
    return mesh


def build_structured_mesh_3d(nx: int, ny: int, nz: int,
                             domain: Sequence[Sequence[float]] = ((0.0, 1.0),) * 3) -> SimplicialMesh:
    """Kuhn (six tetrahedra per brick) subdivision of a 3D box."""
    if min(int(nx), int(ny), int(nz)) < 1:
        raise MeshError(f"subdivision counts must be >= 1, got {(nx, ny, nz)}")
    counts = (int(nx), int(ny), int(nz))
    axes = [np.linspace(lo, hi, n + 1) for (lo, hi), n in zip(domain, counts)]
    grid = np.meshgrid(*axes, indexing='ij')
    nodes = np.column_stack([g.ravel() for g in grid])
    strides = np.array([(counts[1] + 1) * (counts[2] + 1), counts[2] + 1, 1])

    cells = []
    for i, j, k in itertools.product(range(counts[0]), range(counts[1]), range(counts[2])):
        base = np.array([i, j, k])
        for perm in itertools.permutations(range(3)):
            corner = base.copy()
            tet = [int(corner @ strides)]
            for axis in perm:
                corner[axis] += 1
                tet.append(int(corner @ strides))
            cells.append(tet)
    cells = np.array(cells, dtype=np.int64)

    E = edge_matrix_batch(nodes, cells)
    flip = np.linalg.det(E) < 0
    cells[flip, 1], cells[flip, 2] = cells[flip, 2].copy(), cells[flip, 1].copy()

    lo = np.array([d[0] for d in domain], dtype=float)
    hi = np.array([d[1] for d in domain], dtype=float)
    return SimplicialMesh(nodes, nodes.copy(), cells, lo, hi)


def edge_matrix_batch(points: np.ndarray, cells: np.ndarray) -> np.ndarray:
    """(NC, d, d) edge matrices whose columns are x_i - x_0."""
    verts = points[cells]
    return np.swapaxes(verts[:, 1:, :] - verts[:, :1, :], 1, 2)


def check_admissible(E: np.ndarray, scale: float, view: str = 'x') -> np.ndarray:
    """Return det(E) per cell, raising DegenerateCellError on the first bad cell."""
    det = np.linalg.det(E)
    d = E.shape[-1]
    bad = np.flatnonzero(det <= DEGENERACY_TOL * scale ** d)
    if bad.size:
        raise DegenerateCellError(int(bad[0]), float(det[bad[0]]), view)
    return det


def cell_volumes(points: np.ndarray, cells: np.ndarray) -> np.ndarray:
    """Signed simplex volumes det(E_K)/d!."""
    E = edge_matrix_batch(points, cells)
    return np.linalg.det(E) / math.factorial(E.shape[-1])


def element_geometry(mesh: SimplicialMesh, check: bool = True) -> ElementGeometry:
    """Geometry of every cell at once."""
    E = edge_matrix_batch(mesh.nodes_x, mesh.cells)
    Ehat = edge_matrix_batch(mesh.nodes_xi, mesh.cells)
    if check:
        det = check_admissible(E, mesh.diameter, 'x')
        dethat = check_admissible(Ehat, mesh.diameter, 'xi')
    else:
        det = np.linalg.det(E)
        dethat = np.linalg.det(Ehat)
    J = E @ np.linalg.inv(Ehat)
    fact = math.factorial(mesh.dim)
    return ElementGeometry(E=E, Ehat=Ehat, J=J, r=det / dethat, vol=det / fact, volhat=dethat / fact)


def edge_matrices(mesh: SimplicialMesh, cell: int) -> ElementGeometry:
    """Geometry of a single cell; degenerate cells raise with the cell id."""
    if not 0 <= int(cell) < mesh.num_cells:
        raise MeshError(f"cell {cell} out of range [0, {mesh.num_cells})")
    idx = mesh.cells[int(cell)][None, :]
    E = edge_matrix_batch(mesh.nodes_x, idx)
    Ehat = edge_matrix_batch(mesh.nodes_xi, idx)
    for mat, view in ((E, 'x'), (Ehat, 'xi')):
        try:
            check_admissible(mat, mesh.diameter, view)
        except DegenerateCellError as e:
            raise DegenerateCellError(int(cell), e.det, view) from None
    E, Ehat = E[0], Ehat[0]
    J = E @ np.linalg.inv(Ehat)
    fact = math.factorial(mesh.dim)
    det, dethat = np.linalg.det(E), np.linalg.det(Ehat)
    return ElementGeometry(E=E, Ehat=Ehat, J=J, r=float(np.linalg.det(J)),
                           vol=float(det / fact), volhat=float(dethat / fact))


def apply_r(X: np.ndarray) -> np.ndarray:
    """Left-multiply by R, the (d+1) x d matrix with a first row of -1 above the identity."""
    return np.concatenate([-X.sum(axis=-2, keepdims=True), X], axis=-2)


def barycentric_gradients(E: np.ndarray) -> np.ndarray:
    """Rows are the gradients of the barycentric coordinates, V = R E^-1."""
    return apply_r(np.linalg.inv(E))


def element_stars(mesh: SimplicialMesh) -> List[List[int]]:
    """Cells incident to each node, in increasing cell order."""
    stars: List[List[int]] = [[] for _ in range(mesh.num_nodes)]
    for k, cell in enumerate(mesh.cells):
        for node in cell:
            stars[int(node)].append(k)
    return stars


def star_incidence(mesh: SimplicialMesh) -> sp.csr_matrix:
    """Gather matrix S with (S @ rows)[i] = sum of the per-(cell, vertex) rows of node i.

    Columns are ordered cell-major (cell * (d+1) + local vertex), matching
    element arrays reshaped to (NC*(d+1), ...).
    """
    nc, nv = mesh.cells.shape
    cols = np.arange(nc * nv)
    rows = mesh.cells.ravel()
    data = np.ones(nc * nv)
    return sp.csr_matrix((data, (rows, cols)), shape=(mesh.num_nodes, nc * nv))


def node_adjacency(mesh: SimplicialMesh) -> sp.csr_matrix:
    """Boolean node-to-node adjacency through shared cells (diagonal included)."""
    node_cell = sp.csr_matrix(
        (np.ones(mesh.cells.size), (mesh.cells.ravel(), np.repeat(np.arange(mesh.num_cells), mesh.dim + 1))),
        shape=(mesh.num_nodes, mesh.num_cells),
    )
    adj = (node_cell @ node_cell.T).tocsr()
    adj.data[:] = 1.0
    return adj


def cell_neighbors(cells: np.ndarray) -> np.ndarray:
    """(NC, d+1) index of the cell across the facet opposite each local vertex, -1 on the boundary."""
    nc, nv = cells.shape
    neighbors = np.full((nc, nv), -1, dtype=np.int64)
    facets = {}
    for k in range(nc):
        for local in range(nv):
            key = tuple(sorted(int(n) for j, n in enumerate(cells[k]) if j != local))
            other = facets.get(key)
            if other is None:
                facets[key] = (k, local)
            else:
                neighbors[k, local] = other[0]
                neighbors[other[0], other[1]] = k
    return neighbors


def min_heights_in_metric(E: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Per-cell minimum vertex-to-facet distance measured in the cell metric.

    The height of vertex j is 1/sqrt(g_j^T M^-1 g_j) with g_j the gradient of
    its barycentric coordinate.
    """
    M = np.broadcast_to(M, E.shape)
    eig = np.linalg.eigvalsh(M)
    if np.any(eig[..., 0] <= 0):
        raise ValueError("metric tensor is not symmetric positive definite")
    V = barycentric_gradients(E)
    Minv = np.linalg.inv(M)
    norms = np.einsum('kja,kab,kjb->kj', V, Minv, V)
    return 1.0 / np.sqrt(norms.max(axis=1))


def min_height_in_metric(geom: ElementGeometry, M_K: np.ndarray) -> float:
    """Minimum height a_{K,M} of one physical cell in the metric M_K."""
    M_K = np.asarray(M_K, dtype=float)
    if not np.allclose(M_K, M_K.T) or np.linalg.eigvalsh(M_K)[0] <= 0:
        raise ValueError("metric tensor is not symmetric positive definite")
    return float(min_heights_in_metric(np.asarray(geom.E)[None], M_K[None])[0])


def inscribed_diameters(E: np.ndarray) -> np.ndarray:
    """Diameter of the inscribed ball of each cell: 2 / sum_j |grad lambda_j|."""
    V = barycentric_gradients(E)
    return 2.0 / np.linalg.norm(V, axis=2).sum(axis=1)


def perturb_nodes(mesh: SimplicialMesh, amplitude: float, rng: np.random.Generator,
                  view: str = 'xi') -> SimplicialMesh:
    """Randomly displace non-corner nodes by up to amplitude * (smallest grid spacing).

    Edge nodes move only along their face so the box stays intact.
    """
    coords = mesh.nodes_xi if view == 'xi' else mesh.nodes_x
    E = edge_matrix_batch(coords, mesh.cells)
    h = float(np.min(np.linalg.norm(E, axis=1)))
    step = rng.uniform(-amplitude * h, amplitude * h, size=coords.shape)
    step[mesh.boundary_kind == CORNER] = 0.0
    normals = mesh.face_normals()
    step -= np.sum(step * normals, axis=1, keepdims=True) * normals
    moved = snap_to_boundary(coords + step, mesh)
    check_admissible(edge_matrix_batch(moved, mesh.cells), mesh.diameter, view)
    if view == 'xi':
        return mesh.with_coordinates(nodes_xi=moved)
    return mesh.with_coordinates(nodes_x=moved)
