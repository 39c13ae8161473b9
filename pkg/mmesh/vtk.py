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

"""Legacy ASCII VTK unstructured-grid writer and reader."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from .errors import MeshError
from .mesh import SimplicialMesh

logger = logging.getLogger(__name__)

VTK_TRIANGLE = 5
VTK_TETRA = 10

# Point-data vector holding the computational coordinates, needed to resume a run
XI_ARRAY = "xi"


@dataclass
class VtkDataset:
    mesh: SimplicialMesh
    cell_data: Dict[str, np.ndarray] = field(default_factory=dict)
    point_data: Dict[str, np.ndarray] = field(default_factory=dict)


def _fmt(value: float) -> str:
    return repr(float(value))


def _pad3(rows: np.ndarray) -> np.ndarray:
    out = np.zeros((rows.shape[0], 3))
    out[:, :rows.shape[1]] = rows
    return out


def _write_array(lines, name: str, values: np.ndarray, count: int, dim: int):
    values = np.asarray(values, dtype=float)
    if values.shape == (count,):
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        lines.extend(_fmt(v) for v in values)
    elif values.shape == (count, dim):
        lines.append(f"VECTORS {name} double")
        lines.extend(" ".join(_fmt(v) for v in row) for row in _pad3(values))
    elif values.shape == (count, dim, dim):
        lines.append(f"TENSORS {name} double")
        for tensor in values:
            full = np.zeros((3, 3))
            full[:dim, :dim] = tensor
            lines.extend(" ".join(_fmt(v) for v in row) for row in full)
    else:
        raise ValueError(f"array '{name}' has unsupported shape {values.shape}")


def write_vtk(path: Union[str, Path], mesh: SimplicialMesh,
              cell_data: Optional[Dict[str, np.ndarray]] = None,
              point_data: Optional[Dict[str, np.ndarray]] = None,
              title: str = "mmesh") -> Path:
    """Write the physical mesh with optional per-cell and per-node arrays.

    Scalars, d-vectors and d x d tensors are supported; vectors and tensors are
    zero-padded to three components as the format requires.
    """
    path = Path(path)
    d = mesh.dim
    nc, nn = mesh.num_cells, mesh.num_nodes
    cell_type = VTK_TRIANGLE if d == 2 else VTK_TETRA

    lines = ["# vtk DataFile Version 2.0", title.replace("\n", " "), "ASCII", "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {nn} double")
    lines.extend(" ".join(_fmt(v) for v in row) for row in _pad3(mesh.nodes_x))
    lines.append(f"CELLS {nc} {nc * (d + 2)}")
    lines.extend(f"{d + 1} " + " ".join(str(int(n)) for n in cell) for cell in mesh.cells)
    lines.append(f"CELL_TYPES {nc}")
    lines.extend(str(cell_type) for _ in range(nc))

    if cell_data:
        lines.append(f"CELL_DATA {nc}")
        for name, values in cell_data.items():
            _write_array(lines, name, values, nc, d)

    lines.append(f"POINT_DATA {nn}")
    _write_array(lines, XI_ARRAY, mesh.nodes_xi, nn, d)
    for name, values in (point_data or {}).items():
        _write_array(lines, name, values, nn, d)

    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.debug(f"Wrote {path} ({nn} points, {nc} cells)")
    return path


def read_vtk(path: Union[str, Path]) -> VtkDataset:
    """Read a file produced by write_vtk (same subset of the legacy format).

    Boundary tags are recomputed from the bounding box of the computational
    coordinates.
    """
    path = Path(path)
    tokens = path.read_text(encoding="utf-8").split("\n")
    if not tokens or not tokens[0].startswith("# vtk DataFile"):
        raise MeshError(f"{path}: not a legacy VTK file")
    if tokens[2].strip() != "ASCII":
        raise MeshError(f"{path}: only ASCII legacy VTK is supported")
    words = " ".join(tokens[3:]).split()
    pos = 0

    def take(n):
        nonlocal pos
        chunk = words[pos:pos + n]
        pos += n
        return chunk

    points = cells = types = None
    cell_data: Dict[str, np.ndarray] = {}
    point_data: Dict[str, np.ndarray] = {}
    section = None
    while pos < len(words):
        key = take(1)[0].upper()
        if key == "DATASET":
            kind = take(1)[0]
            if kind.upper() != "UNSTRUCTURED_GRID":
                raise MeshError(f"{path}: unsupported dataset {kind}")
        elif key == "POINTS":
            n, _ = take(2)
            points = np.array(take(3 * int(n)), dtype=float).reshape(-1, 3)
        elif key == "CELLS":
            n, size = take(2)
            flat = np.array(take(int(size)), dtype=np.int64)
            width = flat[0] + 1
            cells = flat.reshape(int(n), width)[:, 1:]
        elif key == "CELL_TYPES":
            n = int(take(1)[0])
            types = np.array(take(n), dtype=np.int64)
        elif key in ("CELL_DATA", "POINT_DATA"):
            section = key
            take(1)
        elif key in ("SCALARS", "VECTORS", "TENSORS"):
            name = take(1)[0]
            take(1)
            count = cells.shape[0] if section == "CELL_DATA" else points.shape[0]
            if key == "SCALARS":
                if words[pos].isdigit():
                    take(1)
                if words[pos].upper() == "LOOKUP_TABLE":
                    take(2)
                values = np.array(take(count), dtype=float)
            elif key == "VECTORS":
                values = np.array(take(3 * count), dtype=float).reshape(count, 3)
            else:
                values = np.array(take(9 * count), dtype=float).reshape(count, 3, 3)
            (cell_data if section == "CELL_DATA" else point_data)[name] = values
        else:
            raise MeshError(f"{path}: unexpected keyword '{key}'")

    if points is None or cells is None:
        raise MeshError(f"{path}: missing POINTS or CELLS")
    if types is not None and np.any((types != VTK_TRIANGLE) & (types != VTK_TETRA)):
        raise MeshError(f"{path}: only triangles and tetrahedra are supported")

    d = cells.shape[1] - 1
    nodes_x = points[:, :d]
    xi = point_data.pop(XI_ARRAY, None)
    nodes_xi = nodes_x.copy() if xi is None else xi[:, :d]
    for name, values in list(cell_data.items()):
        if values.ndim == 2:
            cell_data[name] = values[:, :d]
        elif values.ndim == 3:
            cell_data[name] = values[:, :d, :d]
    for name, values in list(point_data.items()):
        if values.ndim == 2:
            point_data[name] = values[:, :d]

    mesh = SimplicialMesh(nodes_x, nodes_xi, cells, nodes_xi.min(axis=0), nodes_xi.max(axis=0))
    return VtkDataset(mesh=mesh, cell_data=cell_data, point_data=point_data)
