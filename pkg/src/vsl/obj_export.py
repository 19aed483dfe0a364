"""Wavefront OBJ export of occupancy grids.

Each occupied cell becomes an axis-aligned unit cube; vertices shared by
neighboring cells are written once, and faces between two occupied cells are
omitted so only the visible surface remains.
"""

import numpy as np
import torch

from .errors import ShapeError

# unit-cube corner offsets, indexed by the face table below
_CORNERS = np.array([
    (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
    (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
])
# (neighbor offset, quad corner indices with outward winding)
_FACES = [
    ((0, 0, -1), (0, 3, 2, 1)),
    ((0, 0, 1), (4, 5, 6, 7)),
    ((0, -1, 0), (0, 1, 5, 4)),
    ((0, 1, 0), (3, 7, 6, 2)),
    ((-1, 0, 0), (0, 4, 7, 3)),
    ((1, 0, 0), (1, 2, 6, 5)),
]


def _occupancy(grid, threshold):
    if isinstance(grid, torch.Tensor):
        grid = grid.detach().cpu().numpy()
    arr = np.asarray(getattr(grid, "occupancy", grid))
    if arr.ndim != 3:
        raise ShapeError(f"expected a 3-D grid, got shape {arr.shape}")
    return arr > threshold


def grid_to_mesh(grid, threshold: float = 0.5):
    """(vertices, triangles) of the exposed surface; vertices deduplicated,
    triangles as 0-based index triples."""
    occ = _occupancy(grid, threshold)
    padded = np.zeros(tuple(d + 2 for d in occ.shape), dtype=bool)
    padded[1:-1, 1:-1, 1:-1] = occ

    vertex_index = {}
    vertices = []
    triangles = []

    def vid(pos):
        idx = vertex_index.get(pos)
        if idx is None:
            idx = len(vertices)
            vertex_index[pos] = idx
            vertices.append(pos)
        return idx

    for cell in np.argwhere(occ):
        x, y, z = (int(v) for v in cell)
        for (dx, dy, dz), quad in _FACES:
            if padded[x + dx + 1, y + dy + 1, z + dz + 1]:
                continue
            ids = [vid((x + int(cx), y + int(cy), z + int(cz)))
                   for cx, cy, cz in _CORNERS[list(quad)]]
            triangles.append((ids[0], ids[1], ids[2]))
            triangles.append((ids[0], ids[2], ids[3]))
    return vertices, triangles


def export_obj(grid, path, threshold: float = 0.5):
    """Write the surface mesh as OBJ text; an empty grid yields a valid
    (vertex-free) file. Returns (vertex_count, triangle_count)."""
    vertices, triangles = grid_to_mesh(grid, threshold)
    with open(path, "w") as fh:
        fh.write(f"# voxel surface: {len(vertices)} vertices, "
                 f"{len(triangles)} triangles\n")
        for x, y, z in vertices:
            fh.write(f"v {x} {y} {z}\n")
        for a, b, c in triangles:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")
    return len(vertices), len(triangles)
