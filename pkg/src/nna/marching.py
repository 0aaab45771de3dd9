"""Isosurface extraction on a regular grid (classic 15-case marching cubes).

Vertices are placed on grid edges by linear interpolation and welded across
cells, so closed isosurfaces come out watertight. Ambiguous faces use the
table's default resolution with a midpoint fallback on flat edges.
"""

import numpy as np

from ._mctables import EDGE_TABLE, TRI_TABLE

# cube corner offsets in (x, y, z), Bourke numbering
_CORNERS = np.array(
    [
        [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
        [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
    ],
    dtype=np.int64,
)

_EDGE_CORNERS = [(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4),
                 (0, 4), (1, 5), (2, 6), (3, 7)]


def marching_cubes(scalar_field, grid_bounds, resolution, iso=0.0, batch=65536):
    """Triangulate the iso level set of ``scalar_field`` inside ``grid_bounds``.

    scalar_field: callable mapping [N, 3] points to [N] values.
    grid_bounds: (min_xyz, max_xyz). resolution: int or (nx, ny, nz) >= 2,
    the number of grid points per axis. Returns (vertices, faces).
    """
    lo = np.asarray(grid_bounds[0], dtype=np.float64)
    hi = np.asarray(grid_bounds[1], dtype=np.float64)
    if np.any(hi <= lo):
        raise ValueError("degenerate grid bounds")
    if np.isscalar(resolution):
        res = (int(resolution),) * 3
    else:
        res = tuple(int(r) for r in resolution)
    if min(res) < 2:
        raise ValueError("resolution must be >= 2 per axis")
    nx, ny, nz = res
    axes = [np.linspace(lo[i], hi[i], res[i]) for i in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = np.empty(len(pts), dtype=np.float64)
    for i in range(0, len(pts), batch):
        vals[i : i + batch] = np.asarray(scalar_field(pts[i : i + batch])).reshape(-1)
    F = vals.reshape(nx, ny, nz)

    inside = F < iso
    cube_idx = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int32)
    for bit, (dx, dy, dz) in enumerate(_CORNERS):
        cube_idx |= inside[dx : dx + nx - 1, dy : dy + ny - 1, dz : dz + nz - 1] << bit

    active = np.argwhere((EDGE_TABLE[cube_idx] != 0))
    verts = []
    vert_index = {}
    faces = []
    spacing = (hi - lo) / (np.array(res) - 1)

    def edge_vertex(cx, cy, cz, edge):
        ca, cb = _EDGE_CORNERS[edge]
        ax, ay, az = _CORNERS[ca] + (cx, cy, cz)
        bx, by, bz = _CORNERS[cb] + (cx, cy, cz)
        key = (min((ax, ay, az), (bx, by, bz)), max((ax, ay, az), (bx, by, bz)))
        vid = vert_index.get(key)
        if vid is not None:
            return vid
        fa = F[ax, ay, az]
        fb = F[bx, by, bz]
        denom = fb - fa
        t = 0.5 if abs(denom) < 1e-30 else (iso - fa) / denom
        t = min(max(t, 0.0), 1.0)
        pa = lo + spacing * (ax, ay, az)
        pb = lo + spacing * (bx, by, bz)
        vid = len(verts)
        verts.append(pa + t * (pb - pa))
        vert_index[key] = vid
        return vid

    for cx, cy, cz in active:
        row = TRI_TABLE[cube_idx[cx, cy, cz]]
        for k in range(0, 16, 3):
            if row[k] < 0:
                break
            v0 = edge_vertex(cx, cy, cz, row[k])
            v1 = edge_vertex(cx, cy, cz, row[k + 1])
            v2 = edge_vertex(cx, cy, cz, row[k + 2])
            if v0 != v1 and v1 != v2 and v2 != v0:
                faces.append((v0, v1, v2))

    if not verts:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    return np.asarray(verts), np.asarray(faces, dtype=np.int64)


def euler_characteristic(vertices, faces):
    edges = set()
    for a, b, c in faces:
        edges.add((min(a, b), max(a, b)))
        edges.add((min(b, c), max(b, c)))
        edges.add((min(c, a), max(c, a)))
    return len(vertices) - len(edges) + len(faces)
