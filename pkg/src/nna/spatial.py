"""Spatial queries over the posed proxy mesh: KNN, closest surface point,
occlusion, geometry-guided ray sampling, and mesh export."""

import struct
from dataclasses import dataclass

import numpy as np

from . import _geomkernels as gk

DEFAULT_BAND = 0.10
OCCLUSION_EPS_T = 1e-4


@dataclass
class TriangleMesh:
    vertices: np.ndarray   # [N, 3]
    faces: np.ndarray      # [F, 3]

    def mean_edge_length(self):
        v, f = self.vertices, self.faces
        e = np.concatenate([v[f[:, 0]] - v[f[:, 1]], v[f[:, 1]] - v[f[:, 2]], v[f[:, 2]] - v[f[:, 0]]])
        return float(np.mean(np.linalg.norm(e, axis=1)))


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit

    def __post_init__(self):
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")


@dataclass
class RaySampleSet:
    depths: np.ndarray      # strictly increasing [n]
    positions: np.ndarray   # [n, 3]
    is_fine: np.ndarray     # [n] bool provenance flags

    def __len__(self):
        return len(self.depths)


class _Grid:
    def __init__(self, lo, hi, cell_size):
        lo = np.asarray(lo, dtype=np.float64) - 1e-9
        hi = np.asarray(hi, dtype=np.float64) + 1e-9
        self.cell_size = float(cell_size)
        self.origin = lo - 0.5 * cell_size
        dims = np.ceil((hi - self.origin) / cell_size).astype(np.int64) + 1
        self.dims = np.maximum(dims, 1)

    def cell_index(self, pts):
        c = np.floor((pts - self.origin) / self.cell_size).astype(np.int64)
        c = np.clip(c, 0, self.dims - 1)
        return (c[:, 0] * self.dims[1] + c[:, 1]) * self.dims[2] + c[:, 2]


def _csr_from_cells(cell_ids, n_cells, n_items):
    order = np.argsort(cell_ids, kind="stable")
    sorted_cells = cell_ids[order]
    start = np.zeros(n_cells + 1, dtype=np.int64)
    counts = np.bincount(sorted_cells, minlength=n_cells)
    start[1:] = np.cumsum(counts)
    return start, order.astype(np.int64)


class VertexKnnIndex:
    """Uniform-grid index over a point set with exact K-nearest queries."""

    def __init__(self, points, cell_size):
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        if len(self.points) == 0:
            raise ValueError("empty index")
        self.grid = _Grid(self.points.min(axis=0), self.points.max(axis=0), cell_size)
        cells = self.grid.cell_index(self.points)
        n_cells = int(np.prod(self.grid.dims))
        self.cell_start, self.items = _csr_from_cells(cells, n_cells, len(points))

    @classmethod
    def from_mesh(cls, mesh):
        return cls(mesh.vertices, 2.0 * mesh.mean_edge_length())

    def query(self, x, K):
        """(ids, dists) of the K nearest points, ascending (distance, id)."""
        if K < 1:
            raise ValueError("K must be >= 1")
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        K_eff = min(K, len(self.points))
        ids, dists = gk.knn_query(
            np.ascontiguousarray(x), self.points, self.cell_start, self.items,
            self.grid.origin, self.grid.cell_size, self.grid.dims, K_eff,
        )
        return ids, dists


def knn_vertices(index, x, K):
    """K nearest (vertex id, distance) pairs for a single query point."""
    ids, dists = index.query(np.asarray(x, dtype=np.float64)[None, :], K)
    return list(zip(ids[0].tolist(), dists[0].tolist()))


class MeshIndex:
    """Uniform grid over triangles: exact closest point, occlusion, intervals."""

    def __init__(self, mesh, cell_size=None, face_components=None):
        self.mesh = mesh
        self.vertices = np.ascontiguousarray(mesh.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(mesh.faces, dtype=np.int64)
        if cell_size is None:
            cell_size = 2.0 * mesh.mean_edge_length()
        v, f = self.vertices, self.faces
        tri = v[f]  # [F, 3, 3]
        lo = tri.min(axis=1) - 1e-9
        hi = tri.max(axis=1) + 1e-9
        self.grid = _Grid(v.min(axis=0), v.max(axis=0), cell_size)
        # bin each triangle into every cell its AABB overlaps
        g = self.grid
        clo = np.clip(np.floor((lo - g.origin) / g.cell_size).astype(np.int64), 0, g.dims - 1)
        chi = np.clip(np.floor((hi - g.origin) / g.cell_size).astype(np.int64), 0, g.dims - 1)
        cells = []
        items = []
        for fid in range(len(f)):
            x0, y0, z0 = clo[fid]
            x1, y1, z1 = chi[fid]
            for ix in range(x0, x1 + 1):
                for iy in range(y0, y1 + 1):
                    for iz in range(z0, z1 + 1):
                        cells.append((ix * g.dims[1] + iy) * g.dims[2] + iz)
                        items.append(fid)
        cells = np.asarray(cells, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        n_cells = int(np.prod(g.dims))
        order = np.argsort(cells, kind="stable")
        self.items = items[order]
        start = np.zeros(n_cells + 1, dtype=np.int64)
        start[1:] = np.cumsum(np.bincount(cells, minlength=n_cells))
        self.cell_start = start
        if face_components is None:
            face_components = np.zeros(len(f), dtype=np.int64)
        self.face_components = np.ascontiguousarray(face_components, dtype=np.int64)
        self.n_components = int(self.face_components.max()) + 1 if len(f) else 0

    def nearest_surface_point(self, x):
        """(points [Q,3], face ids [Q], barycentric [Q,3], distances [Q])."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return gk.nearest_triangles(
            np.ascontiguousarray(x), self.vertices, self.faces,
            self.cell_start, self.items, self.grid.origin, self.grid.cell_size, self.grid.dims,
        )

    def segments_occluded(self, p0, p1, eps_t=OCCLUSION_EPS_T):
        p0 = np.ascontiguousarray(np.atleast_2d(p0), dtype=np.float64)
        p1 = np.ascontiguousarray(np.atleast_2d(p1), dtype=np.float64)
        hit = gk.segments_occluded(
            p0, p1, self.vertices, self.faces, self.cell_start, self.items,
            self.grid.origin, self.grid.cell_size, self.grid.dims, eps_t,
        )
        return hit.astype(bool)

    def ray_intervals(self, origins, dirs):
        """(t_enter, t_exit) per ray; inf/-inf when the mesh is missed."""
        origins = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
        dirs = np.ascontiguousarray(np.atleast_2d(dirs), dtype=np.float64)
        return gk.ray_mesh_intervals(
            origins, dirs, self.vertices, self.faces, self.cell_start, self.items,
            self.grid.origin, self.grid.cell_size, self.grid.dims,
        )

    def points_inside(self, pts, ray_dir=None):
        """Parity sign per point (True = inside), per closed component."""
        pts = np.ascontiguousarray(np.atleast_2d(pts), dtype=np.float64)
        if ray_dir is None:
            ray_dir = np.array([0.5773502691896258, 0.30102999566, 0.7548776662])
            ray_dir = ray_dir / np.linalg.norm(ray_dir)
        return gk.parity_inside(
            pts, self.vertices, self.faces, self.face_components,
            max(self.n_components, 1), np.ascontiguousarray(ray_dir, dtype=np.float64),
            self.cell_start, self.items, self.grid.origin, self.grid.cell_size, self.grid.dims,
        ).astype(bool)

    def signed_distance(self, pts):
        """Exact mesh distance with ray-parity sign (negative inside)."""
        _, _, _, dist = self.nearest_surface_point(pts)
        inside = self.points_inside(pts)
        return np.where(inside, -dist, dist)


def nearest_surface_point(mesh_or_index, x):
    """Closest surface point for one query: (point, face id, barycentric)."""
    index = mesh_or_index if isinstance(mesh_or_index, MeshIndex) else MeshIndex(mesh_or_index)
    p, f, b, _ = index.nearest_surface_point(np.asarray(x, dtype=np.float64)[None, :])
    return p[0], int(f[0]), b[0]


def interpolated_skin_weight(vertex_weights, faces, face_id, bary):
    """Convex blend of the three vertex weight rows of a face."""
    bary = np.asarray(bary, dtype=np.float64)
    if np.any(bary < -1e-12) or abs(bary.sum() - 1.0) > 1e-9:
        raise ValueError("barycentric coordinates must lie in the simplex")
    tri = faces[face_id]
    return (vertex_weights[tri] * bary[:, None]).sum(axis=0)


def ray_mesh_occluded(mesh_or_index, x, camera_center):
    """True iff the open segment from camera_center to x crosses the mesh."""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(camera_center, dtype=np.float64)
    if np.allclose(x, c):
        raise ValueError("query point coincides with the camera center")
    index = mesh_or_index if isinstance(mesh_or_index, MeshIndex) else MeshIndex(mesh_or_index)
    return bool(index.segments_occluded(c[None, :], x[None, :])[0])


def neus_weights_np(sdf, k):
    """Plain-numpy NeuS section weights from consecutive SDF samples [R, S]."""
    phi = 1.0 / (1.0 + np.exp(-k * sdf))
    alpha = np.maximum((phi[:, :-1] - phi[:, 1:]) / np.maximum(phi[:, :-1], 1e-12), 0.0)
    one_m = 1.0 - alpha
    T = np.concatenate([np.ones((len(sdf), 1)), np.cumprod(one_m[:, :-1], axis=1)], axis=1)
    return T * alpha


def sample_near_surface(ray, mesh_index, band, n_coarse, n_fine, sdf_query,
                        inv_variance_k=40.0, jitter_coarse=None, jitter_fine=None):
    """Geometry-guided samples: stratified coarse in the dilated hit interval,
    plus importance samples from coarse NeuS weights, merged and sorted.

    Returns an empty RaySampleSet when the ray misses the dilated mesh.
    """
    if band <= 0 or n_coarse < 1 or n_fine < 0:
        raise ValueError("band must be positive and counts >= 1")
    sets = sample_near_surface_batch(
        ray.origin[None, :], ray.direction[None, :], mesh_index, band, n_coarse,
        n_fine, sdf_query, inv_variance_k,
        None if jitter_coarse is None else jitter_coarse[None, :],
        None if jitter_fine is None else jitter_fine[None, :],
    )
    return sets[0]


def sample_near_surface_batch(origins, dirs, mesh_index, band, n_coarse, n_fine,
                              sdf_query, inv_variance_k=40.0,
                              jitter_coarse=None, jitter_fine=None):
    """Vectorized sample_near_surface over a ray batch; one sdf_query call."""
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    n_rays = len(origins)
    t_in, t_out = mesh_index.ray_intervals(origins, dirs)
    hit = np.isfinite(t_in)
    t0 = np.where(hit, t_in - band, 0.0)
    t1 = np.where(hit, t_out + band, 0.0)
    t0 = np.maximum(t0, 1e-4)

    if jitter_coarse is None:
        jitter_coarse = np.full((n_rays, n_coarse), 0.5)
    if jitter_fine is None:
        jitter_fine = np.full((n_rays, max(n_fine, 1)), 0.5)

    frac = (np.arange(n_coarse)[None, :] + jitter_coarse) / n_coarse
    t_coarse = t0[:, None] + (t1 - t0)[:, None] * frac

    out = [None] * n_rays
    hit_ids = np.nonzero(hit)[0]
    for i in np.nonzero(~hit)[0]:
        out[i] = RaySampleSet(np.zeros(0), np.zeros((0, 3)), np.zeros(0, dtype=bool))
    if len(hit_ids) == 0 or n_fine == 0:
        for i in hit_ids:
            pos = origins[i] + t_coarse[i][:, None] * dirs[i]
            out[i] = RaySampleSet(t_coarse[i], pos, np.zeros(n_coarse, dtype=bool))
        return out

    pts = origins[hit_ids, None, :] + t_coarse[hit_ids, :, None] * dirs[hit_ids, None, :]
    sdf = np.asarray(sdf_query(pts.reshape(-1, 3))).reshape(len(hit_ids), n_coarse)
    w = neus_weights_np(sdf, inv_variance_k)  # [R, n_coarse-1]

    for row, i in enumerate(hit_ids):
        bins = w[row] + 1e-5
        cdf = np.concatenate([[0.0], np.cumsum(bins / bins.sum())])
        cdf[-1] = 1.0
        u = (np.arange(n_fine) + jitter_fine[i, :n_fine]) / n_fine
        seg = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, n_coarse - 2)
        local = (u - cdf[seg]) / np.maximum(cdf[seg + 1] - cdf[seg], 1e-12)
        tc = t_coarse[i]
        t_new = tc[seg] + local * (tc[seg + 1] - tc[seg])
        merged = np.concatenate([tc, t_new])
        flags = np.concatenate([np.zeros(len(tc), bool), np.ones(len(t_new), bool)])
        order = np.argsort(merged, kind="stable")
        depths = merged[order]
        fine_flag = flags[order]
        # exact ties (possible with degenerate jitter) break strict ordering;
        # nudge to the next representable depth
        for j in range(1, len(depths)):
            if depths[j] <= depths[j - 1]:
                depths[j] = np.nextafter(depths[j - 1], np.inf)
        pos = origins[i] + depths[:, None] * dirs[i]
        out[i] = RaySampleSet(depths, pos, fine_flag)
    return out


# ---------------------------------------------------------------------------
# mesh export


def save_obj(path, vertices, faces):
    with open(path, "w") as f:
        for v in vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for a, b, c in faces:
            f.write(f"f {a + 1} {b + 1} {c + 1}\n")


def save_stl(path, vertices, faces):
    v = np.asarray(vertices, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(b"\0" * 80)
        f.write(struct.pack("<I", len(faces)))
        for a, b, c in faces:
            n = np.cross(v[b] - v[a], v[c] - v[a])
            norm = np.linalg.norm(n)
            n = n / norm if norm > 0 else n
            f.write(struct.pack("<3f", *n))
            f.write(struct.pack("<3f", *v[a]))
            f.write(struct.pack("<3f", *v[b]))
            f.write(struct.pack("<3f", *v[c]))
            f.write(struct.pack("<H", 0))
