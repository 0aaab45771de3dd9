"""Numba kernels behind the spatial queries: exact KNN, closest triangle,
segment-mesh occlusion, ray intervals, parity sign, and a z-buffer rasterizer.

All kernels are deterministic single-threaded loops over query batches; the
uniform grid is stored CSR-style (cell_start, items).
"""

import numba
import numpy as np
from numba import njit

F8 = np.float64
I8 = np.int64


@njit(cache=True, nogil=True)
def _cell_of(p, origin, inv_cell, dims):
    ix = int(np.floor((p[0] - origin[0]) * inv_cell))
    iy = int(np.floor((p[1] - origin[1]) * inv_cell))
    iz = int(np.floor((p[2] - origin[2]) * inv_cell))
    if ix < 0:
        ix = 0
    if iy < 0:
        iy = 0
    if iz < 0:
        iz = 0
    if ix >= dims[0]:
        ix = dims[0] - 1
    if iy >= dims[1]:
        iy = dims[1] - 1
    if iz >= dims[2]:
        iz = dims[2] - 1
    return ix, iy, iz


@njit(cache=True, nogil=True)
def knn_query(points, verts, cell_start, items, origin, cell_size, dims, K):
    """Exact K nearest vertices per query point; ties broken by lower id.

    Returns (ids [Q, K], dists [Q, K]) in ascending (distance, id) order.
    """
    nq = points.shape[0]
    out_ids = np.full((nq, K), -1, dtype=I8)
    out_d2 = np.full((nq, K), np.inf, dtype=F8)
    inv_cell = 1.0 / cell_size
    max_ring = dims[0] + dims[1] + dims[2] + 2
    for q in range(nq):
        p = points[q]
        cx, cy, cz = _cell_of(p, origin, inv_cell, dims)
        count = 0
        for ring in range(max_ring):
            if count >= K:
                lb = (ring - 1) * cell_size
                if lb > 0 and lb * lb > out_d2[q, K - 1]:
                    break
            x0, x1 = max(cx - ring, 0), min(cx + ring, dims[0] - 1)
            y0, y1 = max(cy - ring, 0), min(cy + ring, dims[1] - 1)
            z0, z1 = max(cz - ring, 0), min(cz + ring, dims[2] - 1)
            if ring > 0 and (cx - ring < 0 and cx + ring >= dims[0]
                             and cy - ring < 0 and cy + ring >= dims[1]
                             and cz - ring < 0 and cz + ring >= dims[2]):
                break  # whole grid already covered by previous rings
            for ix in range(x0, x1 + 1):
                for iy in range(y0, y1 + 1):
                    for iz in range(z0, z1 + 1):
                        # only the shell of this ring
                        if ring > 0 and (
                            abs(ix - cx) != ring and abs(iy - cy) != ring and abs(iz - cz) != ring
                        ):
                            continue
                        c = (ix * dims[1] + iy) * dims[2] + iz
                        for k in range(cell_start[c], cell_start[c + 1]):
                            vid = items[k]
                            dx = verts[vid, 0] - p[0]
                            dy = verts[vid, 1] - p[1]
                            dz = verts[vid, 2] - p[2]
                            d2 = dx * dx + dy * dy + dz * dz
                            # insertion sort by (d2, id)
                            if count < K or d2 < out_d2[q, K - 1] or (
                                d2 == out_d2[q, K - 1] and vid < out_ids[q, K - 1]
                            ):
                                pos = min(count, K - 1)
                                while pos > 0 and (
                                    out_d2[q, pos - 1] > d2
                                    or (out_d2[q, pos - 1] == d2 and out_ids[q, pos - 1] > vid)
                                ):
                                    out_d2[q, pos] = out_d2[q, pos - 1]
                                    out_ids[q, pos] = out_ids[q, pos - 1]
                                    pos -= 1
                                out_d2[q, pos] = d2
                                out_ids[q, pos] = vid
                                if count < K:
                                    count += 1
    return out_ids, np.sqrt(out_d2)


@njit(cache=True, nogil=True)
def _closest_point_triangle(p, a, b, c):
    """Ericson's closest point on triangle; returns (point, u, v, w)."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = ab[0] * ap[0] + ab[1] * ap[1] + ab[2] * ap[2]
    d2 = ac[0] * ap[0] + ac[1] * ap[1] + ac[2] * ap[2]
    if d1 <= 0.0 and d2 <= 0.0:
        return a, 1.0, 0.0, 0.0
    bp = p - b
    d3 = ab[0] * bp[0] + ab[1] * bp[1] + ab[2] * bp[2]
    d4 = ac[0] * bp[0] + ac[1] * bp[1] + ac[2] * bp[2]
    if d3 >= 0.0 and d4 <= d3:
        return b, 0.0, 1.0, 0.0
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        t = d1 / (d1 - d3)
        return a + t * ab, 1.0 - t, t, 0.0
    cp = p - c
    d5 = ab[0] * cp[0] + ab[1] * cp[1] + ab[2] * cp[2]
    d6 = ac[0] * cp[0] + ac[1] * cp[1] + ac[2] * cp[2]
    if d6 >= 0.0 and d5 <= d6:
        return c, 0.0, 0.0, 1.0
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        t = d2 / (d2 - d6)
        return a + t * ac, 1.0 - t, 0.0, t
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b + t * (c - b), 0.0, 1.0 - t, t
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return a + ab * v + ac * w, 1.0 - v - w, v, w


@njit(cache=True, nogil=True)
def nearest_triangles(points, verts, faces, cell_start, items, origin, cell_size, dims):
    """Exact nearest surface point per query. Ties go to the lower face id.

    Returns (closest [Q,3], face_id [Q], bary [Q,3], dist [Q]).
    """
    nq = points.shape[0]
    out_p = np.zeros((nq, 3), dtype=F8)
    out_f = np.full(nq, -1, dtype=I8)
    out_b = np.zeros((nq, 3), dtype=F8)
    out_d = np.full(nq, np.inf, dtype=F8)
    inv_cell = 1.0 / cell_size
    max_ring = dims[0] + dims[1] + dims[2] + 2
    for q in range(nq):
        p = points[q]
        cx, cy, cz = _cell_of(p, origin, inv_cell, dims)
        best_d2 = np.inf
        for ring in range(max_ring):
            if best_d2 < np.inf:
                lb = (ring - 1) * cell_size
                if lb > 0 and lb * lb > best_d2:
                    break
            if ring > 0 and (cx - ring < 0 and cx + ring >= dims[0]
                             and cy - ring < 0 and cy + ring >= dims[1]
                             and cz - ring < 0 and cz + ring >= dims[2]):
                break
            x0, x1 = max(cx - ring, 0), min(cx + ring, dims[0] - 1)
            y0, y1 = max(cy - ring, 0), min(cy + ring, dims[1] - 1)
            z0, z1 = max(cz - ring, 0), min(cz + ring, dims[2] - 1)
            for ix in range(x0, x1 + 1):
                for iy in range(y0, y1 + 1):
                    for iz in range(z0, z1 + 1):
                        if ring > 0 and (
                            abs(ix - cx) != ring and abs(iy - cy) != ring and abs(iz - cz) != ring
                        ):
                            continue
                        c = (ix * dims[1] + iy) * dims[2] + iz
                        for k in range(cell_start[c], cell_start[c + 1]):
                            fid = items[k]
                            a = verts[faces[fid, 0]]
                            b = verts[faces[fid, 1]]
                            cc = verts[faces[fid, 2]]
                            cp, u, v, w = _closest_point_triangle(p, a, b, cc)
                            dx = cp[0] - p[0]
                            dy = cp[1] - p[1]
                            dz = cp[2] - p[2]
                            d2 = dx * dx + dy * dy + dz * dz
                            if d2 < best_d2 or (d2 == best_d2 and fid < out_f[q]):
                                best_d2 = d2
                                out_f[q] = fid
                                out_p[q, 0] = cp[0]
                                out_p[q, 1] = cp[1]
                                out_p[q, 2] = cp[2]
                                out_b[q, 0] = u
                                out_b[q, 1] = v
                                out_b[q, 2] = w
        out_d[q] = np.sqrt(best_d2)
    return out_p, out_f, out_b, out_d


@njit(cache=True, nogil=True)
def _tri_intersect_t(p0, d, a, b, c):
    """Moller-Trumbore: ray parameter t of intersection with triangle abc,
    or -1 if none. d need not be unit length."""
    e1 = b - a
    e2 = c - a
    px = d[1] * e2[2] - d[2] * e2[1]
    py = d[2] * e2[0] - d[0] * e2[2]
    pz = d[0] * e2[1] - d[1] * e2[0]
    det = e1[0] * px + e1[1] * py + e1[2] * pz
    if -1e-14 < det < 1e-14:
        return -1.0
    inv = 1.0 / det
    tx = p0[0] - a[0]
    ty = p0[1] - a[1]
    tz = p0[2] - a[2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return -1.0
    qx = ty * e1[2] - tz * e1[1]
    qy = tz * e1[0] - tx * e1[2]
    qz = tx * e1[1] - ty * e1[0]
    v = (d[0] * qx + d[1] * qy + d[2] * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return -1.0
    return (e2[0] * qx + e2[1] * qy + e2[2] * qz) * inv


@njit(cache=True, nogil=True)
def _grid_ray_range(p0, d, origin, cell_size, dims):
    """Clip ray p0 + t d to the grid AABB; returns (t0, t1) or (1, 0) on miss."""
    t0 = -1e30
    t1 = 1e30
    for ax in range(3):
        lo = origin[ax]
        hi = origin[ax] + cell_size * dims[ax]
        if abs(d[ax]) < 1e-30:
            if p0[ax] < lo or p0[ax] > hi:
                return 1.0, 0.0
        else:
            ta = (lo - p0[ax]) / d[ax]
            tb = (hi - p0[ax]) / d[ax]
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    return t0, t1


@njit(cache=True, nogil=True)
def segments_occluded(p0s, p1s, verts, faces, cell_start, items, origin, cell_size, dims, eps_t):
    """True where the open segment (p0, p1) intersects the mesh with
    parameter in (eps_t, 1 - eps_t). DDA traversal with early exit."""
    nq = p0s.shape[0]
    out = np.zeros(nq, dtype=np.uint8)
    inv_cell = 1.0 / cell_size
    for q in range(nq):
        p0 = p0s[q]
        p1 = p1s[q]
        d = p1 - p0
        t0, t1 = _grid_ray_range(p0, d, origin, cell_size, dims)
        if t0 > t1:
            continue
        t0 = max(t0, 0.0)
        t1 = min(t1, 1.0)
        if t0 > t1:
            continue
        start = p0 + (t0 + 1e-12) * d
        ix, iy, iz = _cell_of(start, origin, inv_cell, dims)
        step_x = 1 if d[0] > 0 else -1
        step_y = 1 if d[1] > 0 else -1
        step_z = 1 if d[2] > 0 else -1
        big = 1e30
        if d[0] != 0.0:
            nxt = origin[0] + (ix + (1 if step_x > 0 else 0)) * cell_size
            tmax_x = (nxt - p0[0]) / d[0]
            tdel_x = abs(cell_size / d[0])
        else:
            tmax_x, tdel_x = big, big
        if d[1] != 0.0:
            nxt = origin[1] + (iy + (1 if step_y > 0 else 0)) * cell_size
            tmax_y = (nxt - p0[1]) / d[1]
            tdel_y = abs(cell_size / d[1])
        else:
            tmax_y, tdel_y = big, big
        if d[2] != 0.0:
            nxt = origin[2] + (iz + (1 if step_z > 0 else 0)) * cell_size
            tmax_z = (nxt - p0[2]) / d[2]
            tdel_z = abs(cell_size / d[2])
        else:
            tmax_z, tdel_z = big, big
        hit = False
        while True:
            c = (ix * dims[1] + iy) * dims[2] + iz
            for k in range(cell_start[c], cell_start[c + 1]):
                fid = items[k]
                t = _tri_intersect_t(p0, d, verts[faces[fid, 0]], verts[faces[fid, 1]], verts[faces[fid, 2]])
                if eps_t < t < 1.0 - eps_t:
                    hit = True
                    break
            if hit:
                break
            # advance
            if tmax_x <= tmax_y and tmax_x <= tmax_z:
                if tmax_x > t1:
                    break
                ix += step_x
                if ix < 0 or ix >= dims[0]:
                    break
                tmax_x += tdel_x
            elif tmax_y <= tmax_z:
                if tmax_y > t1:
                    break
                iy += step_y
                if iy < 0 or iy >= dims[1]:
                    break
                tmax_y += tdel_y
            else:
                if tmax_z > t1:
                    break
                iz += step_z
                if iz < 0 or iz >= dims[2]:
                    break
                tmax_z += tdel_z
        out[q] = 1 if hit else 0
    return out


@njit(cache=True, nogil=True)
def ray_mesh_intervals(origins, dirs, verts, faces, cell_start, items, origin, cell_size, dims):
    """First and last intersection parameter per ray (inf/-inf when missed)."""
    nq = origins.shape[0]
    t_in = np.full(nq, np.inf, dtype=F8)
    t_out = np.full(nq, -np.inf, dtype=F8)
    inv_cell = 1.0 / cell_size
    for q in range(nq):
        p0 = origins[q]
        d = dirs[q]
        t0, t1 = _grid_ray_range(p0, d, origin, cell_size, dims)
        if t0 > t1:
            continue
        t0 = max(t0, 0.0)
        if t0 > t1:
            continue
        start = p0 + (t0 + 1e-12) * d
        ix, iy, iz = _cell_of(start, origin, inv_cell, dims)
        step_x = 1 if d[0] > 0 else -1
        step_y = 1 if d[1] > 0 else -1
        step_z = 1 if d[2] > 0 else -1
        big = 1e30
        if d[0] != 0.0:
            nxt = origin[0] + (ix + (1 if step_x > 0 else 0)) * cell_size
            tmax_x = (nxt - p0[0]) / d[0]
            tdel_x = abs(cell_size / d[0])
        else:
            tmax_x, tdel_x = big, big
        if d[1] != 0.0:
            nxt = origin[1] + (iy + (1 if step_y > 0 else 0)) * cell_size
            tmax_y = (nxt - p0[1]) / d[1]
            tdel_y = abs(cell_size / d[1])
        else:
            tmax_y, tdel_y = big, big
        if d[2] != 0.0:
            nxt = origin[2] + (iz + (1 if step_z > 0 else 0)) * cell_size
            tmax_z = (nxt - p0[2]) / d[2]
            tdel_z = abs(cell_size / d[2])
        else:
            tmax_z, tdel_z = big, big
        while True:
            c = (ix * dims[1] + iy) * dims[2] + iz
            for k in range(cell_start[c], cell_start[c + 1]):
                fid = items[k]
                t = _tri_intersect_t(p0, d, verts[faces[fid, 0]], verts[faces[fid, 1]], verts[faces[fid, 2]])
                if t > 1e-12:
                    if t < t_in[q]:
                        t_in[q] = t
                    if t > t_out[q]:
                        t_out[q] = t
            if tmax_x <= tmax_y and tmax_x <= tmax_z:
                if tmax_x > t1:
                    break
                ix += step_x
                if ix < 0 or ix >= dims[0]:
                    break
                tmax_x += tdel_x
            elif tmax_y <= tmax_z:
                if tmax_y > t1:
                    break
                iy += step_y
                if iy < 0 or iy >= dims[1]:
                    break
                tmax_y += tdel_y
            else:
                if tmax_z > t1:
                    break
                iz += step_z
                if iz < 0 or iz >= dims[2]:
                    break
                tmax_z += tdel_z
    return t_in, t_out


@njit(cache=True, nogil=True)
def parity_inside(points, verts, faces, face_component, n_components, ray_dir,
                  cell_start, items, origin, cell_size, dims):
    """Inside test for a union of closed components: a point is inside when
    its crossing count with any single component is odd. Grid-accelerated;
    a stamp array guarantees each face is tested once per query."""
    nq = points.shape[0]
    out = np.zeros(nq, dtype=np.uint8)
    counts = np.zeros(n_components, dtype=I8)
    stamp = np.full(faces.shape[0], -1, dtype=I8)
    inv_cell = 1.0 / cell_size
    for q in range(nq):
        counts[:] = 0
        p = points[q]
        d = ray_dir
        t0, t1 = _grid_ray_range(p, d, origin, cell_size, dims)
        if t0 > t1 or t1 < 0.0:
            continue
        t0 = max(t0, 0.0)
        start = p + (t0 + 1e-12) * d
        ix, iy, iz = _cell_of(start, origin, inv_cell, dims)
        step_x = 1 if d[0] > 0 else -1
        step_y = 1 if d[1] > 0 else -1
        step_z = 1 if d[2] > 0 else -1
        big = 1e30
        if d[0] != 0.0:
            nxt = origin[0] + (ix + (1 if step_x > 0 else 0)) * cell_size
            tmax_x = (nxt - p[0]) / d[0]
            tdel_x = abs(cell_size / d[0])
        else:
            tmax_x, tdel_x = big, big
        if d[1] != 0.0:
            nxt = origin[1] + (iy + (1 if step_y > 0 else 0)) * cell_size
            tmax_y = (nxt - p[1]) / d[1]
            tdel_y = abs(cell_size / d[1])
        else:
            tmax_y, tdel_y = big, big
        if d[2] != 0.0:
            nxt = origin[2] + (iz + (1 if step_z > 0 else 0)) * cell_size
            tmax_z = (nxt - p[2]) / d[2]
            tdel_z = abs(cell_size / d[2])
        else:
            tmax_z, tdel_z = big, big
        while True:
            c = (ix * dims[1] + iy) * dims[2] + iz
            for k in range(cell_start[c], cell_start[c + 1]):
                fid = items[k]
                if stamp[fid] == q:
                    continue
                stamp[fid] = q
                t = _tri_intersect_t(p, d, verts[faces[fid, 0]], verts[faces[fid, 1]], verts[faces[fid, 2]])
                if t > 1e-12:
                    counts[face_component[fid]] += 1
            if tmax_x <= tmax_y and tmax_x <= tmax_z:
                if tmax_x > t1:
                    break
                ix += step_x
                if ix < 0 or ix >= dims[0]:
                    break
                tmax_x += tdel_x
            elif tmax_y <= tmax_z:
                if tmax_y > t1:
                    break
                iy += step_y
                if iy < 0 or iy >= dims[1]:
                    break
                tmax_y += tdel_y
            else:
                if tmax_z > t1:
                    break
                iz += step_z
                if iz < 0 or iz >= dims[2]:
                    break
                tmax_z += tdel_z
        for comp in range(n_components):
            if counts[comp] % 2 == 1:
                out[q] = 1
                break
    return out


@njit(cache=True, nogil=True)
def rasterize(verts_cam, faces, fx, fy, cx, cy, height, width):
    """Pinhole z-buffer rasterizer in camera space (+z forward).

    Returns (depth [H,W], face_id [H,W], bary [H,W,3]); face_id -1 where empty.
    Pixel (i, j) is sampled at (j + 0.5, i + 0.5). Depth is interpolated
    linearly in screen space via perspective-correct barycentrics on 1/z.
    """
    depth = np.full((height, width), np.inf, dtype=F8)
    face_id = np.full((height, width), -1, dtype=I8)
    bary = np.zeros((height, width, 3), dtype=F8)
    nf = faces.shape[0]
    for f in range(nf):
        ia, ib, ic = faces[f, 0], faces[f, 1], faces[f, 2]
        za, zb, zc = verts_cam[ia, 2], verts_cam[ib, 2], verts_cam[ic, 2]
        if za <= 1e-6 or zb <= 1e-6 or zc <= 1e-6:
            continue
        ua = fx * verts_cam[ia, 0] / za + cx
        va = fy * verts_cam[ia, 1] / za + cy
        ub = fx * verts_cam[ib, 0] / zb + cx
        vb = fy * verts_cam[ib, 1] / zb + cy
        uc = fx * verts_cam[ic, 0] / zc + cx
        vc = fy * verts_cam[ic, 1] / zc + cy
        xmin = int(np.floor(min(ua, min(ub, uc)) - 0.5))
        xmax = int(np.ceil(max(ua, max(ub, uc)) - 0.5))
        ymin = int(np.floor(min(va, min(vb, vc)) - 0.5))
        ymax = int(np.ceil(max(va, max(vb, vc)) - 0.5))
        if xmax < 0 or ymax < 0 or xmin >= width or ymin >= height:
            continue
        xmin = max(xmin, 0)
        ymin = max(ymin, 0)
        xmax = min(xmax, width - 1)
        ymax = min(ymax, height - 1)
        area = (ub - ua) * (vc - va) - (uc - ua) * (vb - va)
        if abs(area) < 1e-12:
            continue
        inv_area = 1.0 / area
        for py in range(ymin, ymax + 1):
            sy = py + 0.5
            for px in range(xmin, xmax + 1):
                sx = px + 0.5
                w0 = ((ub - sx) * (vc - sy) - (uc - sx) * (vb - sy)) * inv_area
                w1 = ((uc - sx) * (va - sy) - (ua - sx) * (vc - sy)) * inv_area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                inv_z = w0 / za + w1 / zb + w2 / zc
                z = 1.0 / inv_z
                if z < depth[py, px]:
                    depth[py, px] = z
                    face_id[py, px] = f
                    # perspective-correct barycentrics
                    bary[py, px, 0] = (w0 / za) * z
                    bary[py, px, 1] = (w1 / zb) * z
                    bary[py, px, 2] = (w2 / zc) * z
    return depth, face_id, bary
