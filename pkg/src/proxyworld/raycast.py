"""Ray/triangle queries over static meshes.

A binary BVH with median splits is built once per mesh; traversal returns
the nearest hit with a deterministic tie rule (smaller ``t`` first, then the
smaller triangle index) so that results never depend on traversal order.
"""

from __future__ import annotations

import numba
import numpy as np

MISS = -1
_LEAF_SIZE = 4
_STACK = 128
_DET_EPS = 1e-12


@numba.njit(cache=True, error_model="numpy")
def _tri_hit(ox, oy, oz, dx, dy, dz, v0, v1, v2, tmin):
    # Moller-Trumbore; returns (t, b1, b2) with t = inf on miss
    e1x = v1[0] - v0[0]
    e1y = v1[1] - v0[1]
    e1z = v1[2] - v0[2]
    e2x = v2[0] - v0[0]
    e2y = v2[1] - v0[1]
    e2z = v2[2] - v0[2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) < _DET_EPS:
        return np.inf, 0.0, 0.0
    inv = 1.0 / det
    tx = ox - v0[0]
    ty = oy - v0[1]
    tz = oz - v0[2]
    b1 = (tx * px + ty * py + tz * pz) * inv
    if b1 < 0.0 or b1 > 1.0:
        return np.inf, 0.0, 0.0
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    b2 = (dx * qx + dy * qy + dz * qz) * inv
    if b2 < 0.0 or b1 + b2 > 1.0:
        return np.inf, 0.0, 0.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if t <= tmin:
        return np.inf, 0.0, 0.0
    return t, b1, b2


@numba.njit(cache=True)
def _build(tri_min, tri_max, centroids, leaf_size):
    m = centroids.shape[0]
    cap = max(1, 2 * m)
    nmin = np.empty((cap, 3))
    nmax = np.empty((cap, 3))
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    start = np.zeros(cap, np.int64)
    count = np.zeros(cap, np.int64)
    order = np.arange(m)

    stack_node = np.empty(cap, np.int64)
    sp = 0
    n_nodes = 1
    start[0] = 0
    count[0] = m
    stack_node[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack_node[sp]
        s = start[node]
        c = count[node]
        idx = order[s:s + c]
        lo = tri_min[idx[0]].copy()
        hi = tri_max[idx[0]].copy()
        clo = centroids[idx[0]].copy()
        chi = centroids[idx[0]].copy()
        for k in range(1, c):
            j = idx[k]
            for a in range(3):
                lo[a] = min(lo[a], tri_min[j, a])
                hi[a] = max(hi[a], tri_max[j, a])
                clo[a] = min(clo[a], centroids[j, a])
                chi[a] = max(chi[a], centroids[j, a])
        nmin[node] = lo
        nmax[node] = hi
        if c <= leaf_size:
            continue
        ext = chi - clo
        axis = 0
        if ext[1] > ext[axis]:
            axis = 1
        if ext[2] > ext[axis]:
            axis = 2
        if ext[axis] <= 0.0:
            continue
        # stable sort keeps the layout a pure function of the input
        keys = centroids[idx, axis]
        perm = np.argsort(keys, kind="mergesort")
        order[s:s + c] = idx[perm]
        half = c // 2
        l_node = n_nodes
        r_node = n_nodes + 1
        n_nodes += 2
        left[node] = l_node
        right[node] = r_node
        start[l_node] = s
        count[l_node] = half
        start[r_node] = s + half
        count[r_node] = c - half
        stack_node[sp] = r_node
        stack_node[sp + 1] = l_node
        sp += 2
    return (nmin[:n_nodes].copy(), nmax[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), start[:n_nodes].copy(), count[:n_nodes].copy(), order)


@numba.njit(cache=True, error_model="numpy")
def _axis(o, inv, lo, hi, tn, tf):
    if np.isinf(inv):
        # ray parallel to this slab pair: inside or never
        if o < lo or o > hi:
            return np.inf, -np.inf
        return tn, tf
    t1 = (lo - o) * inv
    t2 = (hi - o) * inv
    if t1 > t2:
        t1, t2 = t2, t1
    return max(tn, t1), min(tf, t2)


@numba.njit(cache=True, error_model="numpy")
def _slab(ox, oy, oz, ix, iy, iz, lo, hi, tmax):
    tn, tf = -np.inf, np.inf
    tn, tf = _axis(ox, ix, lo[0], hi[0], tn, tf)
    tn, tf = _axis(oy, iy, lo[1], hi[1], tn, tf)
    tn, tf = _axis(oz, iz, lo[2], hi[2], tn, tf)
    if tf < tn or tf < 0.0 or tn > tmax:
        return np.inf
    return max(tn, 0.0)


@numba.njit(cache=True, error_model="numpy")
def _traverse(verts, tris, nmin, nmax, left, right, start, count, order,
              origins, dirs, tmin, tmax_arr):
    n = origins.shape[0]
    out_t = np.full(n, np.inf)
    out_tri = np.full(n, -1, np.int64)
    out_b = np.zeros((n, 2))
    stack = np.empty(_STACK, np.int64)
    for r in range(n):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        ix = 1.0 / dx
        iy = 1.0 / dy
        iz = 1.0 / dz
        best_t = tmax_arr[r]
        best_tri = -1
        bb1 = 0.0
        bb2 = 0.0
        sp = 0
        if _slab(ox, oy, oz, ix, iy, iz, nmin[0], nmax[0], best_t) < np.inf:
            stack[0] = 0
            sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if left[node] < 0:
                s = start[node]
                for k in range(s, s + count[node]):
                    j = order[k]
                    t, b1, b2 = _tri_hit(ox, oy, oz, dx, dy, dz,
                                         verts[tris[j, 0]], verts[tris[j, 1]],
                                         verts[tris[j, 2]], tmin)
                    if t < best_t or (t == best_t and best_tri >= 0 and j < best_tri):
                        best_t = t
                        best_tri = j
                        bb1 = b1
                        bb2 = b2
                continue
            a = left[node]
            b = right[node]
            ta = _slab(ox, oy, oz, ix, iy, iz, nmin[a], nmax[a], best_t)
            tb = _slab(ox, oy, oz, ix, iy, iz, nmin[b], nmax[b], best_t)
            # push the farther child first so the nearer one is popped next
            if ta <= tb:
                if tb < np.inf:
                    stack[sp] = b
                    sp += 1
                if ta < np.inf:
                    stack[sp] = a
                    sp += 1
            else:
                if ta < np.inf:
                    stack[sp] = a
                    sp += 1
                if tb < np.inf:
                    stack[sp] = b
                    sp += 1
        if best_tri >= 0:
            out_t[r] = best_t
            out_tri[r] = best_tri
            out_b[r, 0] = bb1
            out_b[r, 1] = bb2
    return out_t, out_tri, out_b


class Hits:
    """Result of a batched ray query.

    ``t`` is the ray parameter (distance for unit directions, ``inf`` on miss),
    ``tri`` the triangle index (``-1`` on miss) and ``bary`` the barycentric
    weights of vertices 1 and 2.
    """

    __slots__ = ("t", "tri", "bary")

    def __init__(self, t, tri, bary):
        self.t = t
        self.tri = tri
        self.bary = bary

    @property
    def hit(self):
        return self.tri >= 0

    def points(self, origins, dirs):
        return np.asarray(origins, float) + self.t[:, None] * np.asarray(dirs, float)


class BVH:
    """Axis-aligned bounding volume hierarchy over an indexed triangle mesh."""

    def __init__(self, vertices, triangles, leaf_size=_LEAF_SIZE):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        if self.triangles.size == 0:
            raise ValueError("cannot build a BVH over an empty mesh")
        tv = self.vertices[self.triangles]
        self._nodes = _build(tv.min(axis=1), tv.max(axis=1), tv.mean(axis=1), leaf_size)

    @property
    def node_count(self):
        return self._nodes[0].shape[0]

    def intersect(self, origins, dirs, tmin=1e-9, tmax=np.inf) -> Hits:
        origins, dirs = _as_rays(origins, dirs)
        tmax_arr = np.broadcast_to(np.asarray(tmax, float), (origins.shape[0],)).copy()
        t, tri, bary = _traverse(self.vertices, self.triangles, *self._nodes,
                                 origins, dirs, float(tmin), tmax_arr)
        return Hits(t, tri, bary)

    def occluded(self, origins, dirs, tmin=1e-6, tmax=np.inf):
        return self.intersect(origins, dirs, tmin=tmin, tmax=tmax).hit


def _as_rays(origins, dirs):
    dirs = np.ascontiguousarray(np.atleast_2d(dirs), dtype=np.float64)
    origins = np.ascontiguousarray(
        np.broadcast_to(np.asarray(origins, np.float64), dirs.shape), dtype=np.float64)
    return origins, dirs


def brute_force_intersect(vertices, triangles, origins, dirs, tmin=1e-9, chunk=64) -> Hits:
    """Reference nearest-hit query testing every ray against every triangle.

    Pure numpy; shares no code with the BVH path.
    """
    origins, dirs = _as_rays(origins, dirs)
    v = np.asarray(vertices, np.float64)[np.asarray(triangles)]
    v0, e1, e2 = v[:, 0], v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]
    n = origins.shape[0]
    out_t = np.full(n, np.inf)
    out_tri = np.full(n, MISS, np.int64)
    out_b = np.zeros((n, 2))
    idx = np.arange(v.shape[0])
    for lo in range(0, n, chunk):
        o = origins[lo:lo + chunk, None, :]
        d = dirs[lo:lo + chunk, None, :]
        p = np.cross(d, e2[None])
        det = np.einsum("rtk,tk->rt", p, e1)
        ok = np.abs(det) >= _DET_EPS
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.where(ok, 1.0 / det, 0.0)
            tv = o - v0[None]
            b1 = np.einsum("rtk,rtk->rt", tv, p) * inv
            q = np.cross(tv, e1[None])
            b2 = np.einsum("rtk,rtk->rt", np.broadcast_to(d, q.shape), q) * inv
            t = np.einsum("tk,rtk->rt", e2, q) * inv
        good = ok & (b1 >= 0) & (b1 <= 1) & (b2 >= 0) & (b1 + b2 <= 1) & (t > tmin)
        t = np.where(good, t, np.inf)
        best = t.min(axis=1)
        # lowest index among exact ties
        is_best = (t == best[:, None]) & np.isfinite(best)[:, None]
        j = np.where(is_best.any(axis=1),
                     np.where(is_best, idx[None], v.shape[0]).min(axis=1), MISS)
        rows = np.arange(len(best))
        hit = j >= 0
        out_t[lo:lo + chunk] = best
        out_tri[lo:lo + chunk] = j
        sel = np.where(hit, j, 0)
        out_b[lo:lo + chunk, 0] = np.where(hit, b1[rows, sel], 0.0)
        out_b[lo:lo + chunk, 1] = np.where(hit, b2[rows, sel], 0.0)
    return Hits(out_t, out_tri, out_b)
