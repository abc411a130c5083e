"""BVH-accelerated shadow-ray visibility.

For every valid G-buffer pixel and every light a single any-hit shadow ray
decides whether the light is visible; the answers are stored as one packed
bit-plane per light.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _accel

LEAF_SIZE = 4
# Möller-Trumbore rejects rays this close to parallel with the triangle plane.
DET_EPS = 1e-12
EPSILON_SCALE = 1e-4


@dataclass(eq=False)
class Bvh:
    """Flat binary BVH in depth-first order (root is node 0).

    ``left``/``right`` are child node indices, -1 for leaves; a leaf covers
    ``triangle_order[start:start + count]``.  ``v0``, ``e1`` and ``e2`` hold
    the first vertex and the two edges of each triangle, already permuted
    into leaf order.
    """

    bmin: np.ndarray
    bmax: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    triangle_order: np.ndarray
    v0: np.ndarray
    e1: np.ndarray
    e2: np.ndarray

    @property
    def n_nodes(self):
        return int(self.left.shape[0])


def _pad(lo, hi):
    # keeps slab tests conservative for rays grazing a box face
    slack = 1e-7 * (np.abs(lo) + np.abs(hi) + (hi - lo)) + 1e-9
    return lo - slack, hi + slack


def build_bvh(scene_or_verts):
    """Object-median BVH: split on the longest axis of the node bounds."""
    verts = getattr(scene_or_verts, "verts", scene_or_verts)
    verts = np.asarray(verts, dtype=np.float64).reshape(-1, 3, 3)
    n = verts.shape[0]
    tri_lo, tri_hi = verts.min(axis=1), verts.max(axis=1)
    centroid = verts.mean(axis=1)

    bmin, bmax, left, right, start, count = [], [], [], [], [], []
    order = np.arange(n)

    def node(lo_i, hi_i):
        idx = order[lo_i:hi_i]
        lo, hi = _pad(tri_lo[idx].min(axis=0), tri_hi[idx].max(axis=0))
        me = len(left)
        bmin.append(lo)
        bmax.append(hi)
        left.append(-1)
        right.append(-1)
        start.append(lo_i)
        count.append(hi_i - lo_i)
        if hi_i - lo_i <= LEAF_SIZE:
            return me
        axis = int(np.argmax(hi - lo))
        # stable sort keeps the split deterministic under ties
        order[lo_i:hi_i] = idx[np.argsort(centroid[idx, axis], kind="stable")]
        mid = (lo_i + hi_i) // 2
        left[me] = node(lo_i, mid)
        right[me] = node(mid, hi_i)
        start[me], count[me] = 0, 0
        return me

    if n:
        node(0, n)
    v = verts[order]
    return Bvh(
        bmin=np.array(bmin, dtype=np.float64).reshape(-1, 3),
        bmax=np.array(bmax, dtype=np.float64).reshape(-1, 3),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        start=np.array(start, dtype=np.int64),
        count=np.array(count, dtype=np.int64),
        triangle_order=order.astype(np.int64),
        v0=np.ascontiguousarray(v[:, 0]),
        e1=np.ascontiguousarray(v[:, 1] - v[:, 0]),
        e2=np.ascontiguousarray(v[:, 2] - v[:, 0]),
    )


def _occluded_py(bmin, bmax, left, right, start, count, v0, e1, e2, orig, dirs, tmax, out):
    stack = np.empty(128, dtype=np.int64)
    n_nodes = left.shape[0]
    for r in range(orig.shape[0]):
        out[r] = False
        if n_nodes == 0:
            continue
        ox, oy, oz = orig[r, 0], orig[r, 1], orig[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        tm = tmax[r]
        sp = 0
        stack[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            nd = stack[sp]
            # slab test; zero direction components handled explicitly
            tn = 0.0
            tf = tm
            hit = True
            for a in range(3):
                o = ox if a == 0 else (oy if a == 1 else oz)
                d = dx if a == 0 else (dy if a == 1 else dz)
                lo = bmin[nd, a]
                hi = bmax[nd, a]
                if d == 0.0:
                    if o < lo or o > hi:
                        hit = False
                        break
                else:
                    t0 = (lo - o) / d
                    t1 = (hi - o) / d
                    if t0 > t1:
                        t0, t1 = t1, t0
                    if t0 > tn:
                        tn = t0
                    if t1 < tf:
                        tf = t1
                    if tn > tf:
                        hit = False
                        break
            if not hit:
                continue
            if left[nd] >= 0:
                stack[sp] = right[nd]
                stack[sp + 1] = left[nd]
                sp += 2
                continue
            for k in range(start[nd], start[nd] + count[nd]):
                e1x, e1y, e1z = e1[k, 0], e1[k, 1], e1[k, 2]
                e2x, e2y, e2z = e2[k, 0], e2[k, 1], e2[k, 2]
                px = dy * e2z - dz * e2y
                py = dz * e2x - dx * e2z
                pz = dx * e2y - dy * e2x
                det = e1x * px + e1y * py + e1z * pz
                if abs(det) < DET_EPS:
                    continue
                inv = 1.0 / det
                tx = ox - v0[k, 0]
                ty = oy - v0[k, 1]
                tz = oz - v0[k, 2]
                u = (tx * px + ty * py + tz * pz) * inv
                if u < 0.0 or u > 1.0:
                    continue
                qx = ty * e1z - tz * e1y
                qy = tz * e1x - tx * e1z
                qz = tx * e1y - ty * e1x
                v = (dx * qx + dy * qy + dz * qz) * inv
                if v < 0.0 or u + v > 1.0:
                    continue
                t = (e2x * qx + e2y * qy + e2z * qz) * inv
                if t > 0.0 and t < tm:
                    out[r] = True
                    break
            if out[r]:
                break


_occluded_nb = _accel.njit(_occluded_py)


def _mt_hits(v0, e1, e2, o, d, tmax):
    """Vectorized Möller-Trumbore over matching rows of rays and triangles."""
    e1x, e1y, e1z = e1[:, 0], e1[:, 1], e1[:, 2]
    e2x, e2y, e2z = e2[:, 0], e2[:, 1], e2[:, 2]
    dx, dy, dz = d[:, 0], d[:, 1], d[:, 2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    ok = np.abs(det) >= DET_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        tx = o[:, 0] - v0[:, 0]
        ty = o[:, 1] - v0[:, 1]
        tz = o[:, 2] - v0[:, 2]
        u = (tx * px + ty * py + tz * pz) * inv
        qx = ty * e1z - tz * e1y
        qy = tz * e1x - tx * e1z
        qz = tx * e1y - ty * e1x
        v = (dx * qx + dy * qy + dz * qz) * inv
        t = (e2x * qx + e2y * qy + e2z * qz) * inv
    return ok & (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (u + v <= 1.0) & (t > 0.0) & (t < tmax)


def _occluded_np(bvh, orig, dirs, tmax):
    """Packet traversal: recurse over nodes carrying the still-active rays."""
    out = np.zeros(orig.shape[0], dtype=bool)
    if bvh.n_nodes == 0 or orig.shape[0] == 0:
        return out

    def visit(nd, rays):
        rays = rays[~out[rays]]
        if rays.size == 0:
            return
        o, d, tm = orig[rays], dirs[rays], tmax[rays]
        tn = np.zeros(rays.size)
        tf = tm.copy()
        alive = np.ones(rays.size, dtype=bool)
        for a in range(3):
            lo, hi = bvh.bmin[nd, a], bvh.bmax[nd, a]
            flat = d[:, a] == 0.0
            alive &= ~(flat & ((o[:, a] < lo) | (o[:, a] > hi)))
            with np.errstate(divide="ignore", invalid="ignore"):
                t0 = (lo - o[:, a]) / d[:, a]
                t1 = (hi - o[:, a]) / d[:, a]
            near_t = np.where(flat, -np.inf, np.minimum(t0, t1))
            far_t = np.where(flat, np.inf, np.maximum(t0, t1))
            tn = np.maximum(tn, near_t)
            tf = np.minimum(tf, far_t)
            alive &= tn <= tf
        rays = rays[alive]
        if rays.size == 0:
            return
        if bvh.left[nd] >= 0:
            visit(bvh.left[nd], rays)
            visit(bvh.right[nd], rays)
            return
        for k in range(bvh.start[nd], bvh.start[nd] + bvh.count[nd]):
            rk = rays[~out[rays]]
            if rk.size == 0:
                return
            kk = np.full(rk.size, k)
            out[rk] |= _mt_hits(bvh.v0[kk], bvh.e1[kk], bvh.e2[kk], orig[rk], dirs[rk], tmax[rk])

    visit(0, np.arange(orig.shape[0]))
    return out


def occluded_batch(bvh, origins, dirs, tmax, use_numba=None):
    """Any-hit test for many rays; True where a triangle lies at t in (0, tmax)."""
    if use_numba is None:
        use_numba = _accel.USE_NUMBA
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    tmax = np.ascontiguousarray(np.broadcast_to(np.asarray(tmax, dtype=np.float64), origins.shape[:1]))
    if not use_numba:
        return _occluded_np(bvh, origins, dirs, tmax)
    out = np.zeros(origins.shape[0], dtype=np.bool_)
    _occluded_nb(
        bvh.bmin, bvh.bmax, bvh.left, bvh.right, bvh.start, bvh.count,
        bvh.v0, bvh.e1, bvh.e2, origins, dirs, tmax, out,
    )
    return out


def occluded(bvh, origin, direction, t_max=math.inf, use_numba=None):
    """Single shadow-ray query."""
    return bool(occluded_batch(bvh, [origin], [direction], [t_max], use_numba)[0])


@dataclass(eq=False)
class VisibilityBitmap:
    """One packed bit-plane per light: row-major pixels, LSB-first in each byte."""

    width: int
    height: int
    n_lights: int
    planes: np.ndarray  # (n_lights, ceil(w*h/8)) uint8
    frame_id: int = 0

    @staticmethod
    def plane_bytes(width, height):
        return (width * height + 7) // 8

    @classmethod
    def from_bits(cls, bits, width, height, frame_id=0):
        """Pack a (n_lights, H*W) or (n_lights, H, W) boolean array."""
        bits = np.asarray(bits, dtype=bool).reshape(bits.shape[0], -1)
        planes = np.packbits(bits, axis=1, bitorder="little")
        return cls(width, height, bits.shape[0], planes, frame_id)

    @classmethod
    def all_visible(cls, valid, n_lights, frame_id=0):
        h, w = valid.shape
        return cls.from_bits(np.repeat(valid.reshape(1, -1), n_lights, axis=0), w, h, frame_id)

    def bits(self):
        """Unpacked (n_lights, H*W) boolean array."""
        n = self.width * self.height
        return np.unpackbits(self.planes, axis=1, count=n, bitorder="little").astype(bool)

    def mask_at(self, x, y):
        """64-bit visibility mask of pixel (x, y); bit i is light i."""
        p = y * self.width + x
        col = (self.planes[:, p >> 3] >> (p & 7)) & 1
        return sum(int(b) << i for i, b in enumerate(col))

    def __eq__(self, other):
        if not isinstance(other, VisibilityBitmap):
            return NotImplemented
        return (
            (self.width, self.height, self.n_lights, self.frame_id)
            == (other.width, other.height, other.n_lights, other.frame_id)
            and np.array_equal(self.planes, other.planes)
        )


def default_epsilon(scene):
    """Shadow-ray normal offset: 1e-4 of the scene bounding-box diagonal."""
    return EPSILON_SCALE * scene.diagonal()


def shadow_rays(gbuffer, lights, epsilon):
    """Origins, directions and t_max of every (light, valid pixel) shadow ray.

    Rays are ordered light-major; also returns the flat valid-pixel indices.
    """
    valid = gbuffer.valid.reshape(-1)
    pix = np.flatnonzero(valid)
    w = gbuffer.world_pos.reshape(-1, 3)[pix].astype(np.float64)
    nrm = gbuffer.normal.reshape(-1, 3)[pix].astype(np.float64)
    origin = w + epsilon * nrm
    origins, dirs, tmaxs = [], [], []
    for li in lights:
        if li.kind == "point":
            to_light = np.asarray(li.position, dtype=np.float64) - origin
            dist = np.sqrt(to_light[:, 0] ** 2 + to_light[:, 1] ** 2 + to_light[:, 2] ** 2)
            with np.errstate(divide="ignore", invalid="ignore"):
                d = to_light / dist[:, None]
            d[dist == 0] = 0.0
            origins.append(origin)
            dirs.append(d)
            tmaxs.append(dist)
        else:
            d = -np.asarray(li.direction, dtype=np.float64)
            origins.append(origin)
            dirs.append(np.broadcast_to(d, origin.shape))
            tmaxs.append(np.full(origin.shape[0], np.inf))
    return np.concatenate(origins), np.concatenate(dirs), np.concatenate(tmaxs), pix


def trace_visibility(bvh, gbuffer, lights, epsilon, frame_id=0, use_numba=None):
    """Shadow-ray every valid pixel toward every light."""
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    n_lights = len(lights)
    npix = gbuffer.width * gbuffer.height
    bits = np.zeros((n_lights, npix), dtype=bool)
    origins, dirs, tmax, pix = shadow_rays(gbuffer, lights, epsilon)
    if pix.size:
        hit = occluded_batch(bvh, origins, dirs, tmax, use_numba)
        bits[:, pix] = ~hit.reshape(n_lights, pix.size)
    return VisibilityBitmap.from_bits(bits, gbuffer.width, gbuffer.height, frame_id)
