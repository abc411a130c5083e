"""Deterministic software rasterizer producing the G-buffer.

Triangles are projected and near-clipped in numpy, then scan-converted by an
edge-function kernel (numba or numpy) that keeps, per pixel, the closest
triangle and its perspective-correct barycentric weights.  Attribute
resolution afterwards is shared by both kernels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _accel

MAX_RESOLUTION = 4096


@dataclass(eq=False)
class GBuffer:
    width: int
    height: int
    world_pos: np.ndarray  # (H, W, 3) float32
    normal: np.ndarray  # (H, W, 3) float32, unit where valid
    albedo: np.ndarray  # (H, W, 3) float32
    depth: np.ndarray  # (H, W) float32, +inf where empty
    valid: np.ndarray  # (H, W) bool

    @classmethod
    def empty(cls, width, height):
        z3 = np.zeros((height, width, 3), dtype=np.float32)
        return cls(
            width,
            height,
            z3,
            z3.copy(),
            z3.copy(),
            np.full((height, width), np.inf, dtype=np.float32),
            np.zeros((height, width), dtype=bool),
        )


def _view_coords(camera, points):
    """View-space (x, y, depth) of world points; depth is along the forward axis."""
    right, up, fwd = camera.basis()
    d = points - np.asarray(camera.position, dtype=np.float64)
    x = d[..., 0] * right[0] + d[..., 1] * right[1] + d[..., 2] * right[2]
    y = d[..., 0] * up[0] + d[..., 1] * up[1] + d[..., 2] * up[2]
    z = d[..., 0] * fwd[0] + d[..., 1] * fwd[1] + d[..., 2] * fwd[2]
    return x, y, z


def _focal(camera, height):
    return 0.5 * height / math.tan(math.radians(camera.vfov_deg) * 0.5)


def _to_screen(camera, width, height, x, y, z):
    f = _focal(camera, height)
    return 0.5 * width + f * (x / z), 0.5 * height - f * (y / z)


def project_vertex(camera, width, height, p):
    """Project world point ``p`` to ``(screen_x, screen_y, view_depth)``.

    Pixel centers sit at integer + 0.5 and y grows downward.  Returns ``None``
    (the behind-near marker) when the point is closer than the near plane.
    """
    x, y, z = _view_coords(camera, np.asarray(p, dtype=np.float64))
    if not z >= camera.near:
        return None
    sx, sy = _to_screen(camera, width, height, x, y, z)
    return float(sx), float(sy), float(z)


def _clip_polygon(pts, nrm, depth, near):
    """Clip one triangle against ``depth >= near`` (Sutherland-Hodgman)."""
    out_p, out_n = [], []
    for i in range(3):
        j = (i + 1) % 3
        a_in, b_in = depth[i] >= near, depth[j] >= near
        if a_in:
            out_p.append(pts[i])
            out_n.append(nrm[i])
        if a_in != b_in:
            t = (near - depth[i]) / (depth[j] - depth[i])
            out_p.append(pts[i] + t * (pts[j] - pts[i]))
            out_n.append(nrm[i] + t * (nrm[j] - nrm[i]))
    return out_p, out_n


def setup_triangles(scene, camera, width, height):
    """Screen-space triangles ready for scan conversion.

    Returns ``(sx, sy, inv_z, pos, nrm, mat)``: (S, 3) screen coordinates and
    reciprocal view depths, (S, 3, 3) world positions and normals, and (S,)
    material indices.  Every triangle has positive signed area.
    """
    pos = scene.verts.astype(np.float64)
    nrm = scene.normals.astype(np.float64)
    mat = scene.material_index.astype(np.int64)
    _, _, z = _view_coords(camera, pos)
    near = float(camera.near)
    front = (z >= near).all(axis=1)
    partial = np.flatnonzero(~front & (z >= near).any(axis=1))

    tri_p, tri_n, tri_m = [pos[front]], [nrm[front]], [mat[front]]
    for t in partial:
        cp, cn = _clip_polygon(pos[t], nrm[t], z[t], near)
        for k in range(1, len(cp) - 1):
            tri_p.append(np.array([cp[0], cp[k], cp[k + 1]])[None])
            tri_n.append(np.array([cn[0], cn[k], cn[k + 1]])[None])
            tri_m.append(mat[t : t + 1])
    P = np.concatenate(tri_p).reshape(-1, 3, 3)
    N = np.concatenate(tri_n).reshape(-1, 3, 3)
    M = np.concatenate(tri_m)

    x, y, z = _view_coords(camera, P)
    # clipped vertices can land a rounding step in front of the plane
    z = np.maximum(z, near)
    sx, sy = _to_screen(camera, width, height, x, y, z)
    area = (sx[:, 1] - sx[:, 0]) * (sy[:, 2] - sy[:, 0]) - (sy[:, 1] - sy[:, 0]) * (sx[:, 2] - sx[:, 0])
    keep = area != 0
    flip = area < 0
    order = np.where(flip[:, None], [0, 2, 1], [0, 1, 2])
    take = lambda a: np.take_along_axis(a, order, axis=1)[keep]
    take3 = lambda a: np.take_along_axis(a, order[:, :, None], axis=1)[keep]
    return (
        np.ascontiguousarray(take(sx)),
        np.ascontiguousarray(take(sy)),
        np.ascontiguousarray(1.0 / take(z)),
        take3(P),
        take3(N),
        M[keep],
    )


def _top_left(ax, ay, bx, by):
    dy = by - ay
    return dy < 0.0 or (dy == 0.0 and bx - ax > 0.0)


def _scan_py(sx, sy, inv_z, width, height, zbuf, owner, bary):
    for s in range(sx.shape[0]):
        x0, x1, x2 = sx[s, 0], sx[s, 1], sx[s, 2]
        y0, y1, y2 = sy[s, 0], sy[s, 1], sy[s, 2]
        iz0, iz1, iz2 = inv_z[s, 0], inv_z[s, 1], inv_z[s, 2]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        # top-left rule: edge a->b owns its pixels if it runs up, or right along the top
        tl0 = (y2 - y1) < 0.0 or ((y2 - y1) == 0.0 and (x2 - x1) > 0.0)
        tl1 = (y0 - y2) < 0.0 or ((y0 - y2) == 0.0 and (x0 - x2) > 0.0)
        tl2 = (y1 - y0) < 0.0 or ((y1 - y0) == 0.0 and (x1 - x0) > 0.0)
        # clamp as floats first: near-plane vertices can project very far out
        px0 = int(min(max(math.ceil(min(x0, x1, x2) - 0.5), 0.0), width))
        px1 = int(max(min(math.floor(max(x0, x1, x2) - 0.5), width - 1.0), -1.0))
        py0 = int(min(max(math.ceil(min(y0, y1, y2) - 0.5), 0.0), height))
        py1 = int(max(min(math.floor(max(y0, y1, y2) - 0.5), height - 1.0), -1.0))
        for py in range(py0, py1 + 1):
            cy = py + 0.5
            for px in range(px0, px1 + 1):
                cx = px + 0.5
                w0 = (x2 - x1) * (cy - y1) - (y2 - y1) * (cx - x1)
                if w0 < 0.0 or (w0 == 0.0 and not tl0):
                    continue
                w1 = (x0 - x2) * (cy - y2) - (y0 - y2) * (cx - x2)
                if w1 < 0.0 or (w1 == 0.0 and not tl1):
                    continue
                w2 = (x1 - x0) * (cy - y0) - (y1 - y0) * (cx - x0)
                if w2 < 0.0 or (w2 == 0.0 and not tl2):
                    continue
                q0 = (w0 / area) * iz0
                q1 = (w1 / area) * iz1
                q2 = (w2 / area) * iz2
                qs = q0 + q1 + q2
                d = 1.0 / qs
                if d < zbuf[py, px]:
                    zbuf[py, px] = d
                    owner[py, px] = s
                    bary[py, px, 0] = q0 / qs
                    bary[py, px, 1] = q1 / qs
                    bary[py, px, 2] = q2 / qs


_scan_nb = _accel.njit(_scan_py)


def _scan_np(sx, sy, inv_z, width, height, zbuf, owner, bary):
    for s in range(sx.shape[0]):
        x0, x1, x2 = sx[s]
        y0, y1, y2 = sy[s]
        iz0, iz1, iz2 = inv_z[s]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        tl0 = _top_left(x1, y1, x2, y2)
        tl1 = _top_left(x2, y2, x0, y0)
        tl2 = _top_left(x0, y0, x1, y1)
        # clamp as floats first: near-plane vertices can project very far out
        px0 = int(min(max(math.ceil(min(x0, x1, x2) - 0.5), 0.0), width))
        px1 = int(max(min(math.floor(max(x0, x1, x2) - 0.5), width - 1.0), -1.0))
        py0 = int(min(max(math.ceil(min(y0, y1, y2) - 0.5), 0.0), height))
        py1 = int(max(min(math.floor(max(y0, y1, y2) - 0.5), height - 1.0), -1.0))
        if px1 < px0 or py1 < py0:
            continue
        cx = np.arange(px0, px1 + 1, dtype=np.float64)[None, :] + 0.5
        cy = np.arange(py0, py1 + 1, dtype=np.float64)[:, None] + 0.5
        w0 = (x2 - x1) * (cy - y1) - (y2 - y1) * (cx - x1)
        w1 = (x0 - x2) * (cy - y2) - (y0 - y2) * (cx - x2)
        w2 = (x1 - x0) * (cy - y0) - (y1 - y0) * (cx - x0)
        inside = (
            ((w0 > 0.0) | ((w0 == 0.0) & tl0))
            & ((w1 > 0.0) | ((w1 == 0.0) & tl1))
            & ((w2 > 0.0) | ((w2 == 0.0) & tl2))
        )
        if not inside.any():
            continue
        q0 = (w0 / area) * iz0
        q1 = (w1 / area) * iz1
        q2 = (w2 / area) * iz2
        qs = q0 + q1 + q2
        with np.errstate(divide="ignore", invalid="ignore"):
            d = 1.0 / qs
        zb = zbuf[py0 : py1 + 1, px0 : px1 + 1]
        win = inside & (d < zb)
        zb[win] = d[win]
        owner[py0 : py1 + 1, px0 : px1 + 1][win] = s
        b = bary[py0 : py1 + 1, px0 : px1 + 1]
        b[..., 0][win] = (q0 / qs)[win]
        b[..., 1][win] = (q1 / qs)[win]
        b[..., 2][win] = (q2 / qs)[win]


def scan_convert(sx, sy, inv_z, width, height, use_numba=None):
    """Run the coverage/depth kernel; returns (zbuf, owner, bary)."""
    if use_numba is None:
        use_numba = _accel.USE_NUMBA
    zbuf = np.full((height, width), np.inf)
    owner = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3))
    kernel = _scan_nb if use_numba else _scan_np
    kernel(sx, sy, inv_z, width, height, zbuf, owner, bary)
    return zbuf, owner, bary


def rasterize(scene, camera, width, height, use_numba=None):
    """Rasterize ``scene`` from ``camera`` into a :class:`GBuffer`.

    No back-face culling; the top-left fill rule decides shared edges and the
    smallest view depth wins (first triangle on exact ties).
    """
    width, height = int(width), int(height)
    if not (1 <= width <= MAX_RESOLUTION and 1 <= height <= MAX_RESOLUTION):
        raise ValueError(f"resolution {width}x{height} outside [1, {MAX_RESOLUTION}]")
    gb = GBuffer.empty(width, height)
    if scene.n_triangles == 0:
        return gb
    sx, sy, inv_z, P, N, M = setup_triangles(scene, camera, width, height)
    if sx.shape[0] == 0:
        return gb
    zbuf, owner, bary = scan_convert(sx, sy, inv_z, width, height, use_numba)

    valid = owner >= 0
    o = owner[valid]
    b = bary[valid]
    wp = b[:, 0, None] * P[o, 0] + b[:, 1, None] * P[o, 1] + b[:, 2, None] * P[o, 2]
    n = b[:, 0, None] * N[o, 0] + b[:, 1, None] * N[o, 1] + b[:, 2, None] * N[o, 2]
    length = np.sqrt(n[:, 0] * n[:, 0] + n[:, 1] * n[:, 1] + n[:, 2] * n[:, 2])
    n /= np.where(length > 0, length, 1.0)[:, None]

    gb.valid[...] = valid
    gb.depth[valid] = zbuf[valid]
    gb.world_pos[valid] = wp
    gb.normal[valid] = n
    gb.albedo[valid] = scene.materials[M[o]]
    return gb
