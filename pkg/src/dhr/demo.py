"""Built-in test content: an icosphere hovering over a ground plane, lit by
two point lights and one directional light, plus an orbiting camera trace."""
from __future__ import annotations

import math

import numpy as np

from .scene import Camera, FrameInput, Light, look_at, make_scene

SPHERE_CENTER = (0.0, 1.2, 0.0)
SPHERE_RADIUS = 1.0
GROUND_HALF = 6.0
ORBIT_TARGET = (0.0, 0.8, 0.0)


def icosphere(subdivisions=2):
    """Unit icosphere: (V, 3) vertices on the unit sphere and (F, 3) CCW faces."""
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    verts = [tuple(c / math.sqrt(1 + t * t) for c in v) for v in verts]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = np.add(verts[a], verts[b]) / 2.0
                verts.append(tuple(m / np.linalg.norm(m)))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64)


def sphere_over_plane(subdivisions=2):
    """The three-light demo scene used by the acceptance tests."""
    sv, sf = icosphere(subdivisions)
    center = np.array(SPHERE_CENTER)
    sphere_tris = center + SPHERE_RADIUS * sv[sf]
    sphere_normals = sv[sf]

    h = GROUND_HALF
    quad = np.array(
        [
            [[-h, 0, -h], [-h, 0, h], [h, 0, h]],
            [[-h, 0, -h], [h, 0, h], [h, 0, -h]],
        ],
        dtype=np.float64,
    )
    up = np.tile([0.0, 1.0, 0.0], (2, 3, 1))

    verts = np.concatenate([quad, sphere_tris])
    normals = np.concatenate([up, sphere_normals])
    material_index = [0, 0] + [1] * len(sf)
    materials = [(0.8, 0.8, 0.75), (0.9, 0.25, 0.2)]
    lights = [
        Light.point((0.0, 5.0, 0.0), (9.0, 9.0, 9.0)),
        Light.point((4.0, 3.5, 3.0), (4.0, 3.2, 2.4)),
        Light.directional((-0.4, -1.0, -0.3), (0.9, 1.0, 1.2)),
    ]
    camera = Camera.create((0.0, 3.5, 6.0), look_at((0.0, 3.5, 6.0), ORBIT_TARGET), 50.0, 0.05)
    return make_scene(verts, materials, material_index, lights, camera, (0.05, 0.07, 0.1), normals)


def orbit_trace(n_frames=60, radius=6.0, height=3.5, vfov=50.0, interval_us=33333, near=0.05):
    """One full camera orbit around the scene center."""
    frames = []
    for f in range(n_frames):
        a = 2.0 * math.pi * f / n_frames
        pos = (radius * math.sin(a), height, radius * math.cos(a))
        cam = Camera.create(pos, look_at(pos, ORBIT_TARGET), vfov, near)
        frames.append(FrameInput(f, cam, f * interval_us))
    return frames
