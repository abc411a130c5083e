import ctypes
import ctypes.util

import pytest

from dhr import _accel, demo, raster, raytrace
from dhr.scene import Camera, Light, look_at, make_scene

BACKENDS = [False] + ([True] if _accel.HAVE_NUMBA else [])


@pytest.fixture(params=BACKENDS, ids=lambda nb: "numba" if nb else "numpy")
def use_numba(request):
    return request.param


@pytest.fixture(scope="session")
def sphere_scene():
    return demo.sphere_over_plane()


@pytest.fixture(scope="session")
def orbit():
    return demo.orbit_trace()


@pytest.fixture(scope="session")
def sphere_frame0(sphere_scene, orbit):
    """G-buffer, BVH and visibility of orbit frame 0 at 160x120."""
    gb = raster.rasterize(sphere_scene, orbit[0].camera, 160, 120)
    bvh = raytrace.build_bvh(sphere_scene)
    vis = raytrace.trace_visibility(bvh, gb, sphere_scene.lights, raytrace.default_epsilon(sphere_scene))
    return gb, bvh, vis


def quad_scene(z=-5.0, half=100.0, color=(1.0, 0.0, 0.0)):
    """Huge camera-facing quad at depth -z, two triangles."""
    v = [
        [[-half, -half, z], [half, -half, z], [half, half, z]],
        [[-half, -half, z], [half, half, z], [-half, half, z]],
    ]
    cam = Camera.create((0, 0, 0), (0, 0, 0, 1), 60.0, 0.1)
    return make_scene(v, [color], [0, 0], [Light.point((0, 0, 0), (1, 1, 1))], cam)


def random_scene(rng, n_tris, spread=4.0, size=1.0):
    centers = rng.uniform(-spread, spread, (n_tris, 1, 3))
    verts = centers + rng.uniform(-size, size, (n_tris, 3, 3))
    cam = Camera.create((0, 0, 10), look_at((0, 0, 10), (0, 0, 0)), 60.0, 0.05)
    return make_scene(verts, [(0.5, 0.5, 0.5)], [0] * n_tris, [Light.point((0, 8, 0), (1, 1, 1))], cam)


def _load_liblz4():
    name = ctypes.util.find_library("lz4") or "liblz4.so.1"
    try:
        lib = ctypes.CDLL(name)
    except OSError:
        return None
    lib.LZ4_decompress_safe.argtypes = [ctypes.c_char_p, ctypes.c_char_p, ctypes.c_int, ctypes.c_int]
    lib.LZ4_decompress_safe.restype = ctypes.c_int
    lib.LZ4_compress_default.argtypes = [ctypes.c_char_p, ctypes.c_char_p, ctypes.c_int, ctypes.c_int]
    lib.LZ4_compress_default.restype = ctypes.c_int
    return lib


@pytest.fixture(scope="session")
def liblz4():
    """The reference LZ4 library, used only as an interop oracle."""
    lib = _load_liblz4()
    if lib is None:
        pytest.skip("liblz4 not available")
    return lib


ACCEPTANCE = []


def record_criterion(number, title, ok, detail):
    """Store one acceptance line; printed now and again in the terminal summary."""
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    ACCEPTANCE.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
