import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dhr.scene import (
    FNV_OFFSET,
    Camera,
    Light,
    SceneError,
    canonical_bytes,
    dump_scene,
    dump_trace,
    fnv1a64,
    load_scene,
    load_trace,
    make_scene,
    scene_hash,
)

ONE_TRI = {
    "vertices": [[0, 0, 0], [1, 0, 0], [0, 1, 0]],
    "materials": [{"diffuse": [0.5, 0.5, 0.5]}],
    "triangles": [{"v": [0, 1, 2], "material": 0}],
    "lights": [{"type": "point", "position": [0, 0, 5], "intensity": [1, 1, 1]}],
    "camera": {"position": [0, 0, 5], "quat": [0, 0, 0, 1], "vfov": 60, "near": 0.1},
}


def doc(**changes):
    d = json.loads(json.dumps(ONE_TRI))
    d.update(changes)
    return json.dumps(d)


def test_single_triangle_gets_face_normal():
    s = load_scene(doc())
    assert s.n_triangles == 1
    assert s.normals.tolist() == [[[0, 0, 1]] * 3]


def test_face_normal_follows_ccw_winding():
    s = load_scene(doc(triangles=[{"v": [0, 2, 1], "material": 0}]))
    assert s.normals[0, 0].tolist() == [0, 0, -1]


def test_no_lights_rejected():
    with pytest.raises(SceneError, match="no lights"):
        load_scene(doc(lights=[]))


def test_too_many_lights_rejected():
    lights = [{"type": "directional", "direction": [0, -1, 0], "intensity": [1, 1, 1]}] * 65
    with pytest.raises(SceneError, match="too many lights"):
        load_scene(doc(lights=lights))
    assert len(load_scene(doc(lights=lights[:64])).lights) == 64


def test_non_unit_vertex_normal_renormalized():
    s = load_scene(doc(normals=[[0, 0, 2]], triangles=[{"v": [0, 1, 2], "n": [0, 0, 0], "material": 0}]))
    assert s.normals[0].tolist() == [[0, 0, 1]] * 3


@pytest.mark.parametrize(
    "changes, message",
    [
        ({"vertices": [[0, 0, 0], [1, 0, 0], [2, 0, 0]]}, "degenerate"),
        ({"triangles": [{"v": [0, 1, 2], "material": 3}]}, "material index"),
        ({"triangles": [{"v": [0, 1, 7], "material": 0}]}, "vertex index"),
        ({"materials": [{"diffuse": [1.5, 0, 0]}]}, r"\[0, 1\]"),
        ({"lights": [{"type": "spot", "intensity": [1, 1, 1]}]}, "unknown type"),
        ({"lights": [{"type": "point", "position": [0, 0, 0], "intensity": [-1, 0, 0]}]}, "nonnegative"),
        ({"camera": {"position": [0, 0, 0], "quat": [0, 0, 0, 1], "vfov": 200}}, "vfov"),
    ],
)
def test_invalid_scenes(changes, message):
    with pytest.raises(SceneError, match=message):
        load_scene(doc(**changes))


@pytest.mark.parametrize("text", ["", "{", "[]", '{"materials": 3}'])
def test_parse_errors(text):
    with pytest.raises(SceneError):
        load_scene(text)


def test_directional_light_normalized():
    s = load_scene(doc(lights=[{"type": "directional", "direction": [0, -3, 0], "intensity": [1, 1, 1]}]))
    assert s.lights[0].direction == (0.0, -1.0, 0.0)


def test_trace_three_frames():
    lines = "\n".join(json.dumps({"frame": i, "pos": [0, 0, i], "quat": [0, 0, 0, 1], "vfov": 50}) for i in range(3))
    frames = load_trace(lines)
    assert [f.frame_id for f in frames] == [0, 1, 2]
    assert frames[2].camera.position == (0.0, 0.0, 2.0)
    assert frames[1].timestamp_us == 33333


def test_trace_non_monotone():
    rec = json.dumps({"frame": 0, "pos": [0, 0, 0], "quat": [0, 0, 0, 1]})
    with pytest.raises(SceneError, match="non-monotone frame_id"):
        load_trace(rec + "\n" + rec)


def test_trace_quaternion_renormalized():
    (f,) = load_trace(json.dumps({"frame": 0, "pos": [0, 0, 0], "quat": [0, 0, 0, 0.9995]}))
    assert f.camera.orientation == (0.0, 0.0, 0.0, 1.0)


def test_trace_rejects_far_from_unit_quaternion():
    with pytest.raises(SceneError, match="not unit"):
        load_trace(json.dumps({"frame": 0, "pos": [0, 0, 0], "quat": [0, 0, 0, 0.99]}))


def test_trace_round_trip(orbit):
    assert load_trace(dump_trace(orbit)) == orbit


def test_fnv_offset_basis():
    assert fnv1a64(b"") == 0xCBF29CE484222325 == FNV_OFFSET


def test_fnv_known_vectors():
    # published FNV-1a 64 test vectors
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


def _independent_fnv(data):
    h = 14695981039346656037
    for b in data:
        h ^= b
        h = (h * 1099511628211) % (1 << 64)
    return h


def test_scene_hash_reload_invariant(sphere_scene):
    again = load_scene(dump_scene(sphere_scene))
    assert again == sphere_scene
    assert scene_hash(again) == scene_hash(sphere_scene)


def test_scene_hash_detects_light_change(sphere_scene):
    doc_ = json.loads(dump_scene(sphere_scene))
    doc_["lights"][1]["intensity"][0] += 0.5
    changed = load_scene(json.dumps(doc_))
    h0 = _independent_fnv(canonical_bytes(sphere_scene))
    h1 = _independent_fnv(canonical_bytes(changed))
    assert h0 != h1
    assert scene_hash(sphere_scene) == h0
    assert scene_hash(changed) == h1


def test_canonical_layout_prefix(sphere_scene):
    data = canonical_bytes(sphere_scene)
    (t,) = struct.unpack_from("<I", data)
    assert t == sphere_scene.n_triangles
    first = struct.unpack_from("<18fI", data, 4)
    assert list(first[:9]) == sphere_scene.verts[0].reshape(-1).tolist()


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: d["vertices"][0].__setitem__(0, d["vertices"][0][0] + 0.25),
        lambda d: d["materials"][0]["diffuse"].__setitem__(2, 0.1),
        lambda d: d["background"].__setitem__(0, 0.5),
        lambda d: d["camera"].__setitem__("vfov", 51.0),
        lambda d: d["camera"].__setitem__("near", 0.5),
        lambda d: d["lights"][2]["direction"].__setitem__(0, 0.3),
        lambda d: d["triangles"][5].__setitem__("material", 0),
    ],
)
def test_scene_hash_sensitive_to_fields(sphere_scene, mutate):
    d = json.loads(dump_scene(sphere_scene))
    mutate(d)
    assert scene_hash(load_scene(json.dumps(d))) != scene_hash(sphere_scene)


finite = st.floats(-50, 50, allow_nan=False, width=32)
vec = st.tuples(finite, finite, finite)
unit_ish = st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.1, 1))


@st.composite
def scenes(draw):
    n = draw(st.integers(0, 6))
    verts = []
    for _ in range(n):
        a = np.array(draw(vec))
        verts.append([a, a + [1, 0, 0], a + [0, draw(st.floats(0.5, 3)), draw(st.floats(-1, 1))]])
    mats = draw(st.lists(st.tuples(*[st.floats(0, 1)] * 3), min_size=1, max_size=3))
    midx = [draw(st.integers(0, len(mats) - 1)) for _ in range(n)]
    lights = []
    for _ in range(draw(st.integers(1, 4))):
        inten = draw(st.tuples(*[st.floats(0, 10)] * 3))
        if draw(st.booleans()):
            lights.append(Light.point(draw(vec), inten))
        else:
            lights.append(Light.directional(draw(unit_ish), inten))
    q = np.array(draw(st.tuples(*[st.floats(-1, 1)] * 3, st.floats(0.2, 1))))
    cam = Camera.create(draw(vec), q, draw(st.floats(10, 120)), draw(st.floats(0.01, 1)))
    normals = None
    if n and draw(st.booleans()):
        normals = np.tile([0.0, 0.6, 0.8], (n, 3, 1))
    return make_scene(np.array(verts).reshape(-1, 3, 3), mats, midx, lights, cam,
                      draw(st.tuples(*[st.floats(0, 1)] * 3)), normals)


@settings(max_examples=60, deadline=None)
@given(scenes())
def test_dump_load_round_trip(scene):
    again = load_scene(dump_scene(scene))
    assert again == scene
    assert scene_hash(again) == scene_hash(scene)
    if scene.n_triangles:
        lengths = np.linalg.norm(again.normals.astype(np.float64), axis=2)
        assert np.all(np.abs(lengths - 1) <= 1e-4)


def test_camera_quaternion_normalized_on_create():
    cam = Camera.create((0, 0, 0), (0, 0, 0, 2))
    assert abs(math.sqrt(sum(c * c for c in cam.orientation)) - 1) < 1e-6
