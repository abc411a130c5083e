"""Scene, light, camera and camera-trace data model.

Scene files are a single JSON document; traces are JSON lines.  All numbers
are parsed as doubles and narrowed to float32, which is the precision the
renderer and the wire protocol work in.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

MAX_LIGHTS = 64
DEFAULT_FRAME_INTERVAL_US = 33333

# Unit vectors / quaternions closer than this to length 1 are left alone, so
# that float32 values that are already normalized survive a reload bit-exactly.
_RENORM_TOL = 1e-6
_NORMAL_TOL = 1e-4
_TRACE_QUAT_TOL = 1e-3


class SceneError(ValueError):
    """Raised for malformed or invalid scene and trace files."""


def f32(x) -> float:
    """Round a double to the nearest float32 and return it as a Python float."""
    return float(np.float32(x))


def _vec3(value, what):
    try:
        v = [float(c) for c in value]
    except (TypeError, ValueError):
        raise SceneError(f"{what}: expected 3 numbers") from None
    if len(v) != 3:
        raise SceneError(f"{what}: expected 3 numbers, got {len(v)}")
    if not all(math.isfinite(c) for c in v):
        raise SceneError(f"{what}: non-finite component")
    return v


def _unit(v, what, tol=_RENORM_TOL):
    n = math.sqrt(sum(c * c for c in v))
    if n == 0.0:
        raise SceneError(f"{what}: zero-length vector")
    if abs(n - 1.0) > tol:
        v = [c / n for c in v]
    return v


@dataclass(frozen=True)
class Light:
    kind: str  # "point" | "directional"
    intensity: tuple
    position: tuple = (0.0, 0.0, 0.0)
    direction: tuple = (0.0, 0.0, 0.0)  # from the light toward the scene

    @classmethod
    def point(cls, position, intensity):
        return cls("point", tuple(map(f32, intensity)), position=tuple(map(f32, position)))

    @classmethod
    def directional(cls, direction, intensity):
        d = _unit(_vec3(direction, "light direction"), "light direction")
        return cls("directional", tuple(map(f32, intensity)), direction=tuple(map(f32, d)))

    def to_json(self):
        out = {"type": self.kind, "intensity": list(self.intensity)}
        if self.kind == "point":
            out["position"] = list(self.position)
        else:
            out["direction"] = list(self.direction)
        return out


@dataclass(frozen=True)
class Camera:
    """Pinhole camera looking down its local -Z axis with +Y up."""

    position: tuple
    orientation: tuple  # unit quaternion (x, y, z, w)
    vfov_deg: float = 60.0
    near: float = 0.05

    @classmethod
    def create(cls, position, orientation, vfov_deg=60.0, near=0.05, quat_tol=None):
        pos = _vec3(position, "camera position")
        q = [float(c) for c in orientation]
        if len(q) != 4 or not all(math.isfinite(c) for c in q):
            raise SceneError("camera quaternion: expected 4 finite numbers")
        n = math.sqrt(sum(c * c for c in q))
        if quat_tol is not None and abs(n - 1.0) > quat_tol:
            raise SceneError(f"camera quaternion not unit (norm {n:.6g})")
        q = _unit(q, "camera quaternion")
        vfov = float(vfov_deg)
        if not 0.0 < vfov < 180.0:
            raise SceneError(f"vfov_deg must be in (0, 180), got {vfov}")
        if not float(near) > 0.0:
            raise SceneError("near must be > 0")
        return cls(tuple(map(f32, pos)), tuple(map(f32, q)), f32(vfov), f32(near))

    def basis(self):
        """World-space (right, up, forward) unit vectors as float64 arrays."""
        m = quat_to_matrix(self.orientation)
        return m[:, 0], m[:, 1], -m[:, 2]

    def to_json(self):
        return {
            "position": list(self.position),
            "quat": list(self.orientation),
            "vfov": self.vfov_deg,
            "near": self.near,
        }


@dataclass(frozen=True)
class FrameInput:
    frame_id: int
    camera: Camera
    timestamp_us: int


@dataclass(eq=False)
class Scene:
    """Triangle soup with per-triangle materials.

    ``verts`` and ``normals`` have shape (T, 3, 3) (triangle, vertex, xyz),
    ``material_index`` shape (T,), ``materials`` shape (M, 3); all float
    arrays are float32.
    """

    verts: np.ndarray
    normals: np.ndarray
    material_index: np.ndarray
    materials: np.ndarray
    lights: list
    default_camera: Camera
    background: tuple = (0.0, 0.0, 0.0)
    _bounds: tuple = field(default=None, repr=False)

    @property
    def n_triangles(self):
        return int(self.verts.shape[0])

    def bounds(self):
        """Axis-aligned bounds of the geometry (float64), or zeros if empty."""
        if self._bounds is None:
            if self.n_triangles == 0:
                lo = hi = np.zeros(3)
            else:
                pts = self.verts.reshape(-1, 3).astype(np.float64)
                lo, hi = pts.min(axis=0), pts.max(axis=0)
            self._bounds = (lo, hi)
        return self._bounds

    def diagonal(self):
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            np.array_equal(self.verts, other.verts)
            and np.array_equal(self.normals, other.normals)
            and np.array_equal(self.material_index, other.material_index)
            and np.array_equal(self.materials, other.materials)
            and self.lights == other.lights
            and self.default_camera == other.default_camera
            and tuple(self.background) == tuple(other.background)
        )


def quat_to_matrix(q):
    """Rotation matrix (float64) for a unit quaternion given as (x, y, z, w)."""
    x, y, z, w = (float(c) for c in q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(m):
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        w, x = 0.25 * s, (m[2, 1] - m[1, 2]) / s
        y, z = (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        w, x = (m[2, 1] - m[1, 2]) / s, 0.25 * s
        y, z = (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        w, x = (m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s
        y, z = 0.25 * s, (m[1, 2] + m[2, 1]) / s
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        w, x = (m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s
        y, z = (m[1, 2] + m[2, 1]) / s, 0.25 * s
    return (x, y, z, w)


def look_at(position, target, up=(0.0, 1.0, 0.0)):
    """Quaternion orienting a camera at ``position`` toward ``target``."""
    pos = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - pos
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    true_up = np.cross(right, fwd)
    return matrix_to_quat(np.column_stack([right, true_up, -fwd]))


def face_normals(verts):
    """Unit counter-clockwise face normals and triangle areas (float64)."""
    v = verts.astype(np.float64)
    cr = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    length = np.linalg.norm(cr, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        n = cr / length[:, None]
    return n, 0.5 * length


def make_scene(verts, materials, material_index, lights, camera, background=(0, 0, 0), normals=None):
    """Validate raw arrays and build a :class:`Scene`.

    ``normals`` may be None (face normals everywhere) or a (T, 3, 3) array in
    which rows of NaN mark triangles that should get their face normal.
    """
    verts = np.asarray(verts, dtype=np.float64).reshape(-1, 3, 3)
    if not np.all(np.isfinite(verts)):
        raise SceneError("non-finite vertex coordinate")
    verts32 = verts.astype(np.float32)
    fn, area = face_normals(verts32)
    bad = np.flatnonzero(~(area > 0))
    if bad.size:
        raise SceneError(f"degenerate triangle {int(bad[0])} (area 0)")

    mats = np.asarray(materials, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(mats)) or np.any(mats < 0) or np.any(mats > 1):
        raise SceneError("material diffuse channels must lie in [0, 1]")
    midx = np.asarray(material_index, dtype=np.int64).reshape(-1)
    if midx.shape[0] != verts.shape[0]:
        raise SceneError("one material index per triangle required")
    if midx.size and (midx.min() < 0 or midx.max() >= mats.shape[0]):
        raise SceneError("material index out of range")

    if normals is None:
        n = np.repeat(fn[:, None, :], 3, axis=1)
    else:
        n = np.asarray(normals, dtype=np.float64).reshape(-1, 3, 3).copy()
        missing = np.isnan(n).any(axis=(1, 2))
        n[missing] = fn[missing][:, None, :]
        if not np.all(np.isfinite(n)):
            raise SceneError("non-finite vertex normal")
        length = np.linalg.norm(n, axis=2)
        if np.any(length == 0):
            raise SceneError("zero-length vertex normal")
        fix = np.abs(length - 1.0) > _RENORM_TOL
        n[fix] /= length[fix][:, None]
    n32 = n.astype(np.float32)
    if n32.size and np.max(np.abs(np.linalg.norm(n32.astype(np.float64), axis=2) - 1.0)) > _NORMAL_TOL:
        raise SceneError("vertex normal not unit length")

    lights = list(lights)
    if not lights:
        raise SceneError("no lights")
    if len(lights) > MAX_LIGHTS:
        raise SceneError(f"too many lights ({len(lights)} > {MAX_LIGHTS})")
    for li in lights:
        if li.kind not in ("point", "directional"):
            raise SceneError(f"unknown light type {li.kind!r}")
        if any(c < 0 or not math.isfinite(c) for c in li.intensity):
            raise SceneError("light intensity must be finite and nonnegative")

    bg = tuple(f32(c) for c in _vec3(background, "background"))
    return Scene(
        verts=verts32,
        normals=n32,
        material_index=midx.astype(np.int32),
        materials=mats.astype(np.float32),
        lights=lights,
        default_camera=camera,
        background=bg,
    )


def _light_from_json(obj, i):
    if not isinstance(obj, dict):
        raise SceneError(f"light {i}: expected an object")
    kind = obj.get("type")
    intensity = _vec3(obj.get("intensity"), f"light {i} intensity")
    if kind == "point":
        return Light.point(_vec3(obj.get("position"), f"light {i} position"), intensity)
    if kind == "directional":
        return Light.directional(_vec3(obj.get("direction"), f"light {i} direction"), intensity)
    raise SceneError(f"light {i}: unknown type {kind!r}")


def _camera_from_json(obj):
    if not isinstance(obj, dict):
        raise SceneError("camera: expected an object")
    try:
        return Camera.create(obj["position"], obj["quat"], obj.get("vfov", 60.0), obj.get("near", 0.05))
    except KeyError as e:
        raise SceneError(f"camera: missing field {e.args[0]!r}") from None
    except TypeError:
        raise SceneError("camera: malformed field") from None


def load_scene(text):
    """Parse and validate a ``.scene.json`` document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SceneError(f"parse error: {e}") from None
    if not isinstance(doc, dict):
        raise SceneError("parse error: top level must be an object")
    try:
        vertices = np.asarray(doc.get("vertices", []), dtype=np.float64).reshape(-1, 3)
        vnormals = np.asarray(doc.get("normals", []), dtype=np.float64).reshape(-1, 3)
        mats = [_vec3(m["diffuse"], f"material {i}") for i, m in enumerate(doc["materials"])]
        tris = doc.get("triangles", [])
        idx = np.zeros((len(tris), 3), dtype=np.int64)
        nidx = np.full((len(tris), 3), -1, dtype=np.int64)
        midx = np.zeros(len(tris), dtype=np.int64)
        for t, tri in enumerate(tris):
            idx[t] = tri["v"]
            if "n" in tri:
                nidx[t] = tri["n"]
            midx[t] = tri.get("material", 0)
    except SceneError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise SceneError(f"parse error: {e}") from None

    if idx.size and (idx.min() < 0 or idx.max() >= len(vertices)):
        raise SceneError("vertex index out of range")
    if np.any(nidx >= len(vnormals)) or np.any((nidx < 0) & (nidx != -1)):
        raise SceneError("normal index out of range")
    verts = vertices[idx] if idx.size else np.zeros((0, 3, 3))
    normals = np.full((len(tris), 3, 3), np.nan)
    has_n = (nidx >= 0).all(axis=1)
    if has_n.any():
        normals[has_n] = vnormals[nidx[has_n]]

    lights = [_light_from_json(o, i) for i, o in enumerate(doc.get("lights", []))]
    if "camera" not in doc:
        raise SceneError("missing camera")
    camera = _camera_from_json(doc["camera"])
    return make_scene(verts, mats, midx, lights, camera, doc.get("background", (0, 0, 0)), normals)


def dump_scene(scene):
    """Serialize a scene to the JSON scene format (unindexed vertices)."""
    t = scene.n_triangles
    return json.dumps(
        {
            "vertices": scene.verts.reshape(-1, 3).tolist(),
            "normals": scene.normals.reshape(-1, 3).tolist(),
            "materials": [{"diffuse": m} for m in scene.materials.tolist()],
            "triangles": [
                {"v": [3 * i, 3 * i + 1, 3 * i + 2], "n": [3 * i, 3 * i + 1, 3 * i + 2], "material": int(m)}
                for i, m in zip(range(t), scene.material_index.tolist())
            ],
            "lights": [li.to_json() for li in scene.lights],
            "background": list(scene.background),
            "camera": scene.default_camera.to_json(),
        }
    )


def load_trace(text, near=0.05):
    """Parse a ``.trace.jsonl`` camera trace into a list of FrameInput."""
    frames = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            fid = int(rec["frame"])
            camera = Camera.create(
                rec["pos"], rec["quat"], rec.get("vfov", 60.0), near, quat_tol=_TRACE_QUAT_TOL
            )
            ts = int(rec.get("t_us", fid * DEFAULT_FRAME_INTERVAL_US))
        except SceneError as e:
            raise SceneError(f"line {lineno}: {e}") from None
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise SceneError(f"line {lineno}: parse error: {e}") from None
        if not 0 <= fid < 2**32 or not 0 <= ts < 2**64:
            raise SceneError(f"line {lineno}: frame or timestamp out of range")
        if frames and fid <= frames[-1].frame_id:
            raise SceneError(f"line {lineno}: non-monotone frame_id")
        frames.append(FrameInput(fid, camera, ts))
    return frames


def dump_trace(frames):
    return "".join(
        json.dumps(
            {
                "frame": f.frame_id,
                "pos": list(f.camera.position),
                "quat": list(f.camera.orientation),
                "vfov": f.camera.vfov_deg,
                "t_us": f.timestamp_us,
            }
        )
        + "\n"
        for f in frames
    )


FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data, h=FNV_OFFSET):
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


_LIGHT_KIND = {"point": 0, "directional": 1}


def canonical_bytes(scene):
    """Little-endian canonical serialization hashed by :func:`scene_hash`.

    Layout: u32 triangle count, then per triangle v0 v1 v2 n0 n1 n2 (f32) and
    material u32; u32 material count + diffuse f32x3 each; u32 light count +
    (kind u8, position f32x3, direction f32x3, intensity f32x3) each; camera
    position f32x3, quaternion f32x4, vfov f32, near f32; background f32x3.
    """
    t = scene.n_triangles
    tri = np.zeros(t, dtype=[("g", "<f4", (18,)), ("m", "<u4")])
    tri["g"] = np.concatenate([scene.verts, scene.normals], axis=1).reshape(t, 18)
    tri["m"] = scene.material_index
    parts = [struct.pack("<I", t), tri.tobytes()]
    parts.append(struct.pack("<I", scene.materials.shape[0]))
    parts.append(scene.materials.astype("<f4").tobytes())
    parts.append(struct.pack("<I", len(scene.lights)))
    for li in scene.lights:
        parts.append(struct.pack("<B9f", _LIGHT_KIND[li.kind], *li.position, *li.direction, *li.intensity))
    cam = scene.default_camera
    parts.append(struct.pack("<9f", *cam.position, *cam.orientation, cam.vfov_deg, cam.near))
    parts.append(struct.pack("<3f", *scene.background))
    return b"".join(parts)


def scene_hash(scene):
    """FNV-1a 64 over :func:`canonical_bytes`."""
    return fnv1a64(canonical_bytes(scene))
