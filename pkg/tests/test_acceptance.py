"""Acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line, listed in the pytest terminal summary.
"""
import csv
import hashlib
import math
import random
import struct
import time
import zlib

import numpy as np
import pytest

from conftest import random_scene, record_criterion
from dhr import demo, pipeline, raster, raytrace, shade, viscodec, wire
from dhr.cli import main
from dhr.scene import Light, dump_scene, dump_trace
from dhr.shade import shade_pixel
from dhr.transport import NetConditions
from test_raytrace import brute_force
from test_shade import reference
from test_wire import ACK, FRAME, GOLDEN, HELLO

W, H = 160, 120


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("accept")
    (d / "scene.json").write_text(dump_scene(demo.sphere_over_plane()))
    (d / "trace.jsonl").write_text(dump_trace(demo.orbit_trace(60)))
    return d


def cli_args(files, out, *extra):
    return ["--scene", str(files / "scene.json"), "--trace", str(files / "trace.jsonl"), "--out", str(out),
            "--width", str(W), "--height", str(H), *extra]


def test_1_oracle_equality(files, tmp_path):
    t0 = time.perf_counter()
    assert main(["local", *cli_args(files, tmp_path / "local")]) == 0
    assert main(["client", "--sim", "latency=0,jitter=0,loss=0", *cli_args(files, tmp_path / "sim")]) == 0
    elapsed = time.perf_counter() - t0
    names = sorted(p.name for p in (tmp_path / "local").glob("frame_*.ppm"))
    same = sum((tmp_path / "local" / n).read_bytes() == (tmp_path / "sim" / n).read_bytes() for n in names)
    ok = len(names) == 60 and same == 60 and elapsed < 60
    record_criterion(1, "distributed zero-loss output equals local oracle",
                     ok, f"{same}/60 PPM files byte-identical, {elapsed:.1f} s for both runs")
    assert ok


def test_2_frame_rate_and_breakdown(files, tmp_path):
    out = tmp_path / "wall"
    t0 = time.perf_counter()
    assert main(["client", "--sim", "latency=0,loss=0", "--timing", "wall", *cli_args(files, out)]) == 0
    fps = 60 / (time.perf_counter() - t0)
    with open(out / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    stages = ("raster_us", "trace_us", "compress_us", "bytes_sent", "chunks_sent", "wait_us", "total_us")
    complete = len(rows) == 60 and all(r[c] != "" for r in rows for c in stages)
    # the frame rate is reported, not gated; the per-stage breakdown is gated
    record_criterion(2, "simulated 160x120, 3 lights sustains >= 10 fps with per-stage metrics",
                     complete and fps >= 10, f"{fps:.1f} fps end to end, breakdown complete={complete}")
    assert complete


def test_3_loss_policy(sphere_scene):
    trace = demo.orbit_trace(60)

    def cut(run, fin):
        if fin.frame_id == 11:
            run.net.set_conditions(1, NetConditions(loss_prob=1.0))

    run = pipeline.SimRun(sphere_scene, W, H, NetConditions())
    bvh = raytrace.build_bvh(sphere_scene)
    eps = raytrace.default_epsilon(sphere_scene)
    vis10 = None
    bad = []
    for fin, img, m in run.frames(trace, cut):
        gb = raster.rasterize(sphere_scene, fin.camera, W, H)
        if fin.frame_id == 10:
            vis10 = raytrace.trace_visibility(bvh, gb, sphere_scene.lights, eps, 10)
        if fin.frame_id <= 10:
            if m.bitmap_frame_used != fin.frame_id:
                bad.append(fin.frame_id)
            continue
        oracle = shade.shade(gb, vis10, sphere_scene.lights, sphere_scene.background)
        if m.bitmap_frame_used != 10 or m.staleness != fin.frame_id - 10 or img != oracle:
            bad.append(fin.frame_id)
    ok = not bad
    record_criterion(3, "frames 11..59 shade with frame 10's bitmap after total loss",
                     ok, f"49 frames checked against the shade oracle, mismatching frames {bad}")
    assert ok


def _aimed_rays(rng, verts, n):
    """Half random rays, half aimed at points on random triangles."""
    o = rng.uniform(-7, 7, (n, 3))
    d = rng.normal(size=(n, 3))
    k = n // 2
    tri = verts[rng.integers(0, len(verts), k)].astype(float)
    a, b = rng.random((2, k, 1))
    flip = a + b > 1
    a, b = np.where(flip, 1 - a, a), np.where(flip, 1 - b, b)
    target = tri[:, 0] + a * (tri[:, 1] - tri[:, 0]) + b * (tri[:, 2] - tri[:, 0])
    d[:k] = target - o[:k]
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    tmax = np.where(rng.random(n) < 0.5, np.inf, rng.uniform(0.5, 15, n))
    return o, d, tmax


def test_4_bvh_brute_force():
    rng = np.random.default_rng(2024)
    queries = agree = hits = 0
    for s in range(20):
        scene = random_scene(rng, int(rng.integers(1, 501)), spread=float(rng.uniform(1, 6)))
        o, d, tmax = _aimed_rays(rng, scene.verts, 5000)
        got = raytrace.occluded_batch(raytrace.build_bvh(scene), o, d, tmax)
        expect = brute_force(scene.verts, o, d, tmax)
        queries += len(o)
        agree += int((got == expect).sum())
        hits += int(expect.sum())
    ok = queries >= 100_000 and agree == queries
    record_criterion(4, "BVH agrees with all-triangle Moller-Trumbore",
                     ok, f"{agree}/{queries} queries agree over 20 scenes, {hits} occluded")
    assert ok


def test_5_shading_examples():
    errs = []
    lights = [Light.point((0, 5, 0), (3, 3, 3)), Light.directional((0, -1, 0), (1, 1, 1))]
    errs.append(np.abs(shade_pixel((1, 1, 1), (0, 1, 0), (0, 0, 0), 0, lights)).max())
    out = shade_pixel((1, 1, 1), (0, 1, 0), (0, 0, 0), 1, [Light.point((0, 4, 0), (math.pi,) * 3)])
    errs.append(np.abs(out - 1).max())
    back = Light.directional((0.0, 0.5, -math.sqrt(0.75)), (1, 1, 1))
    errs.append(np.abs(shade_pixel((1, 1, 1), (0, 1, 0), (0, 0, 0), 1, [back])).max())
    rng = np.random.default_rng(5)
    for _ in range(200):
        ls = [Light.point(tuple(rng.uniform(-5, 5, 3)), tuple(rng.uniform(0, 4, 3))),
              Light.point(tuple(rng.uniform(-5, 5, 3)), tuple(rng.uniform(0, 4, 3))),
              Light.directional(tuple(rng.normal(size=3)), tuple(rng.uniform(0, 4, 3)))]
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        p, a, k = rng.uniform(-2, 2, 3), rng.uniform(0, 1, 3), int(rng.integers(0, 8))
        errs.append(np.abs(shade_pixel(a, n, p, k, ls) - reference(a, n, p, k, ls)).max())
    worst = max(errs)
    ok = worst <= 1e-6
    record_criterion(5, "Lambert sum unit examples", ok, f"max componentwise error {worst:.2e} <= 1e-6")
    assert ok


def _fuzz_inputs(rng, seeds, n):
    """Random bytes, mutated valid inputs, truncations."""
    for i in range(n):
        kind = i % 4
        if kind == 0:
            yield rng.randbytes(rng.randrange(0, 80))
            continue
        base = bytearray(seeds[rng.randrange(len(seeds))])
        if kind == 1 and base:
            for _ in range(rng.randrange(1, 4)):
                base[rng.randrange(len(base))] = rng.randrange(256)
        elif kind == 2:
            base = base[: rng.randrange(0, len(base) + 1)]
        else:
            pos = rng.randrange(len(base) + 1)
            base[pos:pos] = rng.randbytes(rng.randrange(1, 6))
        yield bytes(base)


def _reseal(data):
    if len(data) < wire.OVERHEAD:
        return data
    return data[:-4] + struct.pack("<I", zlib.crc32(data[:-4]))


@pytest.mark.slow
def test_6_codec_round_trip_and_fuzz():
    rng = np.random.default_rng(6)
    round_trips = 0
    for _ in range(1000):
        w, h, n = int(rng.integers(1, 120)), int(rng.integers(1, 90)), int(rng.integers(1, 65))
        density = rng.choice([0.0, 0.02, 0.5, 0.98, 1.0])
        blocky = rng.random() < 0.5
        bits = rng.random((n, h, w)) < density
        if blocky:
            bits = np.repeat(np.repeat(bits[:, ::8, ::8], 8, 1), 8, 2)[:, :h, :w]
        vis = raytrace.VisibilityBitmap.from_bits(bits.reshape(n, -1), w, h, 3)
        raw = viscodec.pack_bitmap(vis)
        back = viscodec.unpack_bitmap(viscodec.decompress(viscodec.compress(raw), len(raw)), w, h, n, 3)
        round_trips += back == vis

    prng = random.Random(6)
    seeds = [viscodec.compress(bytes(prng.randrange(4) for _ in range(prng.randrange(1, 400)))) for _ in range(50)]
    clean = crashes = 0
    for data in _fuzz_inputs(prng, seeds, 1_000_000):
        size = prng.randrange(0, 512)
        try:
            out = viscodec.decompress(data, size)
            clean += len(out) == size
        except viscodec.CodecError:
            clean += 1
        except Exception:
            crashes += 1

    msgs = [wire.encode(m) for m in (HELLO, ACK, FRAME)] + [bytes.fromhex(c) for c in GOLDEN["visibility_frame"]["chunks"]]
    wclean = wcrashes = 0
    for i, data in enumerate(_fuzz_inputs(prng, msgs, 1_000_000)):
        if i % 2:
            data = _reseal(data)  # get past the CRC so body parsing is exercised
        try:
            wire.encode(wire.decode(data))
            wclean += 1
        except wire.WireError:
            wclean += 1
        except Exception:
            wcrashes += 1
    ok = round_trips == 1000 and crashes == 0 and wcrashes == 0 and clean == wclean == 1_000_000
    record_criterion(6, "codec round trip and decoder robustness", ok,
                     f"{round_trips}/1000 bitmaps round-trip; decompress fuzz {clean}/10^6 clean; "
                     f"decode fuzz {wclean}/10^6 clean")
    assert ok


def _random_message(rng):
    kind = rng.randrange(4)
    sid, fid = rng.getrandbits(32), rng.getrandbits(32)
    if kind == 0:
        return wire.Hello(sid, rng.getrandbits(16), rng.getrandbits(16), rng.getrandbits(8), rng.getrandbits(64),
                          rng.getrandbits(16), fid)
    if kind == 1:
        return wire.HelloAck(sid, rng.getrandbits(16), rng.getrandbits(16), rng.getrandbits(8),
                             rng.getrandbits(64), rng.getrandbits(16), rng.getrandbits(8), fid)
    if kind == 2:
        q = np.float32(np.random.default_rng(rng.getrandbits(32)).normal(size=4))
        q = tuple(float(c) for c in np.float32(q / np.linalg.norm(q.astype(np.float64))))
        f32 = lambda: float(np.float32(rng.uniform(-1e4, 1e4)))
        return wire.FrameInputMsg(sid, fid, rng.getrandbits(64), (f32(), f32(), f32()), q,
                                  float(np.float32(rng.uniform(1, 179))))
    payload = rng.randbytes(rng.randrange(0, 1200))
    count = rng.randrange(1, 100)
    return wire.VisibilityChunk(sid, fid, rng.randrange(count), count, rng.getrandbits(32),
                                len(payload) + rng.randrange(0, 5000), payload)


def test_7_wire_protocol():
    golden_ok = (
        wire.decode(bytes.fromhex(GOLDEN["hello"])) == HELLO
        and wire.decode(bytes.fromhex(GOLDEN["frame_input"])) == FRAME
        and wire.encode(HELLO).hex() == GOLDEN["hello"]
        and wire.encode(FRAME).hex() == GOLDEN["frame_input"]
    )
    r = wire.Reassembler()
    chunks = [wire.decode(bytes.fromhex(c)) for c in GOLDEN["visibility_frame"]["chunks"]]
    payload = bytes.fromhex(GOLDEN["visibility_frame"]["payload"])
    golden_ok &= [x for x in map(r.feed, chunks) if x] == [(42, payload)] and len(chunks) == 3

    rng = random.Random(7)
    n_bij = 0
    for _ in range(10_000):
        m = _random_message(rng)
        data = wire.encode(m)
        n_bij += wire.decode(data) == m and wire.encode(wire.decode(data)) == data

    perm_ok = 0
    for trial in range(500):
        blob = rng.randbytes(rng.randrange(0, 6000))
        parts = wire.split_visibility(trial, blob, 1, rng.randrange(64, 1500))
        stream = parts + [rng.choice(parts) for _ in range(rng.randrange(0, 5))]
        rng.shuffle(stream)
        ra = wire.Reassembler()
        perm_ok += [x for x in map(ra.feed, stream) if x] == [(trial, blob)]
    ok = golden_ok and n_bij == 10_000 and perm_ok == 500
    record_criterion(7, "wire golden vectors, bijection and reassembly", ok,
                     f"golden={golden_ok}, bijection {n_bij}/10000, permuted+duplicated reassembly {perm_ok}/500")
    assert ok


# measured on the first verified build and pinned; any conformant encoder change must re-measure
FRAME0_COMPRESSED_BYTES = 981


def test_8_compression(sphere_scene):
    bvh = raytrace.build_bvh(sphere_scene)
    eps = raytrace.default_epsilon(sphere_scene)
    sizes = []
    for fin in demo.orbit_trace(60):
        gb = raster.rasterize(sphere_scene, fin.camera, W, H)
        raw = viscodec.pack_bitmap(raytrace.trace_visibility(bvh, gb, sphere_scene.lights, eps))
        assert len(raw) == 7200
        sizes.append(len(viscodec.compress(raw)))
    ok = sizes[0] == FRAME0_COMPRESSED_BYTES and max(sizes) <= 3600
    record_criterion(8, "sphere-over-plane bitmap compresses to <= 50% of 7200 bytes", ok,
                     f"frame 0: {sizes[0]} bytes ({sizes[0] / 72:.1f}%), worst of 60 frames {max(sizes)} bytes")
    assert ok


def _sim_digest(files, out):
    assert main(["client", "--sim", "latency=20,jitter=15,loss=0.2,seed=42", *cli_args(files, out)]) == 0
    h = hashlib.sha256()
    h.update((out / "metrics.csv").read_bytes())
    for p in sorted(out.glob("frame_*.ppm")):
        h.update(p.read_bytes())
    return h.hexdigest()


def _schedule(scene):
    run = pipeline.SimRun(scene, W, H, NetConditions(latency_ms=20, jitter_ms=15, loss_prob=0.2, seed=42))
    metrics = [m.row() for _, _, m in run.frames(demo.orbit_trace(60))]
    return [link.log for link in run.net.links], metrics


# digest of metrics.csv plus all 60 PPMs for the seeded lossy run, pinned for cross-platform checks
SIM_DIGEST = "ca21fb2d49b3c3991b4401adf22139cb2377ae2fbc52f31fd9cfb9adb4e3313b"


def test_9_simulator_determinism(files, tmp_path, sphere_scene):
    a, b = _sim_digest(files, tmp_path / "a"), _sim_digest(files, tmp_path / "b")
    sched_a, sched_b = _schedule(sphere_scene), _schedule(sphere_scene)
    stale = sum(1 for row in sched_a[1] if row[8] not in ("", "0"))
    ok = a == b and sched_a == sched_b and a == SIM_DIGEST
    record_criterion(9, "seeded simulation reproduces schedules, metrics and images", ok,
                     f"two runs identical={a == b and sched_a == sched_b}, pinned digest match={a == SIM_DIGEST}, "
                     f"{stale} stale frames, {sum(x[2] is None for x in sched_a[0][1])} server datagrams lost")
    assert ok
