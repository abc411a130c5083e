"""Numba kernels vs the numpy/python fallbacks on the demo workload.

    python benchmarks/bench_kernels.py [--repeat 5] [--width 160 --height 120]

Each kernel runs once untimed (JIT compile / cache load), then ``--repeat``
times; the table shows the median.  Outputs of both backends are compared
so a speedup never hides a divergence.
"""
import argparse
import statistics
import time

from dhr import _accel, demo, raster, raytrace, viscodec


def timed(fn, repeat):
    fn()
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--width", type=int, default=160)
    ap.add_argument("--height", type=int, default=120)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    scene = demo.sphere_over_plane()
    cam = demo.orbit_trace()[0].camera
    w, h = args.width, args.height
    bvh = raytrace.build_bvh(scene)
    eps = raytrace.default_epsilon(scene)
    gb = raster.rasterize(scene, cam, w, h)
    raw = viscodec.pack_bitmap(raytrace.trace_visibility(bvh, gb, scene.lights, eps))
    packed = viscodec.compress(raw)

    def raster_case(nb):
        def run():
            g = raster.rasterize(scene, cam, w, h, use_numba=nb)
            return g.world_pos.tobytes() + g.valid.tobytes()
        return run

    cases = [
        ("rasterize", raster_case),
        ("trace_visibility", lambda nb: lambda: raytrace.trace_visibility(bvh, gb, scene.lights, eps, use_numba=nb).planes.tobytes()),
        ("lz4 compress", lambda nb: lambda: viscodec.compress(raw, nb)),
        ("lz4 decompress", lambda nb: lambda: viscodec.decompress(packed, len(raw), nb)),
    ]
    print(f"{w}x{h}, {scene.n_triangles} triangles, {len(scene.lights)} lights, "
          f"bitmap {len(raw)} -> {len(packed)} bytes, median of {args.repeat}")
    print(f"{'kernel':<18}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}  same")
    for name, make in cases:
        t_nb, out_nb = timed(make(True), args.repeat)
        t_np, out_np = timed(make(False), args.repeat)
        print(f"{name:<18}{t_nb * 1e3:>10.2f}{t_np * 1e3:>10.2f}{t_np / t_nb:>8.1f}x  {out_nb == out_np}")


if __name__ == "__main__":
    main()
