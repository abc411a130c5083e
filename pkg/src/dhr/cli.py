"""Command-line entry points: ``serve``, ``client``, ``local`` and ``demo``.

Exit codes: 0 success, 2 bad input, 3 handshake failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, _accel, demo, pipeline, wire
from .scene import SceneError, dump_scene, dump_trace, load_scene, load_trace, scene_hash
from .shade import ImageRgb8
from .transport import NetConditions, UdpEndpoint, wall_ms

log = logging.getLogger("dhr")

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_HANDSHAKE = 3


class BadInput(Exception):
    pass


def write_ppm(image):
    """Binary P6 encoding of an :class:`ImageRgb8`."""
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(image.pixels, dtype=np.uint8).tobytes()


_PPM_HEADER = re.compile(rb"P6\s+(\d+)\s+(\d+)\s+255\s")


def read_ppm(data):
    m = _PPM_HEADER.match(data)
    if m is None:
        raise ValueError("not an 8-bit binary PPM")
    w, h = int(m.group(1)), int(m.group(2))
    pixels = np.frombuffer(data[m.end() : m.end() + w * h * 3], dtype=np.uint8)
    if pixels.size != w * h * 3:
        raise ValueError("truncated PPM")
    return ImageRgb8(w, h, pixels.reshape(h, w, 3).copy())


class OutputWriter:
    """frame_%05d.ppm files plus metrics.csv in one directory."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.dir / "metrics.csv", "w", newline="")
        self._csv = csv.writer(self._fh, lineterminator="\n")
        self._csv.writerow(pipeline.FrameMetrics.columns())
        self.count = 0

    def write(self, frame_id, image, metrics):
        (self.dir / f"frame_{frame_id:05d}.ppm").write_bytes(write_ppm(image))
        self._csv.writerow(metrics.row())
        self.count += 1

    def close(self):
        self._fh.close()


def _read_inputs(args, need_trace=True):
    try:
        scene = load_scene(Path(args.scene).read_text(encoding="utf-8"))
        frames = None
        if need_trace:
            frames = load_trace(Path(args.trace).read_text(encoding="utf-8"), scene.default_camera.near)
    except OSError as e:
        raise BadInput(f"cannot read input: {e}") from None
    except (SceneError, UnicodeDecodeError) as e:
        raise BadInput(str(e)) from None
    return scene, frames


def _clock(args, default):
    timing = args.timing or default
    return time.perf_counter if timing == "wall" else None


def cmd_local(args):
    scene, frames = _read_inputs(args)
    out = OutputWriter(args.out)
    t0 = time.perf_counter()
    try:
        for fin, image, m in pipeline.run_local(scene, frames, args.width, args.height, _clock(args, "virtual")):
            out.write(fin.frame_id, image, m)
    finally:
        out.close()
    dt = time.perf_counter() - t0
    log.info("local: %d frames in %.2f s (%.1f fps)", out.count, dt, out.count / dt if dt > 0 else 0.0)
    return EXIT_OK


def _summarize(kind, n, metrics, seconds):
    stale = sum(1 for m in metrics if m.staleness)
    fallback = sum(1 for m in metrics if m.fallback_used)
    fps = n / seconds if seconds > 0 else float("inf")
    log.info("%s: %d frames in %.2f s (%.1f fps), stale=%d fallback=%d", kind, n, seconds, fps, stale, fallback)


def cmd_client(args):
    scene, frames = _read_inputs(args)
    if args.sim is not None:
        try:
            cond = NetConditions.parse(args.sim)
        except (ValueError, TypeError) as e:
            raise BadInput(f"--sim: {e}") from None
        return _client_sim(args, scene, frames, cond)
    return _client_udp(args, scene, frames)


def _client_sim(args, scene, frames, cond):
    run = pipeline.SimRun(
        scene, args.width, args.height, cond, deadline_ms=args.deadline_ms,
        max_payload=args.max_payload, clock=_clock(args, "virtual"),
    )
    try:
        run.connect()
    except pipeline.HandshakeError as e:
        log.error("handshake failed: %s", e)
        return EXIT_HANDSHAKE
    out = OutputWriter(args.out)
    metrics = []
    t0 = time.perf_counter()
    try:
        for fin, image, m in run.frames(frames):
            out.write(fin.frame_id, image, m)
            metrics.append(m)
    finally:
        out.close()
    _summarize("sim client", out.count, metrics, time.perf_counter() - t0)
    return EXIT_OK


def _client_udp(args, scene, frames):
    try:
        ep = UdpEndpoint(args.bind, args.connect)
    except (OSError, ValueError) as e:
        raise BadInput(f"cannot open socket: {e}") from None
    clock = _clock(args, "wall")
    pipeline.warmup()
    client = pipeline.ClientState(
        scene, args.width, args.height, args.deadline_ms, args.max_payload, clock=clock
    )
    link = pipeline.UdpLink(ep)
    out = None
    try:
        try:
            now = client.handshake(link, wall_ms())
        except pipeline.HandshakeError as e:
            log.error("handshake failed: %s", e)
            return EXIT_HANDSHAKE
        log.info("connected to %s, session %08x", args.connect, client.session.session_id)
        out = OutputWriter(args.out)
        metrics = []
        start = now
        t0 = time.perf_counter()
        first_ts = frames[0].timestamp_us if frames else 0
        for fin in frames:
            target = start + (fin.timestamp_us - first_ts) / 1000.0
            if not args.no_pace:
                delay = target - wall_ms()
                if delay > 0:
                    time.sleep(delay / 1000.0)
            image, m, _ = client.frame(fin, link, wall_ms())
            out.write(fin.frame_id, image, m)
            metrics.append(m)
        _summarize("udp client", out.count, metrics, time.perf_counter() - t0)
    finally:
        ep.close()
        if out is not None:
            out.close()
    return EXIT_OK


def cmd_serve(args):
    scene, _ = _read_inputs(args, need_trace=False)
    try:
        ep = UdpEndpoint(args.listen)
    except (OSError, ValueError) as e:
        log.error("cannot bind %s: %s", args.listen, e)
        return EXIT_BAD_INPUT
    server = pipeline.ServerState(scene, time.perf_counter)
    pipeline.warmup()
    host, port = ep.address[:2]
    log.info("ready on %s:%d scene_hash=%016x lights=%d triangles=%d",
             host, port, server.scene_hash, len(scene.lights), scene.n_triangles)
    sys.stderr.flush()
    seen = set()
    try:
        while True:
            for data in ep.poll_receive(deadline=wall_ms() + 500.0):
                replies = server.handle_datagram(data, wall_ms())
                if replies:
                    ep.reply_to_sender()
                for r in replies:
                    ep.send(r)
            for f in sorted(set(server.frame_stats) - seen):
                st = server.frame_stats[f]
                seen.add(f)
                log.info("frame %d raster_us=%d trace_us=%d compress_us=%d bytes=%d chunks=%d",
                         f, st.raster_us, st.trace_us, st.compress_us, st.bytes_sent, st.chunks_sent)
            if len(seen) > 1024:
                seen = {f for f in seen if f > max(seen) - 64}
                server.frame_stats = {f: s for f, s in server.frame_stats.items() if f in seen}
    except KeyboardInterrupt:
        return EXIT_OK
    finally:
        ep.close()


def cmd_demo(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = demo.sphere_over_plane()
    (out / "sphere_plane.scene.json").write_text(dump_scene(scene))
    (out / "orbit.trace.jsonl").write_text(dump_trace(demo.orbit_trace(args.frames)))
    log.info("wrote %s (scene_hash=%016x)", out, scene_hash(scene))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="dhr", description="Distributed hybrid rendering with streamed shadow visibility.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, trace=True):
        sp.add_argument("--scene", required=True, help="scene file (.scene.json)")
        if trace:
            sp.add_argument("--trace", required=True, help="camera trace (.trace.jsonl)")
            sp.add_argument("--out", required=True, help="output directory for PPM frames and metrics.csv")
            sp.add_argument("--width", type=int, default=160)
            sp.add_argument("--height", type=int, default=120)
            sp.add_argument("--timing", choices=("virtual", "wall"), default=None,
                            help="stage timings: 'virtual' records 0 for compute (reproducible), 'wall' measures")

    sp = sub.add_parser("serve", help="run the ray-tracing server over UDP")
    common(sp, trace=False)
    sp.add_argument("--listen", default="0.0.0.0:7000")
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("client", help="run the thin client over UDP or in simulation")
    common(sp)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--connect", help="server host:port")
    g.add_argument("--sim", help="simulate: latency=MS,jitter=MS,loss=P,mtu=N,seed=N")
    sp.add_argument("--bind", default="0.0.0.0:0", help="local UDP address")
    sp.add_argument("--deadline-ms", type=float, default=pipeline.DEFAULT_DEADLINE_MS)
    sp.add_argument("--max-payload", type=int, default=wire.DEFAULT_MAX_PAYLOAD)
    sp.add_argument("--no-pace", action="store_true", help="UDP: do not pace frames by trace timestamps")
    sp.set_defaults(func=cmd_client)

    sp = sub.add_parser("local", help="single-process reference rendering")
    common(sp)
    sp.set_defaults(func=cmd_local)

    sp = sub.add_parser("demo", help="write the demo scene and orbit trace")
    sp.add_argument("--out", default=".")
    sp.add_argument("--frames", type=int, default=60)
    sp.set_defaults(func=cmd_demo)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    log.debug("kernel backend: %s", _accel.backend_name())
    if getattr(args, "max_payload", wire.DEFAULT_MAX_PAYLOAD) < wire.MIN_MAX_PAYLOAD:
        log.error("--max-payload must be >= %d", wire.MIN_MAX_PAYLOAD)
        return EXIT_BAD_INPUT
    try:
        return args.func(args)
    except BadInput as e:
        log.error("%s", e)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
