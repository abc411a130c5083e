"""Client and server state machines, stale-bitmap policy and the local oracle.

Rasterization runs on both ends: the server needs world positions for its
shadow rays, the client needs normals and albedo for shading.  Both run the
same deterministic rasterizer, so the two G-buffers are bit-identical.

Time is always passed in (milliseconds).  In simulation it is virtual; only
:class:`UdpLink` reads a wall clock.
"""
from __future__ import annotations

import logging
import random
from collections import OrderedDict
from dataclasses import dataclass, field, fields

from . import raster, raytrace, shade, viscodec, wire
from .scene import Camera, scene_hash
from .transport import sim_network, wall_ms

log = logging.getLogger(__name__)

DEFAULT_DEADLINE_MS = 33.0
HANDSHAKE_RETRIES = 5
HANDSHAKE_TIMEOUT_MS = 200.0
BITMAP_STORE_SIZE = 8


class HandshakeError(RuntimeError):
    pass


@dataclass(frozen=True)
class Session:
    session_id: int
    width: int
    height: int
    n_lights: int
    max_payload: int = wire.DEFAULT_MAX_PAYLOAD

    @property
    def bitmap_size(self):
        return self.n_lights * raytrace.VisibilityBitmap.plane_bytes(self.width, self.height)

    @property
    def max_datagram(self):
        return self.max_payload + wire.CHUNK_OVERHEAD


@dataclass
class FrameMetrics:
    frame_id: int
    raster_us: int | None = None
    trace_us: int | None = None
    compress_us: int | None = None
    bytes_sent: int | None = None
    chunks_sent: int | None = None
    wait_us: int | None = None
    bitmap_frame_used: int | None = None
    staleness: int | None = None
    fallback_used: bool = False
    total_us: int | None = None

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]

    def row(self):
        out = []
        for name in self.columns():
            v = getattr(self, name)
            if v is None:
                out.append("")
            elif isinstance(v, bool):
                out.append(str(int(v)))
            else:
                out.append(str(v))
        return out


class _Stopwatch:
    """Microsecond timer; with no clock every measurement is 0."""

    def __init__(self, clock=None):
        self.clock = clock

    def start(self):
        return self.clock() if self.clock else 0.0

    def us(self, t0):
        return int(round((self.clock() - t0) * 1e6)) if self.clock else 0


def camera_from_wire(msg, near):
    return Camera(tuple(msg.cam_pos), tuple(msg.cam_quat), msg.vfov_deg, near)


def frame_input_message(session_id, fin):
    cam = fin.camera
    return wire.FrameInputMsg(session_id, fin.frame_id, fin.timestamp_us, cam.position, cam.orientation, cam.vfov_deg)


@dataclass
class ServerFrameStats:
    raster_us: int
    trace_us: int
    compress_us: int
    bytes_sent: int
    chunks_sent: int


class ServerState:
    """Server side: answers Hello, traces and streams visibility per input."""

    def __init__(self, scene, clock=None):
        self.scene = scene
        self.scene_hash = scene_hash(scene)
        self.bvh = raytrace.build_bvh(scene)
        self.epsilon = raytrace.default_epsilon(scene)
        self.session = None
        self.last_frame_id = -1
        self.frame_stats = {}
        self.last_gbuffer = None
        self.counters = {"ignored": 0, "late": 0, "aborted": 0, "bad_datagrams": 0}
        self._watch = _Stopwatch(clock)

    def handle_datagram(self, data, now):
        try:
            msg = wire.decode(data)
        except wire.WireError as e:
            self.counters["bad_datagrams"] += 1
            log.debug("dropping datagram: %s", e)
            return []
        return self.handle(msg, now)

    def handle(self, msg, now):
        if isinstance(msg, wire.Hello):
            return self._hello(msg)
        if isinstance(msg, wire.FrameInputMsg):
            return self._frame(msg)
        self.counters["ignored"] += 1
        return []

    def _hello(self, msg):
        status = wire.STATUS_OK
        if msg.scene_hash != self.scene_hash or msg.n_lights != len(self.scene.lights):
            status = wire.STATUS_SCENE_MISMATCH
        elif not (
            1 <= msg.width <= raster.MAX_RESOLUTION
            and 1 <= msg.height <= raster.MAX_RESOLUTION
            and msg.max_payload >= wire.MIN_MAX_PAYLOAD
        ):
            status = wire.STATUS_BAD_PARAMS
        ack = wire.HelloAck(
            msg.session_id, msg.width, msg.height, msg.n_lights, msg.scene_hash, msg.max_payload, status
        )
        if status == wire.STATUS_OK:
            if self.session is None or self.session.session_id != msg.session_id:
                self.last_frame_id = -1
            self.session = Session(msg.session_id, msg.width, msg.height, msg.n_lights, msg.max_payload)
            log.info("session %08x accepted (%dx%d, %d lights)", msg.session_id, msg.width, msg.height, msg.n_lights)
        else:
            self.counters["aborted"] += 1
            log.warning("session %08x aborted: status %d (scene hash %016x)", msg.session_id, status, msg.scene_hash)
        return [wire.encode(ack)]

    def _frame(self, msg):
        s = self.session
        if s is None or msg.session_id != s.session_id:
            self.counters["ignored"] += 1
            return []
        if msg.frame_id <= self.last_frame_id:
            self.counters["late"] += 1
            return []
        self.last_frame_id = msg.frame_id
        camera = camera_from_wire(msg, self.scene.default_camera.near)

        t0 = self._watch.start()
        gb = raster.rasterize(self.scene, camera, s.width, s.height)
        raster_us = self._watch.us(t0)
        t0 = self._watch.start()
        vis = raytrace.trace_visibility(self.bvh, gb, self.scene.lights, self.epsilon, msg.frame_id)
        trace_us = self._watch.us(t0)
        t0 = self._watch.start()
        raw = viscodec.pack_bitmap(vis)
        packed = viscodec.compress(raw)
        chunks = wire.split_visibility(msg.frame_id, packed, len(raw), s.max_payload, s.session_id)
        out = [wire.encode(c, s.max_datagram) for c in chunks]
        compress_us = self._watch.us(t0)

        self.last_gbuffer = gb
        self.frame_stats[msg.frame_id] = ServerFrameStats(
            raster_us, trace_us, compress_us, sum(len(d) for d in out), len(out)
        )
        return out


def server_handle(state, msg, now):
    return state.handle(msg, now)


@dataclass(frozen=True)
class Selection:
    bitmap: object  # VisibilityBitmap, or None for the all-visible fallback
    frame_used: int | None
    staleness: int | None
    fallback_used: bool


def select_bitmap(store, frame_id):
    """Exact frame if present, else the newest older one, else fallback."""
    if frame_id in store:
        return Selection(store[frame_id], frame_id, 0, False)
    older = [f for f in store if f < frame_id]
    if older:
        f = max(older)
        return Selection(store[f], f, frame_id - f, False)
    return Selection(None, None, None, True)


class SimLink:
    """Client-side view of a lockstep simulation.

    Waiting advances virtual time event by event; datagrams reaching the
    server are handled immediately (server compute takes no virtual time).
    """

    virtual = True

    def __init__(self, net, client_ep, server_ep, server):
        self.net = net
        self.client_ep = client_ep
        self.server_ep = server_ep
        self.server = server

    def send(self, data, now):
        self.client_ep.send(data, now)

    def wait(self, now, deadline):
        """Next batch of client-bound datagrams arriving in [now, deadline]."""
        t = max(now, self.net.clock)
        while True:
            ev = self.net.next_event()
            if ev is None or ev > deadline:
                if deadline > self.net.clock:
                    self.net.advance(deadline)
                return [], max(deadline, t)
            t = max(ev, t)
            for d in self.server_ep.poll_receive(t):
                for reply in self.server.handle_datagram(d, t):
                    self.server_ep.send(reply, t)
            got = self.client_ep.poll_receive(t)
            if got:
                return got, t


class UdpLink:
    """Client-side view of a real UDP socket; times are wall-clock ms."""

    virtual = False

    def __init__(self, endpoint):
        self.endpoint = endpoint

    def send(self, data, now):
        self.endpoint.send(data)

    def wait(self, now, deadline):
        got = self.endpoint.poll_receive(deadline=deadline)
        return got, wall_ms()


class ClientState:
    """Client side: local rasterization, visibility reception, shading."""

    def __init__(self, scene, width, height, deadline_ms=DEFAULT_DEADLINE_MS,
                 max_payload=wire.DEFAULT_MAX_PAYLOAD, session_id=None, clock=None):
        self.scene = scene
        self.scene_hash = scene_hash(scene)
        if session_id is None:
            session_id = random.SystemRandom().getrandbits(32)
        self.session = Session(session_id, width, height, len(scene.lights), max_payload)
        self.deadline_ms = float(deadline_ms)
        self.reassembler = wire.Reassembler()
        self.store = OrderedDict()
        self.received = {}
        self.counters = {"bad_datagrams": 0, "foreign": 0, "bad_payload": 0}
        self.connected = False
        self._watch = _Stopwatch(clock)

    def hello(self):
        s = self.session
        return wire.Hello(s.session_id, s.width, s.height, s.n_lights, self.scene_hash, s.max_payload)

    def handshake(self, link, now, retries=HANDSHAKE_RETRIES, timeout_ms=HANDSHAKE_TIMEOUT_MS):
        """Send Hello until a matching HelloAck arrives; returns the new time."""
        hello = self.hello()
        t = now
        for _ in range(retries):
            link.send(wire.encode(hello), t)
            deadline = t + timeout_ms
            while t < deadline:
                got, t = link.wait(t, deadline)
                for data in got:
                    try:
                        msg = wire.decode(data)
                    except wire.WireError:
                        continue
                    if not isinstance(msg, wire.HelloAck) or msg.session_id != hello.session_id:
                        continue
                    if msg.status != wire.STATUS_OK:
                        raise HandshakeError(f"server aborted session (status {msg.status})")
                    echoed = (msg.width, msg.height, msg.n_lights, msg.scene_hash, msg.max_payload)
                    if echoed != (hello.width, hello.height, hello.n_lights, hello.scene_hash, hello.max_payload):
                        raise HandshakeError("HelloAck does not echo the Hello parameters")
                    self.connected = True
                    return t
        raise HandshakeError(f"no HelloAck after {retries} attempts")

    def ingest(self, datagrams):
        for data in datagrams:
            try:
                msg = wire.decode(data)
            except wire.WireError:
                self.counters["bad_datagrams"] += 1
                continue
            if not isinstance(msg, wire.VisibilityChunk) or msg.session_id != self.session.session_id:
                self.counters["foreign"] += 1
                continue
            done = self.reassembler.feed(msg)
            if done is None:
                continue
            f, payload = done
            try:
                if self.reassembler.last_uncompressed_size != self.session.bitmap_size:
                    raise viscodec.CodecError("unexpected bitmap size")
                raw = viscodec.decompress(payload, self.session.bitmap_size)
                s = self.session
                vis = viscodec.unpack_bitmap(raw, s.width, s.height, s.n_lights, f)
            except viscodec.CodecError:
                self.counters["bad_payload"] += 1
                continue
            self.store[f] = vis
            self.received[f] = (len(payload) + msg.chunk_count * wire.CHUNK_OVERHEAD, msg.chunk_count)
            while len(self.store) > BITMAP_STORE_SIZE:
                old = min(self.store)
                del self.store[old]
                self.received.pop(old, None)

    def frame(self, fin, link, now, server_stats=None):
        """Render one frame; returns ``(image, metrics, end_time)``."""
        s = self.session
        f = fin.frame_id
        w0 = self._watch.start()
        # whatever arrived since the previous frame
        t = now
        while True:
            got, _ = link.wait(t, t)
            if not got:
                break
            self.ingest(got)

        msg = frame_input_message(s.session_id, fin)
        link.send(wire.encode(msg), now)
        t0 = self._watch.start()
        gb = raster.rasterize(self.scene, camera_from_wire(msg, self.scene.default_camera.near), s.width, s.height)
        raster_us = self._watch.us(t0)

        deadline = now + self.deadline_ms
        t = now if link.virtual else wall_ms()
        wait_start = t
        while f not in self.store and t < deadline:
            got, t = link.wait(t, deadline)
            self.ingest(got)
        waited = max(0.0, t - wait_start)

        sel = select_bitmap(self.store, f)
        vis = sel.bitmap
        if vis is None:
            vis = raytrace.VisibilityBitmap.all_visible(gb.valid, s.n_lights, f)
        image = shade.shade(gb, vis, self.scene.lights, self.scene.background)

        m = FrameMetrics(f, raster_us=raster_us, wait_us=int(round(waited * 1000)))
        m.bitmap_frame_used = sel.frame_used
        m.staleness = sel.staleness
        m.fallback_used = sel.fallback_used
        st = (server_stats or {}).get(f)
        if st is not None:
            m.trace_us, m.compress_us = st.trace_us, st.compress_us
            m.bytes_sent, m.chunks_sent = st.bytes_sent, st.chunks_sent
        elif f in self.received:
            m.bytes_sent, m.chunks_sent = self.received[f]
        wall = self._watch.us(w0)
        m.total_us = wall + m.wait_us if link.virtual else wall
        return image, m, t


def client_frame(state, fin, link, now):
    image, metrics, _ = state.frame(fin, link, now)
    return image, metrics


def warmup():
    """Compile/load the numba kernels so the first real frame is not stalled."""
    from .demo import sphere_over_plane

    scene = sphere_over_plane(0)
    local_render(scene, scene.default_camera, 8, 6)
    viscodec.decompress(viscodec.compress(bytes(64)), 64)


def local_render(scene, camera, width, height, bvh=None):
    """Single-process composition: rasterize, trace, shade."""
    gb = raster.rasterize(scene, camera, width, height)
    if bvh is None:
        bvh = raytrace.build_bvh(scene)
    vis = raytrace.trace_visibility(bvh, gb, scene.lights, raytrace.default_epsilon(scene))
    return shade.shade(gb, vis, scene.lights, scene.background)


def run_local(scene, frames, width, height, clock=None):
    """Yield ``(frame_input, image, metrics)`` for the local oracle pipeline."""
    bvh = raytrace.build_bvh(scene)
    watch = _Stopwatch(clock)
    for fin in frames:
        t0 = watch.start()
        tr = watch.start()
        gb = raster.rasterize(scene, fin.camera, width, height)
        raster_us = watch.us(tr)
        vis = raytrace.trace_visibility(bvh, gb, scene.lights, raytrace.default_epsilon(scene), fin.frame_id)
        image = shade.shade(gb, vis, scene.lights, scene.background)
        m = FrameMetrics(fin.frame_id, raster_us=raster_us, bitmap_frame_used=fin.frame_id, staleness=0)
        m.total_us = watch.us(t0)
        yield fin, image, m


@dataclass
class SimRun:
    """Lockstep client+server simulation over one trace."""

    scene: object
    width: int
    height: int
    conditions: object
    reverse: object = None
    deadline_ms: float = DEFAULT_DEADLINE_MS
    max_payload: int = wire.DEFAULT_MAX_PAYLOAD
    clock: object = None
    server: ServerState = field(init=False)
    client: ClientState = field(init=False)

    def __post_init__(self):
        a, b, self.net = sim_network(self.conditions, self.reverse)
        self.server = ServerState(self.scene, self.clock)
        session_id = random.Random(self.conditions.seed).getrandbits(32)
        self.client = ClientState(
            self.scene, self.width, self.height, self.deadline_ms, self.max_payload, session_id, self.clock
        )
        self.link = SimLink(self.net, a, b, self.server)
        self.now = 0.0

    def connect(self):
        # session setup is not part of the experiment: run it loss-free
        saved = [link.conditions for link in self.net.links]
        for d, c in enumerate(saved):
            self.net.set_conditions(d, type(c)(c.latency_ms, c.jitter_ms, 0.0, c.mtu, c.seed))
        try:
            self.now = self.client.handshake(self.link, self.now)
        finally:
            for d, c in enumerate(saved):
                self.net.set_conditions(d, c)

    def frames(self, trace, before_frame=None):
        """Yield ``(frame_input, image, metrics)``; ``before_frame(run, fin)`` may alter conditions."""
        if not self.client.connected:
            self.connect()
        for fin in trace:
            if before_frame is not None:
                before_frame(self, fin)
            start = max(self.now, fin.timestamp_us / 1000.0)
            image, metrics, self.now = self.client.frame(fin, self.link, start, self.server.frame_stats)
            yield fin, image, metrics
