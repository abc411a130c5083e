"""Datagram transports: a seeded virtual-time network simulator and UDP.

Both deliver whole datagrams or nothing.  Times are milliseconds; the
simulator never reads a wall clock, callers pass ``now`` explicitly.

Simulator randomness comes from :class:`random.Random` (Mersenne Twister),
whose ``random()`` stream is stable across platforms and Python versions.
Each direction owns its generator, seeded with ``2 * seed + direction``.
Every datagram that passes the MTU check consumes exactly two draws: one for
loss, one for jitter.
"""
from __future__ import annotations

import heapq
import random
import select
import socket
import time
from dataclasses import dataclass, replace


@dataclass(frozen=True)
class NetConditions:
    latency_ms: float = 0.0
    jitter_ms: float = 0.0
    loss_prob: float = 0.0
    mtu: int = 1500
    seed: int = 42

    def __post_init__(self):
        if self.latency_ms < 0 or self.jitter_ms < 0:
            raise ValueError("latency and jitter must be >= 0")
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ValueError("loss_prob must lie in [0, 1]")
        if not 0 < self.mtu <= 65535:
            raise ValueError("mtu must be in 1..65535")

    @classmethod
    def parse(cls, text):
        """Parse ``latency=10,jitter=2,loss=0.1,mtu=1400,seed=7``."""
        keys = {"latency": "latency_ms", "jitter": "jitter_ms", "loss": "loss_prob", "mtu": "mtu", "seed": "seed"}
        kw = {}
        for item in filter(None, (s.strip() for s in text.split(","))):
            name, _, value = item.partition("=")
            if name not in keys or not value:
                raise ValueError(f"bad network condition {item!r}")
            field = keys[name]
            kw[field] = int(value) if field in ("mtu", "seed") else float(value)
        return cls(**kw)


@dataclass
class LinkStats:
    sent: int = 0
    delivered: int = 0
    dropped_loss: int = 0
    dropped_oversize: int = 0


class _Link:
    """One direction of the simulated network."""

    def __init__(self, conditions, direction):
        self.conditions = conditions
        self.rng = random.Random(2 * conditions.seed + direction)
        self.stats = LinkStats()
        self.queue = []  # (deliver_at, send_seq, datagram)
        self.seq = 0
        self.log = []  # (send_seq, sent_at, deliver_at or None)

    def send(self, data, now):
        c = self.conditions
        seq = self.seq
        self.seq += 1
        self.stats.sent += 1
        if len(data) > c.mtu:
            self.stats.dropped_oversize += 1
            self.log.append((seq, now, None))
            return
        lost = self.rng.random() < c.loss_prob
        jitter = self.rng.random() * c.jitter_ms
        if lost:
            self.stats.dropped_loss += 1
            self.log.append((seq, now, None))
            return
        at = now + c.latency_ms + jitter
        self.log.append((seq, now, at))
        heapq.heappush(self.queue, (at, seq, bytes(data)))

    def next_time(self):
        return self.queue[0][0] if self.queue else None

    def pop_until(self, now):
        out = []
        while self.queue and self.queue[0][0] <= now:
            out.append(heapq.heappop(self.queue)[2])
        self.stats.delivered += len(out)
        return out


class SimEndpoint:
    def __init__(self, net, tx, rx):
        self.net = net
        self._tx = tx
        self._rx = rx

    def send(self, data, now):
        self.net.advance(now)
        self._tx.send(data, now)

    def poll_receive(self, now):
        """All datagrams delivered to this endpoint at or before ``now``."""
        self.net.advance(now)
        return self._rx.pop_until(now)

    def next_arrival(self):
        return self._rx.next_time()

    @property
    def stats(self):
        return self._rx.stats


class SimNetwork:
    """Two endpoints joined by a pair of independently seeded links."""

    def __init__(self, a_to_b, b_to_a=None):
        if b_to_a is None:
            b_to_a = a_to_b
        self.links = (_Link(a_to_b, 0), _Link(b_to_a, 1))
        self.clock = 0.0
        self.a = SimEndpoint(self, self.links[0], self.links[1])
        self.b = SimEndpoint(self, self.links[1], self.links[0])

    def advance(self, now):
        if now < self.clock:
            raise ValueError(f"virtual time moved backwards ({now} < {self.clock})")
        self.clock = now

    def set_conditions(self, direction, conditions):
        """Change loss/latency of one direction (0 = a->b, 1 = b->a) mid-run.

        The direction keeps its random stream.
        """
        link = self.links[direction]
        link.conditions = replace(conditions, seed=link.conditions.seed)

    def next_event(self):
        times = [t for t in (link.next_time() for link in self.links) if t is not None]
        return min(times) if times else None


def sim_network(conditions, reverse=None):
    """Return ``(endpoint_a, endpoint_b, network)``; the network holds the clock."""
    net = SimNetwork(conditions, reverse)
    return net.a, net.b, net


def _parse_addr(addr):
    if isinstance(addr, tuple):
        return addr
    host, _, port = addr.rpartition(":")
    return host.strip("[]") or "0.0.0.0", int(port)


class UdpEndpoint:
    """Non-blocking UDP socket behind the same send/poll contract.

    ``now`` arguments are accepted for interface parity; deadlines are
    wall-clock milliseconds from :func:`wall_ms`.  With no fixed peer, replies
    go to whoever sent the most recent datagram.
    """

    def __init__(self, bind_addr, peer_addr=None, max_datagram=65535):
        bind = _parse_addr(bind_addr)
        family = socket.AF_INET6 if ":" in bind[0] else socket.AF_INET
        self.sock = socket.socket(family, socket.SOCK_DGRAM)
        try:
            self.sock.bind(bind)
        except OSError:
            self.sock.close()
            raise
        self.sock.setblocking(False)
        self.peer = _parse_addr(peer_addr) if peer_addr else None
        self.max_datagram = max_datagram
        self.send_failures = 0

    @property
    def address(self):
        return self.sock.getsockname()

    def send(self, data, now=None):
        if self.peer is None:
            self.send_failures += 1
            return
        try:
            self.sock.sendto(data, self.peer)
        except OSError:
            # counted as a drop, the protocol already tolerates loss
            self.send_failures += 1

    def _drain(self):
        out = []
        while True:
            try:
                data, addr = self.sock.recvfrom(self.max_datagram)
            except (BlockingIOError, InterruptedError):
                return out
            except OSError:
                return out
            self.last_sender = addr
            out.append(data)

    def poll_receive(self, now=None, deadline=None):
        """Datagrams available now, waiting until ``deadline`` (wall ms) for the first."""
        out = self._drain()
        if out or deadline is None:
            return out
        timeout = max(0.0, (deadline - wall_ms()) / 1000.0)
        ready, _, _ = select.select([self.sock], [], [], timeout)
        return self._drain() if ready else []

    def reply_to_sender(self):
        """Point future sends at the last datagram's source."""
        self.peer = getattr(self, "last_sender", self.peer)

    def close(self):
        self.sock.close()


def udp_endpoint(bind_addr, peer_addr=None):
    return UdpEndpoint(bind_addr, peer_addr)


def wall_ms():
    return time.monotonic() * 1000.0
