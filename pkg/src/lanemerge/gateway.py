"""Topic-based publish/subscribe broker over TCP NDJSON.

Routing is exact-match on topic names. Every socket runs with TCP_NODELAY
and lines are flushed per message: the transport must never coalesce small
messages, otherwise delayed acknowledgements can stack hundreds of
milliseconds onto the delivery path.

An optional link profile emulates the radio access network (bandwidth cap,
one-way latency, jitter, loss) for vehicle and camera connections; backend
services talk over plain loopback.
"""

from __future__ import annotations

import json
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .clock import SystemClock
from .types import (LogRecord, MsgType, RoadUserDescription, Role,
                    SubscribeRequest, V2XEnvelope)
from .wire import WireError, decode_envelope, encode_envelope

DEFAULT_PORT = 5700
HIGH_WATER_MARK = 1024
ACK_TOPIC = "_ack"

# roles whose connections go through the emulated radio link
RADIO_ROLES = (Role.VEHICLE, Role.CAMERA)


# ------------------------------------------------------------ link model

@dataclass(frozen=True)
class LinkProfile:
    """Per-direction emulated link; bandwidth 0 means uncapped."""

    bandwidth_bps: float = 0.0
    latency_ms: float = 0.0
    jitter_ms: float = 0.0
    loss: float = 0.0
    seed: int = 0

    @classmethod
    def from_file(cls, path: str) -> "LinkProfile":
        with open(path) as fh:
            obj = json.load(fh)
        return cls(bandwidth_bps=float(obj.get("bandwidth_bps", 0.0)),
                   latency_ms=float(obj.get("latency_ms", 0.0)),
                   jitter_ms=float(obj.get("jitter_ms", 0.0)),
                   loss=float(obj.get("loss", 0.0)),
                   seed=int(obj.get("seed", 0)))

    @property
    def is_noop(self) -> bool:
        return (self.bandwidth_bps == 0.0 and self.latency_ms == 0.0
                and self.jitter_ms == 0.0 and self.loss == 0.0)


class LinkLane:
    """One direction of one emulated connection; deterministic per seed."""

    def __init__(self, profile: LinkProfile, stream_key: str):
        self.profile = profile
        seq = np.random.SeedSequence([profile.seed,
                                      *(ord(c) for c in stream_key)])
        self.rng = np.random.default_rng(seq)
        self.busy_until = 0.0
        self.dropped = 0
        self.carried = 0

    def plan(self, now_ms: float, size_bytes: int) -> Optional[float]:
        """Arrival time for a message entering the lane now, or None if the
        link loses it."""
        p = self.profile
        if p.loss > 0.0 and self.rng.random() < p.loss:
            self.dropped += 1
            return None
        start = max(now_ms, self.busy_until)
        tx_ms = (size_bytes * 8.0 / p.bandwidth_bps) * 1000.0 \
            if p.bandwidth_bps > 0.0 else 0.0
        self.busy_until = start + tx_ms
        jitter = p.jitter_ms * self.rng.random() if p.jitter_ms > 0.0 else 0.0
        self.carried += 1
        return self.busy_until + p.latency_ms + jitter


# ---------------------------------------------------------------- routing

@dataclass
class Subscription:
    topic: str
    bound: Optional[tuple[float, float, float, float]] = None

    def admits(self, env: V2XEnvelope) -> bool:
        if self.bound is None or env.msg_type is not MsgType.RUD_UPDATE:
            return True
        rud: RoadUserDescription = env.payload
        x0, y0, x1, y1 = self.bound
        return x0 <= rud.x <= x1 and y0 <= rud.y <= y1


@dataclass
class SessionStats:
    published: int = 0
    enqueued: int = 0
    queue_dropped: int = 0
    link_dropped: int = 0
    seq_violations: int = 0


class Session:
    """Broker-side state for one client connection."""

    def __init__(self, session_id: int, role: Role):
        self.id = session_id
        self.role = role
        self.subscriptions: dict[str, Subscription] = {}
        self.last_seq: dict[str, int] = {}
        self.stats = SessionStats()


class Router:
    """Transport-agnostic subscription table and matcher."""

    def __init__(self):
        self._lock = threading.Lock()
        self._sessions: dict[int, Session] = {}
        self._by_topic: dict[str, set[int]] = {}
        self._next_id = 0

    def open_session(self, role: Role) -> Session:
        with self._lock:
            session = Session(self._next_id, role)
            self._next_id += 1
            self._sessions[session.id] = session
            return session

    def close_session(self, session: Session) -> None:
        with self._lock:
            for topic in session.subscriptions:
                ids = self._by_topic.get(topic)
                if ids:
                    ids.discard(session.id)
            self._sessions.pop(session.id, None)

    def subscribe(self, session: Session, topic: str,
                  bound=None) -> None:
        if not topic:
            raise ValueError("topic must be non-empty")
        with self._lock:
            session.subscriptions[topic] = Subscription(topic, bound)
            self._by_topic.setdefault(topic, set()).add(session.id)

    def unsubscribe(self, session: Session, topic: str) -> None:
        with self._lock:
            session.subscriptions.pop(topic, None)
            ids = self._by_topic.get(topic)
            if ids:
                ids.discard(session.id)

    def match(self, sender: Session, env: V2XEnvelope) -> list[Session]:
        """Subscribers for an envelope, excluding the sender; also checks
        the per-(sender, topic) seq monotonicity."""
        with self._lock:
            sender.stats.published += 1
            last = sender.last_seq.get(env.topic)
            if last is not None and env.seq <= last:
                sender.stats.seq_violations += 1
            sender.last_seq[env.topic] = env.seq
            out = []
            for sid in self._by_topic.get(env.topic, ()):
                if sid == sender.id:
                    continue
                target = self._sessions.get(sid)
                if target is None:
                    continue
                sub = target.subscriptions.get(env.topic)
                if sub is not None and sub.admits(env):
                    out.append(target)
            return out

    def sessions(self) -> list[Session]:
        with self._lock:
            return list(self._sessions.values())


class OutboundQueue:
    """Per-subscriber buffer with freshest-wins backpressure: past the high
    water mark the oldest buffered RudUpdate is discarded; recommendations
    and feedback are never dropped."""

    def __init__(self, stats: SessionStats, high_water: int = HIGH_WATER_MARK):
        self._items: deque[tuple[bytes, MsgType]] = deque()
        self._lock = threading.Lock()
        self._ready = threading.Condition(self._lock)
        self._stats = stats
        self._high_water = high_water
        self._closed = False

    def put(self, line: bytes, msg_type: MsgType) -> None:
        with self._ready:
            if self._closed:
                return
            if len(self._items) >= self._high_water:
                for i, (_, mt) in enumerate(self._items):
                    if mt is MsgType.RUD_UPDATE:
                        del self._items[i]
                        self._stats.queue_dropped += 1
                        break
            self._items.append((line, msg_type))
            self._stats.enqueued += 1
            self._ready.notify()

    def get(self) -> Optional[bytes]:
        with self._ready:
            while not self._items and not self._closed:
                self._ready.wait(0.5)
            if self._items:
                return self._items.popleft()[0]
            return None

    def close(self) -> None:
        with self._ready:
            self._closed = True
            self._ready.notify_all()


class _DelayLine(threading.Thread):
    """Executes callbacks at requested wall-clock times (link emulation)."""

    def __init__(self):
        super().__init__(daemon=True, name="gateway-delay")
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._heap: list[tuple[float, int, Callable[[], None]]] = []
        self._seq = 0
        self._stopped = False

    def call_at(self, at_ms: float, fn: Callable[[], None]) -> None:
        import heapq
        with self._cond:
            heapq.heappush(self._heap, (at_ms, self._seq, fn))
            self._seq += 1
            self._cond.notify()

    def run(self) -> None:
        import heapq
        while True:
            with self._cond:
                if self._stopped:
                    return
                now = time.time_ns() / 1e6
                if not self._heap:
                    self._cond.wait(0.2)
                    continue
                due, _, fn = self._heap[0]
                if due > now:
                    self._cond.wait(min(0.2, (due - now) / 1000.0))
                    continue
                heapq.heappop(self._heap)
            try:
                fn()
            except Exception:
                pass

    def stop(self) -> None:
        with self._cond:
            self._stopped = True
            self._cond.notify_all()


# ------------------------------------------------------------- TCP server

class _Connection:
    def __init__(self, server: "GatewayServer", sock: socket.socket):
        self.server = server
        self.sock = sock
        self.session: Optional[Session] = None
        self.queue: Optional[OutboundQueue] = None
        self.up_lane: Optional[LinkLane] = None
        self.down_lane: Optional[LinkLane] = None
        self.alive = True


class GatewayServer:
    """Threaded NDJSON pub/sub broker.

    One reader and one writer thread per connection; the routing table is
    shared behind a lock, so concurrent connects, disconnects and publishes
    interleave safely while per-connection order is preserved.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_PORT,
                 link_profile: Optional[LinkProfile] = None,
                 log_sender: Optional[Callable[[LogRecord], None]] = None,
                 clock=None):
        self.router = Router()
        self.clock = clock or SystemClock()
        self.link_profile = link_profile
        self.log_sender = log_sender
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(0.5)
        self.port = self._listener.getsockname()[1]
        self.host = host
        self._conns: dict[int, _Connection] = {}
        self._lock = threading.Lock()
        self._closed = threading.Event()
        self._delay = _DelayLine()
        self._delay.start()
        self._threads: list[threading.Thread] = []
        self.decode_errors = 0
        self.forward_latency_ms: deque[float] = deque(maxlen=100_000)
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               daemon=True,
                                               name="gateway-accept")
        self._accept_thread.start()

    # -- lifecycle

    def close(self) -> None:
        if self._closed.is_set():
            return
        self._closed.set()
        self._listener.close()
        with self._lock:
            conns = list(self._conns.values())
        for conn in conns:
            self._drop_connection(conn)
        self._delay.stop()
        self._accept_thread.join(timeout=2.0)
        for t in self._threads:
            t.join(timeout=2.0)
        self._delay.join(timeout=2.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- accept / io threads

    def _accept_loop(self) -> None:
        while not self._closed.is_set():
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = _Connection(self, sock)
            reader = threading.Thread(target=self._read_loop, args=(conn,),
                                      daemon=True, name="gateway-read")
            reader.start()
            self._threads.append(reader)

    def _read_loop(self, conn: _Connection) -> None:
        fh = conn.sock.makefile("rb")
        try:
            for line in fh:
                t_rx = self.clock.now_ms()
                try:
                    env = decode_envelope(line)
                except WireError:
                    self.decode_errors += 1
                    continue
                if conn.session is None:
                    if env.msg_type is not MsgType.SUBSCRIBE or \
                            env.payload.role is None:
                        return  # handshake violation: drop the connection
                    self._open(conn, env.payload.role)
                if env.msg_type is MsgType.SUBSCRIBE:
                    self._control(conn, env)
                else:
                    self._ingress(conn, env, line, t_rx)
        except (OSError, ValueError):
            pass
        finally:
            self._drop_connection(conn)

    def _write_loop(self, conn: _Connection) -> None:
        while True:
            line = conn.queue.get()
            if line is None:
                return
            try:
                conn.sock.sendall(line)
            except OSError:
                self._drop_connection(conn)
                return

    # -- session wiring

    def _open(self, conn: _Connection, role: Role) -> None:
        conn.session = self.router.open_session(role)
        conn.queue = OutboundQueue(conn.session.stats)
        if self.link_profile is not None and not self.link_profile.is_noop \
                and role in RADIO_ROLES:
            key = f"conn{conn.session.id}"
            conn.up_lane = LinkLane(self.link_profile, key + ":up")
            conn.down_lane = LinkLane(self.link_profile, key + ":down")
        with self._lock:
            self._conns[conn.session.id] = conn
        writer = threading.Thread(target=self._write_loop, args=(conn,),
                                  daemon=True, name="gateway-write")
        writer.start()
        self._threads.append(writer)

    def _drop_connection(self, conn: _Connection) -> None:
        if not conn.alive:
            return
        conn.alive = False
        if conn.session is not None:
            self.router.close_session(conn.session)
            with self._lock:
                self._conns.pop(conn.session.id, None)
        if conn.queue is not None:
            conn.queue.close()
        try:
            conn.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        conn.sock.close()

    # -- message paths

    def _control(self, conn: _Connection, env: V2XEnvelope) -> None:
        req: SubscribeRequest = env.payload
        if req.topic:
            if req.action == "unsubscribe":
                self.router.unsubscribe(conn.session, req.topic)
            else:
                self.router.subscribe(conn.session, req.topic, req.bound)
        ack = V2XEnvelope(
            msg_type=MsgType.SUBSCRIBE, topic=ACK_TOPIC, seq=0,
            sent_at=max(1, self.clock.now_ms()),
            payload=SubscribeRequest(role=None, topic=req.topic, bound=None,
                                     action="ack"))
        conn.queue.put(encode_envelope(ack), MsgType.SUBSCRIBE)

    def _ingress(self, conn: _Connection, env: V2XEnvelope, line: bytes,
                 t_rx: float) -> None:
        if conn.up_lane is not None:
            arrival = conn.up_lane.plan(t_rx, len(line))
            if arrival is None:
                conn.session.stats.link_dropped += 1
                return
            if arrival > t_rx:
                self._delay.call_at(
                    arrival, lambda: self._route(conn, env, line, arrival))
                return
        self._route(conn, env, line, t_rx)

    def _route(self, conn: _Connection, env: V2XEnvelope, line: bytes,
               t_in: float) -> int:
        targets = self.router.match(conn.session, env)
        now = self.clock.now_ms()
        delivered = 0
        for target_session in targets:
            with self._lock:
                target = self._conns.get(target_session.id)
            if target is None or not target.alive:
                continue
            if target.down_lane is not None:
                arrival = target.down_lane.plan(now, len(line))
                if arrival is None:
                    target_session.stats.link_dropped += 1
                    continue
                if arrival > now:
                    self._delay.call_at(
                        arrival,
                        lambda t=target: t.queue.put(line, env.msg_type))
                    delivered += 1
                    continue
            target.queue.put(line, env.msg_type)
            delivered += 1
        self.forward_latency_ms.append(self.clock.now_ms() - t_in)
        return delivered

    # -- introspection

    def session_stats(self) -> dict[int, SessionStats]:
        return {s.id: s.stats for s in self.router.sessions()}

    def flush_forward_latency_log(self, component: str = "gateway") -> None:
        if self.log_sender is None or not self.forward_latency_ms:
            return
        samples = sorted(self.forward_latency_ms)
        n = len(samples)
        rec = LogRecord(
            component=component, event="forward_latency",
            correlation_id=f"gateway:{self.port}",
            t=max(1, self.clock.now_ms()),
            attributes={"count": n,
                        "p50_ms": samples[n // 2],
                        "p99_ms": samples[min(n - 1, int(0.99 * n))]})
        self.log_sender(rec)


# ------------------------------------------------------------- TCP client

class PublisherState:
    """Per-topic strictly increasing sequence numbers."""

    def __init__(self):
        self._seq: dict[str, int] = {}
        self._lock = threading.Lock()

    def next(self, topic: str) -> int:
        with self._lock:
            seq = self._seq.get(topic, -1) + 1
            self._seq[topic] = seq
            return seq


class GatewayClient:
    """Blocking NDJSON client: role handshake on connect, auto-sequenced
    publishes, ack-confirmed subscriptions."""

    def __init__(self, host: str, port: int, role: Role,
                 on_message: Optional[Callable[[V2XEnvelope], None]] = None,
                 clock=None, connect_timeout: float = 5.0):
        self.role = role
        self.clock = clock or SystemClock()
        self.on_message = on_message
        self._pub = PublisherState()
        self._sock = socket.create_connection((host, port),
                                              timeout=connect_timeout)
        self._sock.settimeout(None)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._wlock = threading.Lock()
        self._acks = deque()
        self._ack_ready = threading.Condition()
        self.inbox: deque[V2XEnvelope] = deque()
        self._inbox_ready = threading.Condition()
        self._closed = False
        self._send_control(SubscribeRequest(role=role, topic=None,
                                            action="subscribe"))
        self._reader = threading.Thread(target=self._read_loop, daemon=True,
                                        name=f"client-{role.value}-read")
        self._reader.start()
        self._wait_ack()

    def _send_control(self, req: SubscribeRequest) -> None:
        env = V2XEnvelope(msg_type=MsgType.SUBSCRIBE,
                          topic=req.topic or "_control",
                          seq=self._pub.next("_control"),
                          sent_at=max(1, self.clock.now_ms()), payload=req)
        self._send(encode_envelope(env))

    def _send(self, line: bytes) -> None:
        with self._wlock:
            self._sock.sendall(line)

    def _read_loop(self) -> None:
        fh = self._sock.makefile("rb")
        try:
            for line in fh:
                try:
                    env = decode_envelope(line)
                except WireError:
                    continue
                if env.msg_type is MsgType.SUBSCRIBE and env.topic == ACK_TOPIC:
                    with self._ack_ready:
                        self._acks.append(env)
                        self._ack_ready.notify_all()
                    continue
                if self.on_message is not None:
                    try:
                        self.on_message(env)
                    except Exception:
                        pass
                else:
                    with self._inbox_ready:
                        self.inbox.append(env)
                        self._inbox_ready.notify_all()
        except (OSError, ValueError):
            pass

    def _wait_ack(self, timeout: float = 5.0) -> None:
        with self._ack_ready:
            deadline = time.monotonic() + timeout
            while not self._acks:
                left = deadline - time.monotonic()
                if left <= 0:
                    raise TimeoutError("no ack from gateway")
                self._ack_ready.wait(left)
            self._acks.popleft()

    def subscribe(self, topic: str, bound=None) -> None:
        self._send_control(SubscribeRequest(role=None, topic=topic,
                                            bound=bound, action="subscribe"))
        self._wait_ack()

    def unsubscribe(self, topic: str) -> None:
        self._send_control(SubscribeRequest(role=None, topic=topic,
                                            action="unsubscribe"))
        self._wait_ack()

    def publish(self, topic: str, msg_type: MsgType, payload) -> None:
        env = V2XEnvelope(msg_type=msg_type, topic=topic,
                          seq=self._pub.next(topic),
                          sent_at=max(1, self.clock.now_ms()),
                          payload=payload)
        self._send(encode_envelope(env))

    def publish_envelope(self, env: V2XEnvelope) -> None:
        self._send(encode_envelope(env))

    def recv(self, timeout: float = 5.0) -> Optional[V2XEnvelope]:
        with self._inbox_ready:
            deadline = time.monotonic() + timeout
            while not self.inbox:
                left = deadline - time.monotonic()
                if left <= 0:
                    return None
                self._inbox_ready.wait(left)
            return self.inbox.popleft()

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
        self._reader.join(timeout=2.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
