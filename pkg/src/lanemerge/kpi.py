"""KPI pipeline: log collection, delivery-time computation, ECDF and
percentile reports.

The store is an in-process append-only table with an optional NDJSON spill
file; queries walk immutable snapshots. The trajectory delivery time for a
recommendation is measured from the moment the triggering road-user
description was first sent (vehicle or camera side) to the moment the
recommendation reached the target vehicle, all stamps taken from the one
injected clock.
"""

from __future__ import annotations

import json
import math
import socket
import threading
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence
from uuid import UUID

import numpy as np

from .clock import SystemClock
from .types import LogRecord, MsgType, RoadUserDescription, V2XEnvelope
from .wire import WireError, decode_envelope, encode_envelope

DEFAULT_COLLECTOR_PORT = 5701

EV_RUD_SENT = "rud_sent"
EV_RECO_COMPUTED = "reco_computed"
EV_RECO_DELIVERED = "reco_delivered"


class IncompleteTrace(Exception):
    """Delivery-time endpoints are missing for this recommendation."""


@dataclass
class StoredRecord:
    record: LogRecord
    received_at: int


class KpiStore:
    """Append-only log table with the indexes the KPI queries need."""

    def __init__(self, spill_path: Optional[str] = None):
        self._lock = threading.Lock()
        self._records: list[StoredRecord] = []
        self.dropped = 0
        self._spill = open(spill_path, "a") if spill_path else None
        # indexes
        self._rud_sent: dict[str, list[tuple[int, int]]] = {}
        self._computed: dict[str, LogRecord] = {}
        self._delivered: dict[str, LogRecord] = {}

    def ingest(self, record: LogRecord, received_at: int) -> bool:
        """Validate, enrich with receive time and append; malformed records
        are counted and dropped, never raised."""
        if not isinstance(record, LogRecord) or not record.component \
                or not record.event or record.t <= 0:
            with self._lock:
                self.dropped += 1
            return False
        stored = StoredRecord(record, received_at)
        with self._lock:
            self._records.append(stored)
            if record.event == EV_RUD_SENT:
                uid = str(record.attributes.get("rud_uuid", ""))
                ts = record.attributes.get("rud_timestamp")
                if uid and isinstance(ts, int):
                    self._rud_sent.setdefault(uid, []).append((ts, record.t))
            elif record.event == EV_RECO_COMPUTED:
                self._computed[record.correlation_id] = record
            elif record.event == EV_RECO_DELIVERED:
                self._delivered[record.correlation_id] = record
            if self._spill is not None:
                from .wire import _log_to_obj
                obj = _log_to_obj(record)
                obj["received_at"] = received_at
                self._spill.write(json.dumps(obj, sort_keys=True,
                                             separators=(",", ":")) + "\n")
        return True

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    def records(self) -> list[StoredRecord]:
        with self._lock:
            return list(self._records)

    def close(self) -> None:
        if self._spill is not None:
            self._spill.close()
            self._spill = None

    # -- queries

    def delivery_time(self, recommendation_id: str) -> int:
        """reco_delivered minus the triggering rud_sent, in ms."""
        with self._lock:
            delivered = self._delivered.get(recommendation_id)
            computed = self._computed.get(recommendation_id)
            if delivered is None or computed is None:
                raise IncompleteTrace(recommendation_id)
            origin_uuid = str(computed.attributes.get("origin_uuid", ""))
            origin_ts = computed.attributes.get("origin_rud_timestamp")
            sent_list = self._rud_sent.get(origin_uuid, [])
            if not sent_list or not isinstance(origin_ts, int):
                raise IncompleteTrace(recommendation_id)
            sent_list.sort()
            # latest original transmission at or before the fused timestamp
            i = bisect_right(sent_list, (origin_ts, math.inf)) - 1
            if i < 0:
                raise IncompleteTrace(recommendation_id)
            return delivered.t - sent_list[i][1]

    def delivery_times(self) -> tuple[list[int], int]:
        """All complete delivery-time samples plus the incomplete count."""
        with self._lock:
            ids = list(self._delivered)
        out = []
        incomplete = 0
        for rid in ids:
            try:
                out.append(self.delivery_time(rid))
            except IncompleteTrace:
                incomplete += 1
        return out, incomplete


# ----------------------------------------------------------------- maths

@dataclass(frozen=True)
class EcdfReport:
    values: tuple[float, ...]
    fractions: tuple[float, ...]
    count: int

    def query(self, x: float) -> float:
        """F(x) = fraction of samples <= x."""
        if self.count == 0:
            return 0.0
        return bisect_right(self.values, x) / self.count


def ecdf(samples: Iterable[float]) -> EcdfReport:
    vals = sorted(float(v) for v in samples)
    n = len(vals)
    if n == 0:
        return EcdfReport(values=(), fractions=(), count=0)
    return EcdfReport(values=tuple(vals),
                      fractions=tuple((i + 1) / n for i in range(n)),
                      count=n)


def percentile(samples: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: the value at index ceil(p/100 * n) of the
    sorted samples (clamped to the first element for p = 0)."""
    if not 0.0 <= p <= 100.0:
        raise ValueError("p must be in [0, 100]")
    vals = sorted(samples)
    if not vals:
        raise ValueError("empty sample set")
    rank = max(1, math.ceil(p / 100.0 * len(vals)))
    return vals[rank - 1]


def inter_vehicle_distances(
        trace: Iterable[Sequence[RoadUserDescription]]) -> list[float]:
    """Per frame, bumper-adjusted distances between same-lane vehicles."""
    out = []
    for frame in trace:
        by_lane: dict[int, list[RoadUserDescription]] = {}
        for rud in frame:
            if rud.lane is not None:
                by_lane.setdefault(rud.lane, []).append(rud)
        for group in by_lane.values():
            for i in range(len(group)):
                for j in range(i + 1, len(group)):
                    a, b = group[i], group[j]
                    d = math.hypot(a.x - b.x, a.y - b.y) \
                        - a.length / 2.0 - b.length / 2.0
                    out.append(d)
    return out


# ---------------------------------------------------------------- reports

def write_ecdf_csv(path: str, samples: Sequence[float]) -> EcdfReport:
    report = ecdf(samples)
    with open(path, "w") as fh:
        fh.write("value,fraction\n")
        for v, f in zip(report.values, report.fractions):
            fh.write(f"{v:.6f},{f:.8f}\n")
    return report


def write_delivery_csv(path: str, store: KpiStore) -> tuple[list[int], int]:
    times, incomplete = store.delivery_times()
    with open(path, "w") as fh:
        fh.write("delivery_ms\n")
        for t in sorted(times):
            fh.write(f"{t}\n")
    return times, incomplete


# ------------------------------------------------------------- transport

class LogSender:
    """Best-effort NDJSON log pipe to the collector's direct port."""

    def __init__(self, host: str, port: int, clock=None):
        self.clock = clock or SystemClock()
        self._lock = threading.Lock()
        self._seq = 0
        self.send_failures = 0
        self._sock = socket.create_connection((host, port), timeout=5.0)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def __call__(self, record: LogRecord) -> None:
        env = V2XEnvelope(msg_type=MsgType.LOG_RECORD, topic="logs",
                          seq=self._next(), sent_at=max(1, self.clock.now_ms()),
                          payload=record)
        try:
            with self._lock:
                self._sock.sendall(encode_envelope(env))
        except OSError:
            self.send_failures += 1

    def _next(self) -> int:
        with self._lock:
            self._seq += 1
            return self._seq

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


class KpiCollectorServer:
    """Accepts LogRecord envelopes on a direct TCP port."""

    def __init__(self, store: KpiStore, host: str = "127.0.0.1",
                 port: int = DEFAULT_COLLECTOR_PORT, clock=None):
        self.store = store
        self.clock = clock or SystemClock()
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(0.5)
        self.port = self._listener.getsockname()[1]
        self._closed = threading.Event()
        self._threads: list[threading.Thread] = []
        self._accept = threading.Thread(target=self._accept_loop, daemon=True,
                                        name="kpi-accept")
        self._accept.start()

    def _accept_loop(self) -> None:
        while not self._closed.is_set():
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            t = threading.Thread(target=self._read_loop, args=(sock,),
                                 daemon=True, name="kpi-read")
            t.start()
            self._threads.append(t)

    def _read_loop(self, sock: socket.socket) -> None:
        fh = sock.makefile("rb")
        try:
            for line in fh:
                received = self.clock.now_ms()
                try:
                    env = decode_envelope(line)
                except WireError:
                    self.store.dropped += 1
                    continue
                if env.msg_type is MsgType.LOG_RECORD:
                    self.store.ingest(env.payload, received)
                else:
                    self.store.dropped += 1
        except OSError:
            pass
        finally:
            sock.close()

    def close(self) -> None:
        self._closed.set()
        self._listener.close()
        self._accept.join(timeout=2.0)
        for t in self._threads:
            t.join(timeout=2.0)
