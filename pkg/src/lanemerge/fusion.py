"""Deduplication of camera and vehicle road-user streams.

Incoming descriptions are buffered into fixed windows, extrapolated to the
window close time with the shared constant-acceleration model, then camera
detections are associated to connected vehicles by Euclidean distance and
heading agreement. Matches accumulate confidence in a history map; once a
pair crosses the match threshold the window emits one fused description
instead of two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional
from uuid import UUID

from .kinematics import advance
from .types import (LogRecord, MsgType, RoadUserDescription, Source,
                    V2XEnvelope, TWO_PI)

TOPIC_CAMERA = "rud.camera"
TOPIC_VEHICLES = "rud.vehicles"
TOPIC_FUSED = "gdm.ruds"
TOPIC_LOGS = "logs"


@dataclass(frozen=True)
class FusionConfig:
    distance_gate_m: float = 3.0
    angle_gate_rad: float = 0.35
    confidence_increment: float = 0.15
    confidence_decrement: float = 0.25
    match_threshold: float = 0.5
    history_ttl_s: float = 5.0
    window_ms: int = 100
    # descriptions older than this at window close are too stale to trust
    max_age_ms: int = 500

    def __post_init__(self) -> None:
        if not 0.0 < self.match_threshold < 1.0:
            raise ValueError("match threshold must be in (0, 1)")
        if self.history_ttl_s <= 0.0:
            raise ValueError("history TTL must be positive")
        if self.window_ms <= 0:
            raise ValueError("window length must be positive")


@dataclass
class FusionHistoryEntry:
    camera_uuid: UUID
    vehicle_uuid: UUID
    confidence: float
    last_seen: int

    def bump(self, delta: float, now: int) -> None:
        self.confidence = min(1.0, max(0.0, self.confidence + delta))
        self.last_seen = now


class FusionHistory:
    """Aged camera-to-vehicle match hypotheses, keyed by camera uuid."""

    def __init__(self):
        self.entries: dict[UUID, FusionHistoryEntry] = {}

    def get(self, camera_uuid: UUID) -> Optional[FusionHistoryEntry]:
        return self.entries.get(camera_uuid)

    def ensure(self, camera_uuid: UUID, vehicle_uuid: UUID,
               now: int) -> FusionHistoryEntry:
        entry = self.entries.get(camera_uuid)
        if entry is None or entry.vehicle_uuid != vehicle_uuid:
            entry = FusionHistoryEntry(camera_uuid, vehicle_uuid, 0.0, now)
            self.entries[camera_uuid] = entry
        return entry

    def clean(self, now_ms: int, ttl_s: float) -> int:
        """Drop entries not seen within the TTL; returns how many."""
        cutoff = now_ms - round(ttl_s * 1000.0)
        stale = [k for k, e in self.entries.items() if e.last_seen < cutoff]
        for k in stale:
            del self.entries[k]
        return len(stale)

    def __len__(self) -> int:
        return len(self.entries)


def extrapolate(rud: RoadUserDescription, t_ref: int) -> RoadUserDescription:
    """Advance a description to the reference time under constant
    acceleration; heading is kept, coordinates and timestamp move."""
    if t_ref < rud.timestamp:
        raise ValueError("reference time is before the description timestamp")
    if t_ref == rud.timestamp:
        return rud
    dt = (t_ref - rud.timestamp) / 1000.0
    x, y, speed = advance(rud.x, rud.y, rud.speed, rud.acceleration,
                          rud.heading, dt)
    return replace(rud, position=(x, y), speed=speed, timestamp=t_ref)


def _angle_diff(a: float, b: float) -> float:
    d = math.fmod(a - b, TWO_PI)
    if d > math.pi:
        d -= TWO_PI
    elif d < -math.pi:
        d += TWO_PI
    return abs(d)


def _dist(a: RoadUserDescription, b: RoadUserDescription) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


def _in_gate(camera: RoadUserDescription, vehicle: RoadUserDescription,
             config: FusionConfig) -> bool:
    return (_dist(camera, vehicle) <= config.distance_gate_m
            and _angle_diff(camera.heading, vehicle.heading)
            <= config.angle_gate_rad)


def associate(camera: RoadUserDescription,
              vehicles: dict[UUID, RoadUserDescription],
              history: FusionHistory, config: FusionConfig,
              claimed: set[UUID]) -> Optional[UUID]:
    """Update the history for one camera object and report a match.

    The candidate is the remembered partner when one exists, otherwise the
    nearest unclaimed vehicle inside the distance gate. Confidence moves up
    on an in-gate observation and down otherwise; a match is reported only
    at or above the threshold.
    """
    now = camera.timestamp
    entry = history.get(camera.uuid)
    if entry is not None:
        partner = vehicles.get(entry.vehicle_uuid)
        if partner is None:
            # partner not observed this window: no evidence either way
            return None
        delta = (config.confidence_increment if _in_gate(camera, partner, config)
                 else -config.confidence_decrement)
        entry.bump(delta, now)
        if entry.confidence >= config.match_threshold and \
                entry.vehicle_uuid not in claimed:
            return entry.vehicle_uuid
        return None

    candidates = [(d, str(v.uuid), v.uuid) for v in vehicles.values()
                  if v.uuid not in claimed
                  and (d := _dist(camera, v)) <= config.distance_gate_m]
    if not candidates:
        return None
    _, _, nearest = min(candidates)
    entry = history.ensure(camera.uuid, nearest, now)
    delta = (config.confidence_increment
             if _in_gate(camera, vehicles[nearest], config)
             else -config.confidence_decrement)
    entry.bump(delta, now)
    if entry.confidence >= config.match_threshold:
        return nearest
    return None


def fuse_pair(camera: RoadUserDescription,
              vehicle: RoadUserDescription) -> RoadUserDescription:
    """Blend a matched pair: identity and kinematics from the vehicle (its
    acceleration is the trustworthy one), position averaged."""
    if camera.timestamp != vehicle.timestamp:
        raise ValueError("fuse_pair needs time-aligned descriptions")
    return replace(vehicle,
                   position=((camera.x + vehicle.x) / 2.0,
                             (camera.y + vehicle.y) / 2.0),
                   source=Source.FUSED, connected=True)


@dataclass
class WindowResult:
    outputs: list[RoadUserDescription]
    matches: int
    camera_count: int
    vehicle_count: int
    stale_dropped: int


def close_window(buffered: list[RoadUserDescription], t_ref: int,
                 config: FusionConfig, history: FusionHistory) -> WindowResult:
    """Extrapolate the window's descriptions to its close time and emit one
    output per distinct road user."""
    fresh: list[RoadUserDescription] = []
    stale = 0
    newest: dict[UUID, RoadUserDescription] = {}
    for rud in buffered:
        if rud.timestamp > t_ref:
            raise ValueError("window contains a description from the future")
        if t_ref - rud.timestamp > config.max_age_ms:
            stale += 1
            continue
        # keep only the newest description per uuid within the window
        cur = newest.get(rud.uuid)
        if cur is None or rud.timestamp > cur.timestamp:
            newest[rud.uuid] = rud
    fresh = [extrapolate(r, t_ref) for r in newest.values()]

    cameras = sorted((r for r in fresh if r.source is Source.CAMERA_SYSTEM),
                     key=lambda r: str(r.uuid))
    vehicles = {r.uuid: r for r in fresh
                if r.source is not Source.CAMERA_SYSTEM}

    claimed: set[UUID] = set()
    pairs: list[tuple[RoadUserDescription, UUID]] = []
    unmatched_cams: list[RoadUserDescription] = []

    # remembered partners first, then new hypotheses nearest-first; both
    # passes break ties on uuid so permuting the input changes nothing
    with_entry = [c for c in cameras if history.get(c.uuid) is not None]
    without_entry = [c for c in cameras if history.get(c.uuid) is None]
    without_entry.sort(key=lambda c: (
        min((_dist(c, v) for v in vehicles.values()), default=math.inf),
        str(c.uuid)))

    for cam in with_entry + without_entry:
        match = associate(cam, vehicles, history, config, claimed)
        if match is not None:
            claimed.add(match)
            pairs.append((cam, match))
        else:
            unmatched_cams.append(cam)

    outputs = [fuse_pair(cam, vehicles[vid]) for cam, vid in pairs]
    outputs.extend(v for vid, v in vehicles.items() if vid not in claimed)
    outputs.extend(unmatched_cams)
    outputs.sort(key=lambda r: str(r.uuid))
    return WindowResult(outputs=outputs, matches=len(pairs),
                        camera_count=len(cameras),
                        vehicle_count=len(vehicles), stale_dropped=stale)


class FusionService:
    """Clocked component: buffers RUD messages, closes a window per tick,
    publishes the fused stream and a processing-latency log record."""

    def __init__(self, config: FusionConfig, clock, publish, send_log=None):
        self.config = config
        self.clock = clock
        self.publish = publish          # (topic, msg_type, payload) -> None
        self.send_log = send_log        # (LogRecord) -> None
        self.history = FusionHistory()
        self.buffer: list[RoadUserDescription] = []
        self.pending: list[RoadUserDescription] = []
        self.windows_closed = 0
        self.future_held = 0
        self._last_clean = 0

    @property
    def tick_interval_ms(self) -> int:
        return self.config.window_ms

    def topics(self) -> list[str]:
        return [TOPIC_CAMERA, TOPIC_VEHICLES]

    def on_message(self, env: V2XEnvelope) -> None:
        if env.msg_type is MsgType.RUD_UPDATE and \
                env.topic in (TOPIC_CAMERA, TOPIC_VEHICLES):
            self.buffer.append(env.payload)

    def on_tick(self) -> None:
        import time as _time
        t_ref = self.clock.now_ms()
        t0 = _time.perf_counter()
        take: list[RoadUserDescription] = []
        hold: list[RoadUserDescription] = []
        for rud in self.buffer + self.pending:
            (take if rud.timestamp <= t_ref else hold).append(rud)
        self.buffer = []
        self.pending = hold
        self.future_held = len(hold)
        result = close_window(take, t_ref, self.config, self.history)
        for rud in result.outputs:
            self.publish(TOPIC_FUSED, MsgType.RUD_UPDATE, rud)
        self.windows_closed += 1
        if t_ref - self._last_clean >= 1000:
            self.history.clean(t_ref, self.config.history_ttl_s)
            self._last_clean = t_ref
        if self.send_log is not None:
            proc_ms = (_time.perf_counter() - t0) * 1000.0
            self.send_log(LogRecord(
                component="fusion", event="window_closed",
                correlation_id=f"window:{t_ref}", t=max(1, t_ref),
                attributes={"n_in": len(take), "n_out": len(result.outputs),
                            "n_matched": result.matches,
                            "stale_dropped": result.stale_dropped,
                            "proc_ms": proc_ms}))
