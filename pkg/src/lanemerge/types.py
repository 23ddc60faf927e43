"""Domain value types shared by every service: road users, recommendations,
feedback, log records and the envelope that carries them on the wire.

All types are frozen dataclasses validated on construction; timestamps are
integer milliseconds since epoch.
"""

from __future__ import annotations

import math
import uuid as uuidlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

TWO_PI = 2.0 * math.pi

AttrValue = Union[str, int, float, bool]


class Source(Enum):
    CONNECTED_VEHICLE = "connected_vehicle"
    CAMERA_SYSTEM = "camera_system"
    FUSED = "fused"


class Verdict(Enum):
    ACCEPT = "accept"
    REJECT = "reject"
    ABORT = "abort"


class MsgType(Enum):
    RUD_UPDATE = "RudUpdate"
    RECOMMENDATION = "Recommendation"
    FEEDBACK = "Feedback"
    LOG_RECORD = "LogRecord"
    SUBSCRIBE = "Subscribe"


class Role(Enum):
    VEHICLE = "vehicle"
    CAMERA = "camera"
    FUSION = "fusion"
    ORCHESTRATOR = "orchestrator"
    KPI = "kpi"


def normalize_heading(heading: float) -> float:
    """Wrap an angle in radians into [0, 2*pi)."""
    h = math.fmod(heading, TWO_PI)
    if h < 0.0:
        h += TWO_PI
    # fmod of values just below a multiple of 2*pi can round up to 2*pi
    if h >= TWO_PI:
        h = 0.0
    return h


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


@dataclass(frozen=True)
class RoadUserDescription:
    """Timestamped kinematic + identity snapshot of one road user."""

    uuid: uuidlib.UUID
    source: Source
    timestamp: int
    position: tuple[float, float]
    speed: float
    acceleration: float
    heading: float
    length: float
    width: float
    lane: Optional[int] = None
    connected: bool = False

    def __post_init__(self) -> None:
        _require(isinstance(self.uuid, uuidlib.UUID), "uuid must be a UUID")
        _require(isinstance(self.timestamp, int) and self.timestamp > 0,
                 "timestamp must be a positive integer (ms)")
        _require(len(self.position) == 2, "position must be (x, y)")
        object.__setattr__(self, "position",
                           (float(self.position[0]), float(self.position[1])))
        _require(self.speed >= 0.0, "speed must be >= 0")
        _require(self.length > 0.0, "length must be > 0")
        _require(self.width > 0.0, "width must be > 0")
        _require(math.isfinite(self.heading), "heading must be finite")
        object.__setattr__(self, "heading", normalize_heading(float(self.heading)))
        if self.lane is not None:
            _require(isinstance(self.lane, int), "lane must be an int or None")

    @property
    def x(self) -> float:
        return self.position[0]

    @property
    def y(self) -> float:
        return self.position[1]


@dataclass(frozen=True)
class Waypoint:
    """One point of a recommended trajectory."""

    timestamp: int
    position: tuple[float, float]
    speed: float
    acceleration: float

    def __post_init__(self) -> None:
        _require(isinstance(self.timestamp, int) and self.timestamp > 0,
                 "waypoint timestamp must be a positive integer (ms)")
        _require(len(self.position) == 2, "position must be (x, y)")
        object.__setattr__(self, "position",
                           (float(self.position[0]), float(self.position[1])))


@dataclass(frozen=True)
class TrajectoryRecommendation:
    """Ordered waypoints addressed to one connected vehicle."""

    recommendation_id: uuidlib.UUID
    target_uuid: uuidlib.UUID
    waypoints: tuple[Waypoint, ...]
    created_at: int
    origin_rud_timestamp: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "waypoints", tuple(self.waypoints))
        _require(len(self.waypoints) > 0, "waypoint list must be non-empty")
        ts = [w.timestamp for w in self.waypoints]
        _require(all(a < b for a, b in zip(ts, ts[1:])),
                 "waypoint timestamps must be strictly increasing")
        _require(self.created_at > 0, "created_at must be positive")
        _require(self.origin_rud_timestamp > 0,
                 "origin_rud_timestamp must be positive")


@dataclass(frozen=True)
class ManeuverFeedback:
    """A vehicle's response to a recommendation."""

    recommendation_id: uuidlib.UUID
    vehicle_uuid: uuidlib.UUID
    verdict: Verdict
    timestamp: int

    def __post_init__(self) -> None:
        _require(isinstance(self.verdict, Verdict), "verdict must be a Verdict")
        _require(self.timestamp > 0, "timestamp must be positive")


@dataclass(frozen=True)
class LogRecord:
    """One component log event for the KPI pipeline."""

    component: str
    event: str
    correlation_id: str
    t: int
    attributes: dict[str, AttrValue] = field(default_factory=dict)

    def __post_init__(self) -> None:
        _require(bool(self.component), "component must be non-empty")
        _require(bool(self.event), "event must be non-empty")
        _require(isinstance(self.t, int) and self.t > 0, "t must be positive ms")

    def __hash__(self) -> int:
        return hash((self.component, self.event, self.correlation_id, self.t))


@dataclass(frozen=True)
class SubscribeRequest:
    """Gateway control message: role handshake, (un)subscribe, or broker ack.

    The first message on a connection must carry the client role; later ones
    may omit it. ``bound`` is an axis-aligned rectangle (x0, y0, x1, y1) that
    restricts RUD delivery to positions inside it.
    """

    role: Optional[Role] = None
    topic: Optional[str] = None
    bound: Optional[tuple[float, float, float, float]] = None
    action: str = "subscribe"

    def __post_init__(self) -> None:
        _require(self.action in ("subscribe", "unsubscribe", "ack"),
                 "action must be subscribe | unsubscribe | ack")
        if self.topic is not None:
            _require(bool(self.topic), "topic must be non-empty")
        if self.bound is not None:
            _require(len(self.bound) == 4, "bound must be (x0, y0, x1, y1)")
            object.__setattr__(self, "bound", tuple(float(v) for v in self.bound))


Payload = Union[RoadUserDescription, TrajectoryRecommendation, ManeuverFeedback,
                LogRecord, SubscribeRequest]

_PAYLOAD_TYPE = {
    MsgType.RUD_UPDATE: RoadUserDescription,
    MsgType.RECOMMENDATION: TrajectoryRecommendation,
    MsgType.FEEDBACK: ManeuverFeedback,
    MsgType.LOG_RECORD: LogRecord,
    MsgType.SUBSCRIBE: SubscribeRequest,
}


@dataclass(frozen=True)
class V2XEnvelope:
    """Typed, topic-tagged message wrapper; one line of JSON on the wire."""

    msg_type: MsgType
    topic: str
    seq: int
    sent_at: int
    payload: Payload

    def __post_init__(self) -> None:
        _require(isinstance(self.msg_type, MsgType), "msg_type must be a MsgType")
        _require(bool(self.topic), "topic must be non-empty")
        _require(isinstance(self.seq, int) and self.seq >= 0, "seq must be >= 0")
        _require(isinstance(self.sent_at, int) and self.sent_at > 0,
                 "sent_at must be positive ms")
        expected = _PAYLOAD_TYPE[self.msg_type]
        _require(isinstance(self.payload, expected),
                 f"payload for {self.msg_type.value} must be {expected.__name__}")


def new_uuid(rng=None) -> uuidlib.UUID:
    """Fresh 128-bit identifier; draws from ``rng`` when given so simulated
    runs stay deterministic."""
    if rng is None:
        return uuidlib.uuid4()
    return uuidlib.UUID(int=int(rng.integers(0, 2 ** 63, dtype="int64"))
                        | (int(rng.integers(0, 2 ** 63, dtype="int64")) << 64),
                        version=4)
