"""NDJSON wire codec for V2XEnvelope.

One envelope is exactly one line of UTF-8 JSON terminated by '\\n', with
sorted keys and no whitespace, so encodings are byte-stable. See WIRE.md for
the pinned schema and golden examples.
"""

from __future__ import annotations

import json
import math
import uuid as uuidlib
from typing import Any, Union

from .types import (LogRecord, ManeuverFeedback, MsgType, RoadUserDescription,
                    Role, Source, SubscribeRequest, TrajectoryRecommendation,
                    V2XEnvelope, Verdict, Waypoint)


class WireError(ValueError):
    """Malformed line, schema violation, or unknown type tag."""


# ---------------------------------------------------------------- encoding

def _check_finite(value: float, name: str) -> float:
    if not math.isfinite(value):
        raise WireError(f"non-finite float in field '{name}'")
    return float(value)


def _rud_to_obj(r: RoadUserDescription) -> dict[str, Any]:
    return {
        "uuid": str(r.uuid),
        "source": r.source.value,
        "timestamp": r.timestamp,
        "position": [_check_finite(r.x, "position"),
                     _check_finite(r.y, "position")],
        "speed": _check_finite(r.speed, "speed"),
        "acceleration": _check_finite(r.acceleration, "acceleration"),
        "heading": _check_finite(r.heading, "heading"),
        "length": _check_finite(r.length, "length"),
        "width": _check_finite(r.width, "width"),
        "lane": r.lane,
        "connected": r.connected,
    }


def _reco_to_obj(t: TrajectoryRecommendation) -> dict[str, Any]:
    return {
        "recommendation_id": str(t.recommendation_id),
        "target_uuid": str(t.target_uuid),
        "waypoints": [
            {
                "timestamp": w.timestamp,
                "position": [_check_finite(w.position[0], "position"),
                             _check_finite(w.position[1], "position")],
                "speed": _check_finite(w.speed, "speed"),
                "acceleration": _check_finite(w.acceleration, "acceleration"),
            }
            for w in t.waypoints
        ],
        "created_at": t.created_at,
        "origin_rud_timestamp": t.origin_rud_timestamp,
    }


def _feedback_to_obj(f: ManeuverFeedback) -> dict[str, Any]:
    return {
        "recommendation_id": str(f.recommendation_id),
        "vehicle_uuid": str(f.vehicle_uuid),
        "verdict": f.verdict.value,
        "timestamp": f.timestamp,
    }


def _log_to_obj(rec: LogRecord) -> dict[str, Any]:
    attrs: dict[str, Any] = {}
    for key, value in rec.attributes.items():
        if isinstance(value, float):
            value = _check_finite(value, f"attributes.{key}")
        attrs[key] = value
    return {
        "component": rec.component,
        "event": rec.event,
        "correlation_id": rec.correlation_id,
        "t": rec.t,
        "attributes": attrs,
    }


def _subscribe_to_obj(s: SubscribeRequest) -> dict[str, Any]:
    return {
        "role": None if s.role is None else s.role.value,
        "topic": s.topic,
        "bound": None if s.bound is None
        else [_check_finite(v, "bound") for v in s.bound],
        "action": s.action,
    }


_ENCODERS = {
    MsgType.RUD_UPDATE: _rud_to_obj,
    MsgType.RECOMMENDATION: _reco_to_obj,
    MsgType.FEEDBACK: _feedback_to_obj,
    MsgType.LOG_RECORD: _log_to_obj,
    MsgType.SUBSCRIBE: _subscribe_to_obj,
}


def encode_envelope(env: V2XEnvelope) -> bytes:
    """Serialize an envelope to one newline-terminated JSON line."""
    obj = {
        "msg_type": env.msg_type.value,
        "topic": env.topic,
        "seq": env.seq,
        "sent_at": env.sent_at,
        "payload": _ENCODERS[env.msg_type](env.payload),
    }
    return (json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


# ---------------------------------------------------------------- decoding

def _expect_keys(obj: dict, keys: set[str], what: str) -> None:
    got = set(obj)
    if got != keys:
        missing = keys - got
        extra = got - keys
        parts = []
        if missing:
            parts.append(f"missing {sorted(missing)}")
        if extra:
            parts.append(f"unexpected {sorted(extra)}")
        raise WireError(f"schema violation in {what}: {', '.join(parts)}")


def _as_int(obj: dict, key: str, what: str) -> int:
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise WireError(f"schema violation in {what}: '{key}' must be an integer")
    return v


def _as_float(obj: dict, key: str, what: str) -> float:
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise WireError(f"schema violation in {what}: '{key}' must be a number")
    return float(v)


def _as_str(obj: dict, key: str, what: str) -> str:
    v = obj[key]
    if not isinstance(v, str):
        raise WireError(f"schema violation in {what}: '{key}' must be a string")
    return v


def _as_bool(obj: dict, key: str, what: str) -> bool:
    v = obj[key]
    if not isinstance(v, bool):
        raise WireError(f"schema violation in {what}: '{key}' must be a boolean")
    return v


def _as_uuid(obj: dict, key: str, what: str) -> uuidlib.UUID:
    try:
        return uuidlib.UUID(_as_str(obj, key, what))
    except ValueError as exc:
        raise WireError(f"schema violation in {what}: '{key}' is not a UUID") from exc


def _as_xy(obj: dict, key: str, what: str) -> tuple[float, float]:
    v = obj[key]
    if not isinstance(v, list) or len(v) != 2 or \
            any(isinstance(c, bool) or not isinstance(c, (int, float)) for c in v):
        raise WireError(f"schema violation in {what}: '{key}' must be [x, y]")
    return (float(v[0]), float(v[1]))


def _rud_from_obj(obj: dict) -> RoadUserDescription:
    _expect_keys(obj, {"uuid", "source", "timestamp", "position", "speed",
                       "acceleration", "heading", "length", "width", "lane",
                       "connected"}, "RudUpdate payload")
    raw_source = _as_str(obj, "source", "RudUpdate payload")
    try:
        source = Source(raw_source)
    except ValueError as exc:
        raise WireError(f"schema violation in RudUpdate payload: "
                        f"unknown source '{raw_source}'") from exc
    lane = obj["lane"]
    if lane is not None and (isinstance(lane, bool) or not isinstance(lane, int)):
        raise WireError("schema violation in RudUpdate payload: 'lane' must be an integer or null")
    return RoadUserDescription(
        uuid=_as_uuid(obj, "uuid", "RudUpdate payload"),
        source=source,
        timestamp=_as_int(obj, "timestamp", "RudUpdate payload"),
        position=_as_xy(obj, "position", "RudUpdate payload"),
        speed=_as_float(obj, "speed", "RudUpdate payload"),
        acceleration=_as_float(obj, "acceleration", "RudUpdate payload"),
        heading=_as_float(obj, "heading", "RudUpdate payload"),
        length=_as_float(obj, "length", "RudUpdate payload"),
        width=_as_float(obj, "width", "RudUpdate payload"),
        lane=lane,
        connected=_as_bool(obj, "connected", "RudUpdate payload"),
    )


def _waypoint_from_obj(obj: Any, idx: int) -> Waypoint:
    what = f"waypoints[{idx}]"
    if not isinstance(obj, dict):
        raise WireError(f"schema violation in {what}: must be an object")
    _expect_keys(obj, {"timestamp", "position", "speed", "acceleration"}, what)
    return Waypoint(
        timestamp=_as_int(obj, "timestamp", what),
        position=_as_xy(obj, "position", what),
        speed=_as_float(obj, "speed", what),
        acceleration=_as_float(obj, "acceleration", what),
    )


def _reco_from_obj(obj: dict) -> TrajectoryRecommendation:
    what = "Recommendation payload"
    _expect_keys(obj, {"recommendation_id", "target_uuid", "waypoints",
                       "created_at", "origin_rud_timestamp"}, what)
    wps = obj["waypoints"]
    if not isinstance(wps, list):
        raise WireError(f"schema violation in {what}: 'waypoints' must be a list")
    return TrajectoryRecommendation(
        recommendation_id=_as_uuid(obj, "recommendation_id", what),
        target_uuid=_as_uuid(obj, "target_uuid", what),
        waypoints=tuple(_waypoint_from_obj(w, i) for i, w in enumerate(wps)),
        created_at=_as_int(obj, "created_at", what),
        origin_rud_timestamp=_as_int(obj, "origin_rud_timestamp", what),
    )


def _feedback_from_obj(obj: dict) -> ManeuverFeedback:
    what = "Feedback payload"
    _expect_keys(obj, {"recommendation_id", "vehicle_uuid", "verdict",
                       "timestamp"}, what)
    verdict_raw = _as_str(obj, "verdict", what)
    try:
        verdict = Verdict(verdict_raw)
    except ValueError as exc:
        raise WireError(f"schema violation in {what}: unknown verdict '{verdict_raw}'") from exc
    return ManeuverFeedback(
        recommendation_id=_as_uuid(obj, "recommendation_id", what),
        vehicle_uuid=_as_uuid(obj, "vehicle_uuid", what),
        verdict=verdict,
        timestamp=_as_int(obj, "timestamp", what),
    )


def _log_from_obj(obj: dict) -> LogRecord:
    what = "LogRecord payload"
    _expect_keys(obj, {"component", "event", "correlation_id", "t",
                       "attributes"}, what)
    attrs = obj["attributes"]
    if not isinstance(attrs, dict):
        raise WireError(f"schema violation in {what}: 'attributes' must be an object")
    for key, value in attrs.items():
        if not isinstance(value, (str, int, float, bool)):
            raise WireError(f"schema violation in {what}: attribute '{key}' must be a scalar")
    return LogRecord(
        component=_as_str(obj, "component", what),
        event=_as_str(obj, "event", what),
        correlation_id=_as_str(obj, "correlation_id", what),
        t=_as_int(obj, "t", what),
        attributes=dict(attrs),
    )


def _subscribe_from_obj(obj: dict) -> SubscribeRequest:
    what = "Subscribe payload"
    _expect_keys(obj, {"role", "topic", "bound", "action"}, what)
    role = obj["role"]
    if role is not None:
        try:
            role = Role(_as_str(obj, "role", what))
        except ValueError as exc:
            raise WireError(f"schema violation in {what}: unknown role '{obj['role']}'") from exc
    topic = obj["topic"]
    if topic is not None and not isinstance(topic, str):
        raise WireError(f"schema violation in {what}: 'topic' must be a string or null")
    bound = obj["bound"]
    if bound is not None:
        if not isinstance(bound, list) or len(bound) != 4 or \
                any(isinstance(c, bool) or not isinstance(c, (int, float)) for c in bound):
            raise WireError(f"schema violation in {what}: 'bound' must be [x0, y0, x1, y1]")
        bound = tuple(float(v) for v in bound)
    return SubscribeRequest(role=role, topic=topic, bound=bound,
                            action=_as_str(obj, "action", what))


_DECODERS = {
    MsgType.RUD_UPDATE: _rud_from_obj,
    MsgType.RECOMMENDATION: _reco_from_obj,
    MsgType.FEEDBACK: _feedback_from_obj,
    MsgType.LOG_RECORD: _log_from_obj,
    MsgType.SUBSCRIBE: _subscribe_from_obj,
}


def decode_envelope(line: Union[bytes, str]) -> V2XEnvelope:
    """Parse one NDJSON line into an envelope, or raise WireError."""
    if isinstance(line, (bytes, bytearray)):
        try:
            text = bytes(line).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WireError(f"malformed line: {exc}") from exc
    else:
        text = line
    text = text[:-1] if text.endswith("\n") else text
    if "\n" in text:
        raise WireError("malformed line: embedded newline")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise WireError(f"malformed JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise WireError("schema violation: envelope must be a JSON object")
    _expect_keys(obj, {"msg_type", "topic", "seq", "sent_at", "payload"},
                 "envelope")
    raw_type = _as_str(obj, "msg_type", "envelope")
    try:
        msg_type = MsgType(raw_type)
    except ValueError as exc:
        raise WireError(f"unknown msg_type '{raw_type}'") from exc
    payload_obj = obj["payload"]
    if not isinstance(payload_obj, dict):
        raise WireError("schema violation: payload must be a JSON object")
    try:
        payload = _DECODERS[msg_type](payload_obj)
        return V2XEnvelope(
            msg_type=msg_type,
            topic=_as_str(obj, "topic", "envelope"),
            seq=_as_int(obj, "seq", "envelope"),
            sent_at=_as_int(obj, "sent_at", "envelope"),
            payload=payload,
        )
    except WireError:
        raise
    except ValueError as exc:
        raise WireError(f"schema violation: {exc}") from exc
