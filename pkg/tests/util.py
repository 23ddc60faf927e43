"""Shared generators for randomized tests."""

import uuid

import numpy as np

from lanemerge.types import (LogRecord, ManeuverFeedback, MsgType,
                             RoadUserDescription, Role, Source,
                             SubscribeRequest, TrajectoryRecommendation,
                             V2XEnvelope, Verdict, Waypoint)


def rand_uuid(rng: np.random.Generator) -> uuid.UUID:
    return uuid.UUID(bytes=bytes(rng.integers(0, 256, 16, dtype=np.uint8)))


def random_rud(rng: np.random.Generator) -> RoadUserDescription:
    return RoadUserDescription(
        uuid=rand_uuid(rng),
        source=rng.choice(list(Source)),
        timestamp=int(rng.integers(1, 2 ** 48)),
        position=(float(rng.normal(0, 500)), float(rng.normal(0, 50))),
        speed=float(rng.uniform(0, 60)),
        acceleration=float(rng.normal(0, 3)),
        heading=float(rng.uniform(-10, 10)),
        length=float(rng.uniform(0.5, 20)),
        width=float(rng.uniform(0.3, 4)),
        lane=None if rng.random() < 0.3 else int(rng.integers(0, 5)),
        connected=bool(rng.random() < 0.5),
    )


def random_recommendation(rng: np.random.Generator) -> TrajectoryRecommendation:
    t0 = int(rng.integers(1, 2 ** 40))
    n = int(rng.integers(1, 8))
    wps = tuple(
        Waypoint(timestamp=t0 + 100 * k,
                 position=(float(rng.normal(0, 100)), float(rng.normal(0, 10))),
                 speed=float(rng.uniform(0, 40)),
                 acceleration=float(rng.normal(0, 2)))
        for k in range(n))
    return TrajectoryRecommendation(
        recommendation_id=rand_uuid(rng), target_uuid=rand_uuid(rng),
        waypoints=wps, created_at=t0, origin_rud_timestamp=max(1, t0 - 50))


def random_feedback(rng: np.random.Generator) -> ManeuverFeedback:
    return ManeuverFeedback(
        recommendation_id=rand_uuid(rng), vehicle_uuid=rand_uuid(rng),
        verdict=rng.choice(list(Verdict)),
        timestamp=int(rng.integers(1, 2 ** 40)))


def random_log_record(rng: np.random.Generator) -> LogRecord:
    return LogRecord(
        component=str(rng.choice(["gateway", "fusion", "orchestrator"])),
        event=str(rng.choice(["rud_sent", "rud_fused", "reco_computed"])),
        correlation_id=str(rand_uuid(rng)),
        t=int(rng.integers(1, 2 ** 40)),
        attributes={"n": int(rng.integers(0, 100)),
                    "latency_ms": float(rng.uniform(0, 50)),
                    "ok": bool(rng.random() < 0.5)})


def random_subscribe(rng: np.random.Generator) -> SubscribeRequest:
    bound = None
    if rng.random() < 0.5:
        x0, y0 = float(rng.normal(0, 100)), float(rng.normal(0, 100))
        bound = (x0, y0, x0 + float(rng.uniform(1, 200)),
                 y0 + float(rng.uniform(1, 200)))
    return SubscribeRequest(
        role=None if rng.random() < 0.3 else rng.choice(list(Role)),
        topic=None if rng.random() < 0.3 else f"topic.{rng.integers(0, 9)}",
        bound=bound,
        action=str(rng.choice(["subscribe", "unsubscribe"])))


_PAYLOAD_MAKERS = {
    MsgType.RUD_UPDATE: random_rud,
    MsgType.RECOMMENDATION: random_recommendation,
    MsgType.FEEDBACK: random_feedback,
    MsgType.LOG_RECORD: random_log_record,
    MsgType.SUBSCRIBE: random_subscribe,
}


def random_envelope(rng: np.random.Generator) -> V2XEnvelope:
    msg_type = rng.choice(list(MsgType))
    return V2XEnvelope(
        msg_type=msg_type,
        topic=f"topic.{rng.integers(0, 100)}",
        seq=int(rng.integers(0, 2 ** 31)),
        sent_at=int(rng.integers(1, 2 ** 48)),
        payload=_PAYLOAD_MAKERS[msg_type](rng))
