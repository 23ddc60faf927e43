import math
import uuid
from pathlib import Path

import numpy as np
import pytest

from lanemerge.types import (ManeuverFeedback, MsgType, RoadUserDescription,
                             Source, SubscribeRequest, V2XEnvelope, Verdict)
from lanemerge.wire import WireError, decode_envelope, encode_envelope

from util import random_envelope, random_rud

GOLDEN = Path(__file__).parent / "fixtures" / "golden.ndjson"


def _rud(**overrides):
    base = dict(uuid=uuid.UUID(int=7), source=Source.CONNECTED_VEHICLE,
                timestamp=1000, position=(1.0, 2.0), speed=10.0,
                acceleration=0.5, heading=0.25, length=4.6, width=1.8,
                lane=1, connected=True)
    base.update(overrides)
    return RoadUserDescription(**base)


def _env(payload, msg_type=MsgType.RUD_UPDATE, topic="rud.vehicles"):
    return V2XEnvelope(msg_type=msg_type, topic=topic, seq=3, sent_at=1001,
                       payload=payload)


def test_encode_is_one_terminated_json_line():
    line = encode_envelope(_env(_rud()))
    assert line.endswith(b"\n")
    assert line.count(b"\n") == 1
    assert b'"msg_type":"RudUpdate"' in line


def test_roundtrip_simple():
    env = _env(_rud())
    assert decode_envelope(encode_envelope(env)) == env


def test_roundtrip_randomized():
    rng = np.random.default_rng(42)
    for _ in range(2000):
        env = random_envelope(rng)
        assert decode_envelope(encode_envelope(env)) == env


def test_nan_speed_rejected_at_construction():
    with pytest.raises(ValueError):
        _rud(speed=float("nan"))


def test_nonfinite_acceleration_rejected_at_encode():
    env = _env(_rud(acceleration=float("inf")))
    with pytest.raises(WireError, match="non-finite"):
        encode_envelope(env)


def test_unknown_msg_type_rejected():
    with pytest.raises(WireError, match="unknown msg_type"):
        decode_envelope(b'{"msg_type":"Bogus","topic":"t","seq":0,'
                        b'"sent_at":1,"payload":{}}\n')


def test_truncated_line_is_parse_error():
    line = encode_envelope(_env(_rud()))
    with pytest.raises(WireError, match="malformed JSON"):
        decode_envelope(line[: len(line) // 2])


def test_unknown_field_rejected():
    line = encode_envelope(_env(_rud()))
    broken = line.replace(b'"seq":3', b'"seq":3,"zz":1')
    with pytest.raises(WireError, match="unexpected"):
        decode_envelope(broken)


def test_missing_field_rejected():
    with pytest.raises(WireError, match="missing"):
        decode_envelope(b'{"msg_type":"Subscribe","topic":"t","seq":0,'
                        b'"sent_at":1}\n')


def test_bad_verdict_rejected():
    fb = ManeuverFeedback(recommendation_id=uuid.UUID(int=1),
                          vehicle_uuid=uuid.UUID(int=2),
                          verdict=Verdict.ACCEPT, timestamp=5)
    line = encode_envelope(_env(fb, msg_type=MsgType.FEEDBACK,
                                topic="feedback"))
    broken = line.replace(b'"verdict":"accept"', b'"verdict":"maybe"')
    with pytest.raises(WireError, match="verdict"):
        decode_envelope(broken)


def test_seq_ordering_preserved_through_codec():
    rng = np.random.default_rng(7)
    seqs = []
    for seq in range(25):
        env = V2XEnvelope(msg_type=MsgType.RUD_UPDATE, topic="rud.vehicles",
                          seq=seq, sent_at=1000 + seq, payload=random_rud(rng))
        seqs.append(decode_envelope(encode_envelope(env)).seq)
    assert seqs == sorted(seqs)
    assert len(set(seqs)) == len(seqs)


def test_heading_normalized_on_construction():
    r = _rud(heading=-0.5)
    assert 0.0 <= r.heading < 2 * math.pi
    assert math.isclose(r.heading, 2 * math.pi - 0.5)


def test_golden_fixtures_byte_stable():
    """The wire format is pinned: encoding the fixture envelopes must
    reproduce the committed bytes exactly."""
    lines = GOLDEN.read_bytes().splitlines(keepends=True)
    assert len(lines) == 5
    seen_types = set()
    for line in lines:
        env = decode_envelope(line)
        seen_types.add(env.msg_type)
        assert encode_envelope(env) == line
    assert seen_types == set(MsgType)
