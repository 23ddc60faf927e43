import math
import uuid

import numpy as np
import pytest

from lanemerge.agent import StateNorms
from lanemerge.env import EnvParams, LaneGeometry, generate_synthetic
from lanemerge.orchestrator import (KnowledgeBase, MergeSituation,
                                    OrchestratorConfig, OrchestratorService,
                                    RecommendationError, RecoStatus,
                                    audit_waypoints, build_recommendations,
                                    detect_situation, recommendations_topic)
from lanemerge.qnet import DUELING, QNetwork
from lanemerge.types import (ManeuverFeedback, MsgType, RoadUserDescription,
                             Source, V2XEnvelope, Verdict, Waypoint)

GEO = LaneGeometry(merge_lane_y=3.5, target_lane_y=0.0, merge_end_x=200.0)
CFG = OrchestratorConfig()


def _rud(x, y, speed=20.0, uid=None, connected=True, t=10_000, accel=0.0):
    return RoadUserDescription(
        uuid=uid or uuid.uuid4(),
        source=Source.FUSED if connected else Source.CAMERA_SYSTEM,
        timestamp=t, position=(x, y), speed=speed, acceleration=accel,
        heading=0.0, length=4.6, width=1.8, lane=None, connected=connected)


class _FakeClock:
    def __init__(self, t=10_000):
        self.t = t

    def now_ms(self):
        return self.t


# --------------------------------------------------------- knowledge base

def test_kb_upsert_and_lookup():
    kb = KnowledgeBase()
    r = _rud(0.0, 0.0)
    kb.upsert(r)
    assert kb.lookup(r.uuid) == r
    assert len(kb) == 1


def test_kb_keeps_newest_per_uuid():
    kb = KnowledgeBase()
    uid = uuid.uuid4()
    kb.upsert(_rud(0.0, 0.0, uid=uid, t=100))
    kb.upsert(_rud(1.0, 0.0, uid=uid, t=90))
    assert kb.lookup(uid).timestamp == 100
    kb.upsert(_rud(2.0, 0.0, uid=uid, t=110))
    assert kb.lookup(uid).timestamp == 110
    assert len(kb) == 1


def test_kb_distinct_uuids_accumulate():
    kb = KnowledgeBase()
    kb.upsert(_rud(0.0, 0.0))
    kb.upsert(_rud(1.0, 0.0))
    assert len(kb) == 2


def test_kb_most_recent_under_shuffled_streams():
    rng = np.random.default_rng(0)
    uids = [uuid.uuid4() for _ in range(5)]
    updates = [(uid, int(t)) for uid in uids
               for t in rng.integers(1, 10_000, 20)]
    rng.shuffle(updates)
    kb = KnowledgeBase(staleness_ms=10 ** 9)
    best: dict = {}
    for uid, t in updates:
        kb.upsert(_rud(0.0, 0.0, uid=uid, t=t))
        best[uid] = max(best.get(uid, 0), t)
    for uid in uids:
        assert kb.lookup(uid).timestamp == best[uid]


def test_kb_eviction():
    kb = KnowledgeBase(staleness_ms=500)
    uid = uuid.uuid4()
    kb.upsert(_rud(0.0, 0.0, uid=uid, t=10_000))
    assert kb.evict_stale(10_400) == 0
    assert kb.evict_stale(10_501) == 1
    assert kb.lookup(uid) is None


# ---------------------------------------------------- situation detection

def _kb_with_scene(merge_x=50.0, ahead_x=90.0, behind_x=10.0,
                   extra=None) -> tuple[KnowledgeBase, dict]:
    kb = KnowledgeBase(staleness_ms=10 ** 9)
    ids = {"m": uuid.uuid4(), "p": uuid.uuid4(), "f": uuid.uuid4()}
    kb.upsert(_rud(merge_x, 3.5, uid=ids["m"]))
    kb.upsert(_rud(ahead_x, 0.0, uid=ids["p"]))
    kb.upsert(_rud(behind_x, 0.0, uid=ids["f"]))
    for r in extra or []:
        kb.upsert(r)
    return kb, ids


def test_detect_situation_roles():
    kb, ids = _kb_with_scene()
    sit = detect_situation(kb, GEO, CFG, now_ms=10_000)
    assert sit is not None
    assert sit.merging == ids["m"]
    assert sit.preceding == ids["p"]
    assert sit.following == ids["f"]


def test_detect_no_situation_on_empty_target_lane():
    kb = KnowledgeBase(staleness_ms=10 ** 9)
    kb.upsert(_rud(50.0, 3.5))
    assert detect_situation(kb, GEO, CFG, 10_000) is None


def test_detect_requires_bracket():
    kb = KnowledgeBase(staleness_ms=10 ** 9)
    kb.upsert(_rud(50.0, 3.5))
    kb.upsert(_rud(90.0, 0.0))  # only a vehicle ahead
    assert detect_situation(kb, GEO, CFG, 10_000) is None


def test_detect_picks_nearer_of_two_ahead():
    near, far = uuid.uuid4(), uuid.uuid4()
    kb, ids = _kb_with_scene(extra=[_rud(70.0, 0.0, uid=near),
                                    _rud(120.0, 0.0, uid=far)])
    sit = detect_situation(kb, GEO, CFG, 10_000)
    assert sit.preceding == near


def test_detect_unconnected_vehicle_never_merging():
    kb = KnowledgeBase(staleness_ms=10 ** 9)
    kb.upsert(_rud(50.0, 3.5, connected=False))
    kb.upsert(_rud(90.0, 0.0))
    kb.upsert(_rud(10.0, 0.0))
    assert detect_situation(kb, GEO, CFG, 10_000) is None


def test_unconnected_gap_vehicles_allowed():
    kb, ids = _kb_with_scene()
    kb.upsert(_rud(70.0, 0.0, connected=False))
    sit = detect_situation(kb, GEO, CFG, 10_000)
    assert sit is not None  # nearest ahead may be the unconnected one


def test_situation_needs_distinct_ids():
    uid = uuid.uuid4()
    with pytest.raises(ValueError):
        MergeSituation(merging=uid, preceding=uid, following=uuid.uuid4(),
                       detected_at=1, trigger_rud_timestamp=1)


# ----------------------------------------------------------------- audit

def test_audit_rejects_close_pass():
    merging = _rud(50.0, 0.0)
    other = _rud(60.0, 0.0, speed=0.0)
    wps = [Waypoint(timestamp=10_100, position=(58.0, 0.0), speed=10.0,
                    acceleration=0.0)]
    assert not audit_waypoints(wps, merging, [other], d_safe=10.0,
                               lane_width=3.5)


def test_audit_ignores_laterally_separated():
    merging = _rud(50.0, 3.5)
    other = _rud(52.0, 0.0, speed=10.0, t=10_000)
    wps = [Waypoint(timestamp=10_100, position=(53.0, 3.5), speed=10.0,
                    acceleration=0.0)]
    assert audit_waypoints(wps, merging, [other], d_safe=10.0, lane_width=3.5)


def test_audit_accepts_wide_gap():
    merging = _rud(50.0, 0.0)
    other = _rud(120.0, 0.0, speed=10.0)
    wps = [Waypoint(timestamp=10_000 + 100 * k, position=(50.0 + k, 0.0),
                    speed=10.0, acceleration=0.0) for k in range(1, 20)]
    assert audit_waypoints(wps, merging, [other], d_safe=10.0, lane_width=3.5)


# -------------------------------------------------------- recommendations

def _net():
    return QNetwork(DUELING, (21, 16, 16), rng=np.random.default_rng(1))


def test_build_recommendations_two_for_connected_follower():
    kb, ids = _kb_with_scene()
    sit = detect_situation(kb, GEO, CFG, 10_000)
    recos, outcome = build_recommendations(
        sit, kb, _net(), GEO, EnvParams(), StateNorms(), CFG, 10_000,
        np.random.default_rng(0))
    assert len(recos) == 2
    assert recos[0].target_uuid == ids["m"]
    assert recos[1].target_uuid == ids["f"]
    assert all(w.acceleration == CFG.coop_decel
               for w in recos[1].waypoints)
    assert recos[1].waypoints[-1].timestamp - recos[1].waypoints[0].timestamp \
        == round((CFG.coop_duration_s - EnvParams().dt) * 1000)


def test_build_recommendations_one_for_unconnected_follower():
    kb = KnowledgeBase(staleness_ms=10 ** 9)
    m, p, f = uuid.uuid4(), uuid.uuid4(), uuid.uuid4()
    kb.upsert(_rud(50.0, 3.5, uid=m))
    kb.upsert(_rud(90.0, 0.0, uid=p))
    kb.upsert(_rud(10.0, 0.0, uid=f, connected=False))
    sit = detect_situation(kb, GEO, CFG, 10_000)
    recos, _ = build_recommendations(
        sit, kb, _net(), GEO, EnvParams(), StateNorms(), CFG, 10_000,
        np.random.default_rng(0))
    assert len(recos) == 1
    assert recos[0].target_uuid == m


def test_build_recommendations_missing_role_errors():
    kb, ids = _kb_with_scene()
    sit = detect_situation(kb, GEO, CFG, 10_000)
    kb.remove(ids["p"])
    with pytest.raises(RecommendationError):
        build_recommendations(sit, kb, _net(), GEO, EnvParams(), StateNorms(),
                              CFG, 10_000, np.random.default_rng(0))


def test_build_recommendations_stale_kb_errors():
    kb, ids = _kb_with_scene()
    sit = detect_situation(kb, GEO, CFG, 10_000)
    with pytest.raises(RecommendationError):
        build_recommendations(sit, kb, _net(), GEO, EnvParams(), StateNorms(),
                              CFG, 11_000, np.random.default_rng(0))


def test_recommendations_deterministic_for_snapshot_and_seed():
    kb, _ = _kb_with_scene()
    sit = detect_situation(kb, GEO, CFG, 10_000)
    a, _ = build_recommendations(sit, kb, _net(), GEO, EnvParams(),
                                 StateNorms(), CFG, 10_000,
                                 np.random.default_rng(7))
    b, _ = build_recommendations(sit, kb, _net(), GEO, EnvParams(),
                                 StateNorms(), CFG, 10_000,
                                 np.random.default_rng(7))
    assert a == b


# ---------------------------------------------------------------- service

def _service(clock=None, published=None):
    clock = clock or _FakeClock()
    published = published if published is not None else []
    svc = OrchestratorService(
        net=_net(), geometry=GEO, config=OrchestratorConfig(),
        clock=clock,
        publish=lambda topic, mt, payload: published.append((topic, payload)))
    return svc, clock, published


def _feed_scene(svc, clock, ids=None):
    kb_ids = ids or {"m": uuid.uuid4(), "p": uuid.uuid4(), "f": uuid.uuid4()}
    t = clock.now_ms()
    for key, (x, y) in (("m", (50.0, 3.5)), ("p", (90.0, 0.0)),
                        ("f", (10.0, 0.0))):
        svc.on_message(V2XEnvelope(
            msg_type=MsgType.RUD_UPDATE, topic="gdm.ruds", seq=1, sent_at=t,
            payload=_rud(x, y, uid=kb_ids[key], t=t)))
    return kb_ids


def test_service_emits_recommendations_on_tick():
    svc, clock, published = _service()
    ids = _feed_scene(svc, clock)
    svc.on_tick()
    topics = [t for t, _ in published]
    assert recommendations_topic(ids["m"]) in topics
    assert recommendations_topic(ids["f"]) in topics


def test_feedback_accept_no_new_recommendation():
    svc, clock, published = _service()
    ids = _feed_scene(svc, clock)
    svc.on_tick()
    reco = published[0][1]
    n = len(published)
    svc.handle_feedback(ManeuverFeedback(
        recommendation_id=reco.recommendation_id, vehicle_uuid=ids["m"],
        verdict=Verdict.ACCEPT, timestamp=clock.now_ms()))
    assert len(published) == n
    state = svc.recommendations[reco.recommendation_id]
    assert state.status is RecoStatus.ACCEPTED


def test_feedback_reject_recomputes_with_new_id():
    svc, clock, published = _service()
    ids = _feed_scene(svc, clock)
    svc.on_tick()
    reco = published[0][1]
    svc.handle_feedback(ManeuverFeedback(
        recommendation_id=reco.recommendation_id, vehicle_uuid=ids["m"],
        verdict=Verdict.REJECT, timestamp=clock.now_ms()))
    new_recos = [p for t, p in published
                 if t == recommendations_topic(ids["m"])]
    assert len(new_recos) == 2
    assert new_recos[1].recommendation_id != reco.recommendation_id
    assert svc.recommendations[reco.recommendation_id].status \
        is RecoStatus.REJECTED


def test_fourth_reject_fails_situation():
    svc, clock, published = _service()
    ids = _feed_scene(svc, clock)
    svc.on_tick()
    for _ in range(CFG.retry_limit + 1):
        latest = [p for t, p in published
                  if t == recommendations_topic(ids["m"])][-1]
        svc.handle_feedback(ManeuverFeedback(
            recommendation_id=latest.recommendation_id,
            vehicle_uuid=ids["m"], verdict=Verdict.REJECT,
            timestamp=clock.now_ms()))
    merged = [p for t, p in published if t == recommendations_topic(ids["m"])]
    # initial + retry_limit recomputations, then the situation is failed
    assert len(merged) == 1 + CFG.retry_limit
    assert ids["m"] in svc.failed_situations
    svc.on_tick()
    assert len([p for t, p in published
                if t == recommendations_topic(ids["m"])]) == 1 + CFG.retry_limit


def test_unknown_feedback_counted():
    svc, clock, _ = _service()
    svc.handle_feedback(ManeuverFeedback(
        recommendation_id=uuid.uuid4(), vehicle_uuid=uuid.uuid4(),
        verdict=Verdict.ACCEPT, timestamp=clock.now_ms()))
    assert svc.unknown_feedback == 1


def test_emitted_recommendations_always_pass_audit():
    rng = np.random.default_rng(12)
    insts = generate_synthetic(31, 1)
    svc, clock, published = _service()
    ids = _feed_scene(svc, clock)
    svc.on_tick()
    from lanemerge.orchestrator import audit_waypoints as audit
    for topic, reco in published:
        if not hasattr(reco, "waypoints"):
            continue
        merging = svc.kb.lookup(reco.target_uuid)
        others = [svc.kb.lookup(i) for k, i in ids.items()
                  if i != reco.target_uuid]
        assert audit(list(reco.waypoints), merging,
                     [o for o in others if o is not None],
                     svc.config.d_safe, GEO.lane_width)
