"""Recommendation service: knowledge base of current road users, merge
situation detection, policy-driven trajectory recommendations with a
pre-send safety audit, cooperative slow-down advice for the following
vehicle, and feedback-driven recomputation."""

from __future__ import annotations

import math
import time
import uuid as uuidlib
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional
from uuid import UUID

import numpy as np

from .agent import StateNorms, policy_rollout
from .env import (EnvParams, InstanceSource, LaneGeometry, MergeInstance,
                  Outcome, ROLE_FOLLOWING, ROLE_MERGING, ROLE_PRECEDING,
                  register_geometry)
from .fusion import extrapolate
from .kinematics import advance
from .qnet import QNetwork
from .types import (LogRecord, ManeuverFeedback, MsgType, new_uuid,
                    RoadUserDescription, TrajectoryRecommendation,
                    V2XEnvelope, Verdict, Waypoint)

TOPIC_FUSED = "gdm.ruds"
TOPIC_FEEDBACK = "feedback"
TOPIC_LOGS = "logs"


def recommendations_topic(vehicle_uuid: UUID) -> str:
    return f"recommendations.{vehicle_uuid}"


@dataclass(frozen=True)
class OrchestratorConfig:
    staleness_ms: int = 500
    d_safe: float = 10.0
    retry_limit: int = 3
    replan_position_m: float = 2.0
    replan_speed_ms: float = 1.0
    coop_decel: float = -0.5
    coop_duration_s: float = 2.0
    # coordination zone (x0, y0, x1, y1); merge situations are only opened
    # for connected merge-lane vehicles inside it
    zone: tuple[float, float, float, float] = (-100.0, -20.0, 1000.0, 20.0)
    tick_ms: int = 100
    seed: int = 0


class KnowledgeBase:
    """Latest description per road user, evicted once stale."""

    def __init__(self, staleness_ms: int = 500):
        self.staleness_ms = staleness_ms
        self._entries: dict[UUID, RoadUserDescription] = {}

    def upsert(self, rud: RoadUserDescription) -> None:
        cur = self._entries.get(rud.uuid)
        if cur is None or rud.timestamp >= cur.timestamp:
            self._entries[rud.uuid] = rud

    def lookup(self, uid: UUID) -> Optional[RoadUserDescription]:
        return self._entries.get(uid)

    def remove(self, uid: UUID) -> None:
        self._entries.pop(uid, None)

    def evict_stale(self, now_ms: int) -> int:
        cutoff = now_ms - self.staleness_ms
        stale = [k for k, r in self._entries.items() if r.timestamp < cutoff]
        for k in stale:
            del self._entries[k]
        return len(stale)

    def snapshot(self) -> list[RoadUserDescription]:
        return sorted(self._entries.values(), key=lambda r: str(r.uuid))

    def __len__(self) -> int:
        return len(self._entries)


@dataclass(frozen=True)
class MergeSituation:
    merging: UUID
    preceding: UUID
    following: UUID
    detected_at: int
    trigger_rud_timestamp: int

    def __post_init__(self) -> None:
        if len({self.merging, self.preceding, self.following}) != 3:
            raise ValueError("situation needs three distinct road users")

    @property
    def key(self) -> UUID:
        return self.merging


def _on_lane(rud: RoadUserDescription, lane_y: float, width: float) -> bool:
    return abs(rud.y - lane_y) <= width / 2.0


def detect_situation(kb: KnowledgeBase, geometry: LaneGeometry,
                     config: OrchestratorConfig,
                     now_ms: int) -> Optional[MergeSituation]:
    """A connected vehicle on the merge lane inside the coordination zone,
    bracketed by the nearest target-lane vehicles ahead and behind."""
    x0, y0, x1, y1 = config.zone
    candidates = []
    for rud in kb.snapshot():
        if not rud.connected:
            continue
        if not _on_lane(rud, geometry.merge_lane_y, geometry.lane_width):
            continue
        if not (x0 <= rud.x <= x1 and y0 <= rud.y <= y1):
            continue
        if rud.x >= geometry.merge_end_x:
            continue
        candidates.append(rud)
    if not candidates:
        return None
    merging = max(candidates, key=lambda r: (r.x, str(r.uuid)))

    ahead: Optional[RoadUserDescription] = None
    behind: Optional[RoadUserDescription] = None
    for rud in kb.snapshot():
        if rud.uuid == merging.uuid:
            continue
        if not _on_lane(rud, geometry.target_lane_y, geometry.lane_width):
            continue
        if rud.x > merging.x and (ahead is None or rud.x < ahead.x):
            ahead = rud
        elif rud.x < merging.x and (behind is None or rud.x > behind.x):
            behind = rud
    if ahead is None or behind is None:
        return None
    return MergeSituation(merging=merging.uuid, preceding=ahead.uuid,
                          following=behind.uuid, detected_at=now_ms,
                          trigger_rud_timestamp=merging.timestamp)


# ----------------------------------------------------------- safety audit

def _predict(rud: RoadUserDescription, dt: float) -> tuple[float, float]:
    x, y, _ = advance(rud.x, rud.y, rud.speed, 0.0, rud.heading, dt)
    return x, y


def audit_waypoints(waypoints: list[Waypoint], merging: RoadUserDescription,
                    others: list[RoadUserDescription], d_safe: float,
                    lane_width: float) -> bool:
    """True iff every waypoint keeps a bumper-to-bumper gap of at least
    d_safe to each (constant-speed replayed) vehicle it laterally overlaps
    with."""
    t0 = min(o.timestamp for o in others) if others else 0
    for wp in waypoints:
        for other in others:
            dt = (wp.timestamp - other.timestamp) / 1000.0
            ox, oy = _predict(other, dt)
            if abs(wp.position[1] - oy) > lane_width / 2.0:
                continue
            gap = abs(wp.position[0] - ox) - (merging.length + other.length) / 2.0
            if gap < d_safe:
                return False
    return True


# ------------------------------------------------------- recommendations

class RecoStatus(Enum):
    SENT = "sent"
    ACCEPTED = "accepted"
    REJECTED = "rejected"
    ABORTED = "aborted"
    SUPERSEDED = "superseded"


@dataclass
class RecommendationState:
    recommendation: TrajectoryRecommendation
    situation_key: UUID
    status: RecoStatus = RecoStatus.SENT
    retry_count: int = 0


class RecommendationError(ValueError):
    """Roles missing from the knowledge base or the whole base is stale."""


def build_recommendations(situation: MergeSituation, kb: KnowledgeBase,
                          net: QNetwork, geometry: LaneGeometry,
                          env_params: EnvParams, norms: StateNorms,
                          config: OrchestratorConfig, now_ms: int,
                          rng: np.random.Generator
                          ) -> tuple[list[TrajectoryRecommendation], Outcome]:
    """Roll the policy out from the current knowledge-base snapshot.

    Returns the recommendation for the merging vehicle plus, when the
    following vehicle is connected, a gap-opening deceleration profile for
    it. Raises RecommendationError when role descriptions are missing or
    expired.
    """
    ruds = {}
    for role, uid in ((ROLE_MERGING, situation.merging),
                      (ROLE_PRECEDING, situation.preceding),
                      (ROLE_FOLLOWING, situation.following)):
        rud = kb.lookup(uid)
        if rud is None:
            raise RecommendationError(f"{role} road user missing from base")
        if now_ms - rud.timestamp > config.staleness_ms:
            raise RecommendationError(f"{role} description is stale")
        ruds[role] = rud

    # align the snapshot on one timestamp and run the policy forward from it
    t_snap = max(1, now_ms)
    frame = tuple(sorted((extrapolate(r, t_snap) for r in ruds.values()),
                         key=lambda r: str(r.uuid)))
    instance = MergeInstance(
        instance_id=f"live-{situation.merging}-{t_snap}",
        timestep=env_params.dt, frames=(frame,),
        roles={ROLE_MERGING: situation.merging,
               ROLE_PRECEDING: situation.preceding,
               ROLE_FOLLOWING: situation.following},
        source=InstanceSource.SYNTHETIC)
    register_geometry(instance.instance_id, geometry)
    rollout = policy_rollout(net, instance, params=env_params, norms=norms,
                             geometry=geometry)
    if not rollout.waypoints:
        raise RecommendationError("policy produced an empty plan")

    merging_reco = TrajectoryRecommendation(
        recommendation_id=new_uuid(rng), target_uuid=situation.merging,
        waypoints=tuple(rollout.waypoints), created_at=t_snap,
        origin_rud_timestamp=situation.trigger_rud_timestamp)
    out = [merging_reco]

    follower = ruds[ROLE_FOLLOWING]
    if follower.connected:
        steps = max(1, round(config.coop_duration_s / env_params.dt))
        wps = []
        x, y, v = follower.x, follower.y, follower.speed
        for k in range(1, steps + 1):
            x, y, v = advance(x, y, v, config.coop_decel, follower.heading,
                              env_params.dt)
            wps.append(Waypoint(
                timestamp=t_snap + round(k * env_params.dt * 1000.0),
                position=(x, y), speed=v, acceleration=config.coop_decel))
        out.append(TrajectoryRecommendation(
            recommendation_id=new_uuid(rng), target_uuid=follower.uuid,
            waypoints=tuple(wps), created_at=t_snap,
            origin_rud_timestamp=situation.trigger_rud_timestamp))
    return out, rollout.outcome


class OrchestratorService:
    """Clocked component around the knowledge base and the policy."""

    def __init__(self, net: QNetwork, geometry: LaneGeometry,
                 config: OrchestratorConfig, clock,
                 publish: Callable, send_log: Optional[Callable] = None,
                 env_params: EnvParams = EnvParams(),
                 norms: StateNorms = StateNorms()):
        self.net = net
        self.geometry = geometry
        self.config = config
        self.clock = clock
        self.publish = publish
        self.send_log = send_log
        self.env_params = replace(env_params, d_safe=config.d_safe)
        self.norms = norms
        self.kb = KnowledgeBase(config.staleness_ms)
        self.rng = np.random.default_rng(config.seed)
        self.recommendations: dict[UUID, RecommendationState] = {}
        self.active_plan: dict[UUID, TrajectoryRecommendation] = {}
        self.reject_counts: dict[UUID, int] = {}
        self.failed_situations: set[UUID] = set()
        self.audit_rejections = 0
        self.plan_outcomes: dict[str, int] = {}
        self.unknown_feedback = 0

    @property
    def tick_interval_ms(self) -> int:
        return self.config.tick_ms

    def topics(self) -> list[str]:
        return [TOPIC_FUSED, TOPIC_FEEDBACK]

    # -- inbound

    def on_message(self, env: V2XEnvelope) -> None:
        if env.msg_type is MsgType.RUD_UPDATE and env.topic == TOPIC_FUSED:
            self.kb.upsert(env.payload)
        elif env.msg_type is MsgType.FEEDBACK:
            self.handle_feedback(env.payload)

    def on_tick(self) -> None:
        now = self.clock.now_ms()
        self.kb.evict_stale(now)
        situation = detect_situation(self.kb, self.geometry, self.config, now)
        if situation is None:
            return
        if situation.key in self.failed_situations:
            return
        plan = self.active_plan.get(situation.merging)
        if plan is None or self._deviates(situation.merging, plan):
            self._compute_and_send(situation, supersede=plan is not None)

    # -- replanning

    def _deviates(self, merging_uuid: UUID,
                  plan: TrajectoryRecommendation) -> bool:
        rud = self.kb.lookup(merging_uuid)
        if rud is None:
            return False
        wps = plan.waypoints
        if rud.timestamp > wps[-1].timestamp:
            return True
        nearest = min(wps, key=lambda w: abs(w.timestamp - rud.timestamp))
        dx = rud.x - nearest.position[0]
        dy = rud.y - nearest.position[1]
        return (math.hypot(dx, dy) > self.config.replan_position_m
                or abs(rud.speed - nearest.speed) > self.config.replan_speed_ms)

    def _compute_and_send(self, situation: MergeSituation,
                          supersede: bool) -> int:
        t0 = time.perf_counter()
        try:
            recos, outcome = build_recommendations(
                situation, self.kb, self.net, self.geometry, self.env_params,
                self.norms, self.config, self.clock.now_ms(), self.rng)
        except RecommendationError:
            return 0
        compute_us = (time.perf_counter() - t0) * 1e6
        self.plan_outcomes[outcome.value] = \
            self.plan_outcomes.get(outcome.value, 0) + 1

        merging_rud = self.kb.lookup(situation.merging)
        others = [r for r in (self.kb.lookup(situation.preceding),
                              self.kb.lookup(situation.following))
                  if r is not None]
        if not audit_waypoints(list(recos[0].waypoints), merging_rud, others,
                               self.config.d_safe, self.geometry.lane_width):
            self.audit_rejections += 1
            self._log(situation, "reco_audit_rejected", compute_us)
            return 0

        if supersede:
            old = self.active_plan.get(situation.merging)
            if old is not None:
                state = self.recommendations.get(old.recommendation_id)
                if state is not None and state.status is RecoStatus.SENT:
                    state.status = RecoStatus.SUPERSEDED
        sent = 0
        for reco in recos:
            self.recommendations[reco.recommendation_id] = \
                RecommendationState(reco, situation.key)
            self.publish(recommendations_topic(reco.target_uuid),
                         MsgType.RECOMMENDATION, reco)
            sent += 1
            if self.send_log is not None:
                self.send_log(LogRecord(
                    component="orchestrator", event="reco_computed",
                    correlation_id=str(reco.recommendation_id),
                    t=max(1, self.clock.now_ms()),
                    attributes={"origin_uuid": str(situation.merging),
                                "origin_rud_timestamp":
                                    reco.origin_rud_timestamp,
                                "target_uuid": str(reco.target_uuid),
                                "compute_us": compute_us,
                                "plan_outcome": outcome.value}))
        self.active_plan[situation.merging] = recos[0]
        return sent

    def _log(self, situation: MergeSituation, event: str,
             compute_us: float) -> None:
        if self.send_log is None:
            return
        self.send_log(LogRecord(
            component="orchestrator", event=event,
            correlation_id=str(situation.merging),
            t=max(1, self.clock.now_ms()),
            attributes={"compute_us": compute_us}))

    # -- feedback

    def handle_feedback(self, fb: ManeuverFeedback) -> None:
        state = self.recommendations.get(fb.recommendation_id)
        if state is None:
            self.unknown_feedback += 1
            return
        if state.status in (RecoStatus.ACCEPTED, RecoStatus.REJECTED,
                            RecoStatus.ABORTED):
            return  # terminal statuses absorb duplicates
        if fb.verdict is Verdict.ACCEPT:
            state.status = RecoStatus.ACCEPTED
            self.reject_counts.pop(state.situation_key, None)
            return
        state.status = (RecoStatus.REJECTED if fb.verdict is Verdict.REJECT
                        else RecoStatus.ABORTED)
        count = self.reject_counts.get(state.situation_key, 0) + 1
        self.reject_counts[state.situation_key] = count
        if count > self.config.retry_limit:
            self.failed_situations.add(state.situation_key)
            self._log_failure(state.situation_key)
            return
        rud = self.kb.lookup(state.situation_key)
        if rud is None:
            return
        now = self.clock.now_ms()
        situation = detect_situation(self.kb, self.geometry, self.config, now)
        if situation is None or situation.key != state.situation_key:
            return
        self._compute_and_send(situation, supersede=True)

    def _log_failure(self, key: UUID) -> None:
        if self.send_log is None:
            return
        self.send_log(LogRecord(
            component="orchestrator", event="situation_failed",
            correlation_id=str(key), t=max(1, self.clock.now_ms()),
            attributes={"rejects": self.reject_counts.get(key, 0)}))
