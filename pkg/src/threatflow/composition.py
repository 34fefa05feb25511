"""Candidate components, composition plans, ranking and plan verification.

Every service task of a process has one or more candidate components in a
registry; a composition plan is one total binding of tasks to components.
Plans are enumerated exhaustively (the count is the Cartesian product of
candidate list sizes), ranked by a weighted mean of trustworthiness, QoS
and cost, and verified against adaptation rules plus the latest threat
state. All functions here are pure; ThreatState is the one mutable type
and hands out snapshots.
"""

from __future__ import annotations

import itertools
import json
import threading
from dataclasses import dataclass, replace

from . import bpmn
from .bus import EventType
from .errors import (
    EmptyInputError,
    MissingCandidatesError,
    ParseError,
    PlanCountExceededError,
    ValidationError,
)
from .rules import AdaptationRule

PLAN_CEILING = 10_000


@dataclass(frozen=True)
class ComponentDescriptor:
    id: str
    provider: str
    operation_ref: str
    trustworthiness: float
    latency_score: float
    cost: float = 0.0

    def validate(self) -> None:
        if not self.id:
            raise ValidationError("component id is empty")
        if not 0.0 <= self.trustworthiness <= 1.0:
            raise ValidationError(f"component {self.id!r} trustworthiness outside [0,1]")
        if not 0.0 <= self.latency_score <= 1.0:
            raise ValidationError(f"component {self.id!r} latencyScore outside [0,1]")
        if self.cost < 0:
            raise ValidationError(f"component {self.id!r} cost is negative")


@dataclass(frozen=True)
class CandidateRegistry:
    """Ordered candidate lists per task id; order feeds plan enumeration."""

    entries: tuple[tuple[str, tuple[ComponentDescriptor, ...]], ...] = ()

    def candidates(self, task_id: str) -> tuple[ComponentDescriptor, ...]:
        for tid, comps in self.entries:
            if tid == task_id:
                return comps
        return ()

    def component(self, component_id: str) -> ComponentDescriptor | None:
        for _, comps in self.entries:
            for c in comps:
                if c.id == component_id:
                    return c
        return None

    def all_components(self) -> list[ComponentDescriptor]:
        out: dict[str, ComponentDescriptor] = {}
        for _, comps in self.entries:
            for c in comps:
                out.setdefault(c.id, c)
        return list(out.values())

    def validate(self) -> None:
        seen_tasks: set[str] = set()
        for task_id, comps in self.entries:
            if task_id in seen_tasks:
                raise ValidationError(f"registry lists task {task_id!r} twice")
            seen_tasks.add(task_id)
            if not comps:
                raise ValidationError(f"registry entry for task {task_id!r} is empty")
            seen_ids: set[str] = set()
            for c in comps:
                c.validate()
                if c.id in seen_ids:
                    raise ValidationError(f"task {task_id!r} lists component {c.id!r} twice")
                seen_ids.add(c.id)

    def validate_against(self, pm: bpmn.ProcessModel) -> None:
        self.validate()
        for task in pm.service_tasks():
            comps = self.candidates(task.id)
            if not comps:
                raise MissingCandidatesError(f"task {task.id!r} has no candidate components")
            for c in comps:
                if task.operation_ref and c.operation_ref != task.operation_ref:
                    raise ValidationError(
                        f"component {c.id!r} implements {c.operation_ref!r} but task "
                        f"{task.id!r} requires {task.operation_ref!r}"
                    )


@dataclass(frozen=True)
class CompositionPlan:
    plan_id: str
    bindings: tuple[tuple[str, str], ...]  # (task id, component id) in document order
    rank_score: float = 0.0

    def binding_for(self, task_id: str) -> str | None:
        for tid, comp_id in self.bindings:
            if tid == task_id:
                return comp_id
        return None

    def component_ids(self) -> set[str]:
        return {comp_id for _, comp_id in self.bindings}


@dataclass(frozen=True)
class RankingCriteria:
    w_trust: float
    w_qos: float
    w_cost: float

    def validate(self) -> None:
        if min(self.w_trust, self.w_qos, self.w_cost) < 0:
            raise ValidationError("ranking weights must be non-negative")
        if self.w_trust + self.w_qos + self.w_cost <= 0:
            raise ValidationError("ranking weights must not all be zero")


@dataclass(frozen=True)
class Verdict:
    passed: bool
    reasons: tuple[str, ...] = ()


class ThreatState:
    """Latest (component, threat) probability levels, newest timestamp wins;
    stale updates (older timestamp for a known key) are ignored."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._levels: dict[tuple[str, str], tuple[float, float]] = {}

    def update(self, component_id: str, threat_id: str, probability: float, timestamp: float) -> bool:
        if not 0.0 <= probability <= 1.0:
            raise ValidationError(f"probability {probability} outside [0,1]")
        key = (component_id, threat_id)
        with self._lock:
            current = self._levels.get(key)
            if current is not None and timestamp < current[1]:
                return False
            self._levels[key] = (probability, timestamp)
            return True

    def level(self, component_id: str, threat_id: str) -> float | None:
        with self._lock:
            entry = self._levels.get((component_id, threat_id))
        return entry[0] if entry else None

    def snapshot(self) -> dict[tuple[str, str], float]:
        with self._lock:
            return {key: prob for key, (prob, _) in self._levels.items()}


def generate_plans(
    pm: bpmn.ProcessModel,
    reg: CandidateRegistry,
    ceiling: int = PLAN_CEILING,
) -> list[CompositionPlan]:
    """All total bindings, exactly one plan per element of the Cartesian
    product of candidate lists; planId concatenates the bound component ids
    in task document order."""
    reg.validate_against(pm)
    tasks = [n for n in bpmn.document_order(pm) if isinstance(n, bpmn.ServiceTask)]
    count = 1
    for task in tasks:
        count *= len(reg.candidates(task.id))
    if count > ceiling:
        raise PlanCountExceededError(f"{count} plans exceed the ceiling of {ceiling}")

    plans: list[CompositionPlan] = []
    for combo in itertools.product(*(reg.candidates(t.id) for t in tasks)):
        bindings = tuple((task.id, comp.id) for task, comp in zip(tasks, combo))
        plan_id = "+".join(comp.id for comp in combo)
        plans.append(CompositionPlan(plan_id=plan_id, bindings=bindings))
    return plans


def _mean(values: list[float]) -> float:
    return sum(values) / len(values) if values else 0.0


def rank_plans(
    plans: list[CompositionPlan],
    criteria: RankingCriteria,
    reg: CandidateRegistry,
) -> list[CompositionPlan]:
    """Score = (wT*meanTrust + wQ*meanQos - wC*meanCost/maxMeanCost) / (wT+wQ+wC),
    sorted best first, ties broken by planId ascending."""
    if not plans:
        raise EmptyInputError("no plans to rank")
    criteria.validate()

    def bound(plan: CompositionPlan) -> list[ComponentDescriptor]:
        comps = []
        for task_id, comp_id in plan.bindings:
            c = reg.component(comp_id)
            if c is None:
                raise ValidationError(f"plan {plan.plan_id!r} binds unknown component {comp_id!r}")
            comps.append(c)
        return comps

    mean_costs = {p.plan_id: _mean([c.cost for c in bound(p)]) for p in plans}
    max_mean_cost = max(mean_costs.values())
    total = criteria.w_trust + criteria.w_qos + criteria.w_cost

    scored: list[CompositionPlan] = []
    for p in plans:
        comps = bound(p)
        norm_cost = mean_costs[p.plan_id] / max_mean_cost if max_mean_cost > 0 else 0.0
        score = (
            criteria.w_trust * _mean([c.trustworthiness for c in comps])
            + criteria.w_qos * _mean([c.latency_score for c in comps])
            - criteria.w_cost * norm_cost
        ) / total
        scored.append(replace(p, rank_score=score))
    return sorted(scored, key=lambda p: (-p.rank_score, p.plan_id))


def verify_plan(
    plan: CompositionPlan,
    pm: bpmn.ProcessModel,
    rules: list[AdaptationRule],
    levels: dict[tuple[str, str], float],
) -> Verdict:
    """Fails iff a ThreatLevelChange rule's predicate is satisfied by the
    latest probability recorded for (bound component, rule threat)."""
    reasons: list[str] = []
    for rule in rules:
        if rule.event_type is not EventType.THREAT_LEVEL_CHANGE:
            continue
        if rule.predicate is None or rule.threat_id is None:
            continue
        comp_id = plan.binding_for(rule.subject_task_id)
        if comp_id is None:
            continue
        probability = levels.get((comp_id, rule.threat_id))
        if probability is None:
            continue
        if rule.predicate.satisfied_by(probability):
            reasons.append(
                f"task {rule.subject_task_id!r} binds {comp_id!r} whose threat "
                f"{rule.threat_id!r} is at probability {probability} "
                f"({rule.predicate.comparator.value} {rule.predicate.threshold}, rule {rule.rule_id!r})"
            )
    return Verdict(passed=not reasons, reasons=tuple(reasons))


# --- .registry and .criteria file formats ----------------------------------------

def registry_from_record(raw: dict) -> CandidateRegistry:
    try:
        entries = []
        for task_id, comps in raw["tasks"].items():
            descriptors = tuple(
                ComponentDescriptor(
                    id=c["id"],
                    provider=c.get("provider", ""),
                    operation_ref=c.get("operationRef", ""),
                    trustworthiness=float(c["trustworthiness"]),
                    latency_score=float(c["latencyScore"]),
                    cost=float(c.get("cost", 0.0)),
                )
                for c in comps
            )
            entries.append((task_id, descriptors))
    except KeyError as exc:
        raise ValidationError(f"registry record missing field {exc}")
    reg = CandidateRegistry(entries=tuple(entries))
    reg.validate()
    return reg


def load_registry(text: str) -> CandidateRegistry:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed registry file: {exc.msg}", (exc.lineno, exc.colno))
    return registry_from_record(raw)


def dump_registry(reg: CandidateRegistry) -> str:
    raw = {
        "tasks": {
            task_id: [
                {
                    "id": c.id,
                    "provider": c.provider,
                    "operationRef": c.operation_ref,
                    "trustworthiness": c.trustworthiness,
                    "latencyScore": c.latency_score,
                    "cost": c.cost,
                }
                for c in comps
            ]
            for task_id, comps in reg.entries
        }
    }
    return json.dumps(raw, indent=2, sort_keys=True) + "\n"


def load_criteria(text: str) -> RankingCriteria:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed criteria file: {exc.msg}", (exc.lineno, exc.colno))
    try:
        criteria = RankingCriteria(
            w_trust=float(raw["wTrust"]),
            w_qos=float(raw["wQos"]),
            w_cost=float(raw["wCost"]),
        )
    except KeyError as exc:
        raise ValidationError(f"criteria record missing field {exc}")
    criteria.validate()
    return criteria


def dump_criteria(criteria: RankingCriteria) -> str:
    raw = {"wTrust": criteria.w_trust, "wQos": criteria.w_qos, "wCost": criteria.w_cost}
    return json.dumps(raw, indent=2, sort_keys=True) + "\n"
