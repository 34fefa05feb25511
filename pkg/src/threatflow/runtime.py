"""Service runtime environment: deploy, execute, monitor, adapt.

A deployment binds a process model to ranked composition plans, registers
the bus subscriptions its rules need, and then runs process instances with
token semantics. Incoming notifications update the threat state, are
matched against the rules, and may trigger stop, recomposition, an
auxiliary process launch, or an outbound notify.

All public entry points of one DeployedService serialize on a single lock:
notification handling is FIFO and rule evaluation race-free. Separate
services are independent.
"""

from __future__ import annotations

import itertools
import json
import threading
import time
from collections import deque
from dataclasses import dataclass
from enum import Enum

from . import bpmn
from .bus import Broker, EventType, Notification, Publisher, Subscription
from .composition import (
    CandidateRegistry,
    CompositionPlan,
    RankingCriteria,
    ThreatState,
    generate_plans,
    rank_plans,
    verify_plan,
)
from .errors import (
    ComponentFault,
    DeploymentError,
    MissingCandidatesError,
    ValidationError,
)
from .rules import (
    ActionKind,
    AdaptationRule,
    InstancePosition,
    ScopeKind,
    TaskStatus,
    derive_subscriptions,
    evaluate,
)


class EventKind(Enum):
    TASK_STARTED = "taskStarted"
    TASK_COMPLETED = "taskCompleted"
    TASK_FAILED = "taskFailed"
    BOUNDARY_TRIGGERED = "boundaryTriggered"
    RULE_MATCHED = "ruleMatched"
    ACTION_TAKEN = "actionTaken"
    PLAN_SWITCHED = "planSwitched"
    NOTIFICATION_RECEIVED = "notificationReceived"


@dataclass(frozen=True)
class ExecutionEvent:
    seq: int
    kind: EventKind
    detail: dict
    at: float

    def to_record(self) -> dict:
        return {"seq": self.seq, "kind": self.kind.value, "detail": dict(self.detail), "at": self.at}


class Outcome(Enum):
    IN_PROGRESS = "inProgress"
    COMPLETED = "completed"
    STOPPED_BY_RULE = "stoppedByRule"
    FAILED = "failed"


class ServiceStatus(Enum):
    RUNNING = "running"
    STOPPED = "stopped"


class ComponentInvoker:
    """How the runtime calls a bound component. Implementations raise
    ComponentFault to signal a failure carrying an error id that boundary
    events can catch; delay_steps lets a component's invocation span
    several token steps (keeps the task active in between)."""

    def invoke(self, component_id: str, operation_ref: str, inputs: dict) -> object:
        raise NotImplementedError

    def delay_steps(self, component_id: str, operation_ref: str) -> int:
        return 0


@dataclass(frozen=True)
class RecomposeResult:
    switched: bool
    new_plan_id: str | None = None


class ProcessInstance:
    def __init__(
        self,
        instance_id: str,
        plan_id: str,
        bindings: dict[str, str],
        variables: dict,
        task_ids: list[str],
        start_node: str,
    ):
        self.instance_id = instance_id
        self.plan_id = plan_id
        self.bindings = bindings
        self.variables = variables
        self.outcome = Outcome.IN_PROGRESS
        self.report: dict | None = None
        self.error: str | None = None
        self.event_log: list[ExecutionEvent] = []
        self.task_status: dict[str, TaskStatus] = {tid: TaskStatus.NOT_STARTED for tid in task_ids}
        self._task_ids = task_ids
        self._tokens: deque[str] = deque([start_node])
        self._join_arrivals: dict[str, int] = {}
        self._delay_left: dict[str, int] = {}
        self._end_reached = False
        self.steps = 0

    def position(self) -> InstancePosition:
        return InstancePosition(
            task_status=tuple((tid, self.task_status[tid]) for tid in self._task_ids)
        )


class DeployedService:
    def __init__(
        self,
        service_id: str,
        process: bpmn.ProcessModel,
        registry: CandidateRegistry,
        rules: list[AdaptationRule],
        criteria: RankingCriteria,
        plans: list[CompositionPlan],
        active_plan_id: str,
        broker: Broker,
        invoker: ComponentInvoker,
        subscriptions: list[str],
        clock=None,
        aux: dict[str, "DeployedService"] | None = None,
    ):
        self.service_id = service_id
        self.process = process
        self.registry = registry
        self.rules = sorted(rules, key=lambda r: r.rule_id)
        self.criteria = criteria
        self.plans = plans
        self.active_plan_id = active_plan_id
        self.threat_state = ThreatState()
        self.status = ServiceStatus.RUNNING
        self.instances: dict[str, ProcessInstance] = {}
        self.event_log: list[ExecutionEvent] = []
        self.subscriptions = subscriptions
        self.aux = aux or {}
        self.broker = broker
        self.invoker = invoker
        self._clock = clock or time.time
        self._publisher = Publisher(broker, service_id, clock=self._clock)
        self._lock = threading.RLock()
        self._event_counter = itertools.count(1)
        self._instance_counter = itertools.count(1)
        # flagged component -> threat id that triggered the flag (None = manual);
        # a flagged pair re-enters ranking once its level drops below every
        # applicable rule threshold
        self._flagged: dict[str, str | None] = {}
        # adjacency, frozen at deploy time
        self._out: dict[str, list[str]] = {n.id: [] for n in process.nodes}
        self._join_indegree: dict[str, int] = {}
        for f in sorted(process.flows, key=lambda f: f.id):
            self._out[f.from_node].append(f.to_node)
        for f in process.flows:
            self._join_indegree[f.to_node] = self._join_indegree.get(f.to_node, 0) + 1
        self._task_ids = [
            n.id for n in bpmn.document_order(process) if isinstance(n, bpmn.ServiceTask)
        ]

    # -- observability

    def _log(self, kind: EventKind, detail: dict, instance: ProcessInstance | None = None) -> None:
        event = ExecutionEvent(
            seq=next(self._event_counter), kind=kind, detail=detail, at=self._clock()
        )
        if instance is not None:
            instance.event_log.append(event)
        else:
            self.event_log.append(event)

    def merged_log(self) -> list[ExecutionEvent]:
        events = list(self.event_log)
        for inst in self.instances.values():
            events.extend(inst.event_log)
        return sorted(events, key=lambda e: e.seq)

    # -- plan helpers

    def plan_by_id(self, plan_id: str) -> CompositionPlan:
        for p in self.plans:
            if p.plan_id == plan_id:
                return p
        raise ValidationError(f"no plan {plan_id!r} in service {self.service_id!r}")

    def active_plan(self) -> CompositionPlan:
        return self.plan_by_id(self.active_plan_id)

    def required_inputs(self) -> list[str]:
        tasks = self.process.service_tasks()
        produced = {t.output_var for t in tasks if t.output_var}
        consumed = {v for t in tasks for v in t.input_vars}
        return sorted(consumed - produced)

    def live_instances(self) -> list[ProcessInstance]:
        return [i for i in self.instances.values() if i.outcome is Outcome.IN_PROGRESS]

    # -- instance execution

    def start_instance(self, variables: dict, run: bool = True) -> str:
        with self._lock:
            if self.status is not ServiceStatus.RUNNING:
                raise DeploymentError(
                    f"service {self.service_id!r} is stopped; new instances refused"
                )
            missing = [v for v in self.required_inputs() if v not in variables]
            if missing:
                raise ValidationError(f"missing required input variables: {', '.join(missing)}")
            instance_id = f"i{next(self._instance_counter)}"
            plan = self.active_plan()
            inst = ProcessInstance(
                instance_id=instance_id,
                plan_id=plan.plan_id,
                bindings=dict(plan.bindings),
                variables=dict(variables),
                task_ids=self._task_ids,
                start_node=self.process.start_event().id,
            )
            self.instances[instance_id] = inst
            if run:
                self.run_instance(instance_id)
            return instance_id

    def run_instance(self, instance_id: str) -> ProcessInstance:
        with self._lock:
            inst = self.instances[instance_id]
            budget = 2 * len(self.process.nodes) + len(self.process.flows) + 8
            for task_id in self._task_ids:
                comp_id = inst.bindings.get(task_id)
                task = self.process.node_by_id(task_id)
                if comp_id:
                    budget += self.invoker.delay_steps(comp_id, task.operation_ref)
            while inst.outcome is Outcome.IN_PROGRESS and inst._tokens:
                if inst.steps >= budget:
                    inst.outcome = Outcome.FAILED
                    inst.error = f"step budget of {budget} exhausted"
                    break
                self.step(instance_id)
            return inst

    def step(self, instance_id: str) -> ProcessInstance:
        """One token move. Start emits, tasks invoke their bound component,
        forks duplicate, joins wait for all incoming tokens, end consumes."""
        with self._lock:
            inst = self.instances[instance_id]
            if inst.outcome is not Outcome.IN_PROGRESS:
                raise ValidationError(f"instance {instance_id!r} is not in progress")
            if not inst._tokens:
                raise ValidationError(f"instance {instance_id!r} has no tokens to move")
            node_id = inst._tokens.popleft()
            node = self.process.node_by_id(node_id)
            inst.steps += 1

            if isinstance(node, bpmn.StartEvent):
                self._forward(inst, node_id)
            elif isinstance(node, bpmn.EndEvent):
                inst._end_reached = True
            elif isinstance(node, bpmn.ParallelGateway):
                if node.direction is bpmn.GatewayDirection.FORK:
                    self._forward(inst, node_id)
                else:
                    arrived = inst._join_arrivals.get(node_id, 0) + 1
                    if arrived >= self._join_indegree.get(node_id, 0):
                        inst._join_arrivals[node_id] = 0
                        self._forward(inst, node_id)
                    else:
                        inst._join_arrivals[node_id] = arrived
            elif isinstance(node, bpmn.ServiceTask):
                self._step_task(inst, node)
            else:
                inst.outcome = Outcome.FAILED
                inst.error = f"token reached unexpected node {node_id!r}"

            self._maybe_finalize(inst)
            return inst

    def _forward(self, inst: ProcessInstance, node_id: str) -> None:
        for target in self._out[node_id]:
            inst._tokens.append(target)

    def _step_task(self, inst: ProcessInstance, task: bpmn.ServiceTask) -> None:
        status = inst.task_status[task.id]
        comp_id = inst.bindings[task.id]
        if status is TaskStatus.NOT_STARTED:
            inst.task_status[task.id] = TaskStatus.ACTIVE
            self._log(
                EventKind.TASK_STARTED,
                {"task": task.id, "component": comp_id, "instance": inst.instance_id},
                inst,
            )
            delay = self.invoker.delay_steps(comp_id, task.operation_ref)
            if delay > 0:
                inst._delay_left[task.id] = delay
                inst._tokens.append(task.id)
            else:
                self._invoke(inst, task, comp_id)
        elif status is TaskStatus.ACTIVE:
            left = inst._delay_left.get(task.id, 0) - 1
            if left > 0:
                inst._delay_left[task.id] = left
                inst._tokens.append(task.id)
            else:
                inst._delay_left.pop(task.id, None)
                self._invoke(inst, task, comp_id)
        else:
            inst.outcome = Outcome.FAILED
            inst.error = f"token re-entered completed task {task.id!r}"

    def _invoke(self, inst: ProcessInstance, task: bpmn.ServiceTask, comp_id: str) -> None:
        missing = [v for v in task.input_vars if v not in inst.variables]
        if missing:
            inst.outcome = Outcome.FAILED
            inst.error = f"task {task.id!r} lacks input variables {missing}"
            self._log(
                EventKind.TASK_FAILED,
                {
                    "task": task.id,
                    "component": comp_id,
                    "instance": inst.instance_id,
                    "handled": False,
                    "error": inst.error,
                },
                inst,
            )
            inst._tokens.clear()
            return
        inputs = {v: inst.variables[v] for v in task.input_vars}
        try:
            result = self.invoker.invoke(comp_id, task.operation_ref, inputs)
        except ComponentFault as fault:
            self._handle_fault(inst, task, comp_id, fault)
            return
        if task.output_var:
            inst.variables[task.output_var] = result
        inst.task_status[task.id] = TaskStatus.COMPLETED
        self._log(
            EventKind.TASK_COMPLETED,
            {"task": task.id, "component": comp_id, "instance": inst.instance_id},
            inst,
        )
        self._forward(inst, task.id)

    def _handle_fault(
        self,
        inst: ProcessInstance,
        task: bpmn.ServiceTask,
        comp_id: str,
        fault: ComponentFault,
    ) -> None:
        boundary = next(
            (
                b
                for b in self.process.boundary_events()
                if b.attached_to == task.id and b.error_ref == fault.error_id
            ),
            None,
        )
        handled = boundary is not None
        self._log(
            EventKind.TASK_FAILED,
            {
                "task": task.id,
                "component": comp_id,
                "instance": inst.instance_id,
                "errorId": fault.error_id,
                "handled": handled,
            },
            inst,
        )
        if not handled:
            inst.outcome = Outcome.FAILED
            inst.error = f"component {comp_id!r} failed with unhandled error {fault.error_id!r}"
            inst._tokens.clear()
            return
        # the task's position status has no failed member; a handled fault
        # counts the task as done and the handler path carries on
        inst.task_status[task.id] = TaskStatus.COMPLETED
        self._log(
            EventKind.BOUNDARY_TRIGGERED,
            {
                "boundary": boundary.id,
                "task": task.id,
                "errorId": fault.error_id,
                "handler": boundary.handler_target,
                "instance": inst.instance_id,
            },
            inst,
        )
        inst._tokens.append(boundary.handler_target)

    def _maybe_finalize(self, inst: ProcessInstance) -> None:
        if inst.outcome is not Outcome.IN_PROGRESS or inst._tokens:
            return
        if inst._end_reached:
            inst.outcome = Outcome.COMPLETED
            inst.report = dict(inst.variables)
        else:
            inst.outcome = Outcome.FAILED
            inst.error = "tokens exhausted before any end event was reached"

    # -- notification handling

    def drain_notifications(self, timeout: float = 0.0) -> int:
        """Process everything queued for this service's subscriptions, FIFO."""
        processed = 0
        while True:
            n = self.broker.poll(self.service_id, timeout if processed == 0 else 0.0)
            if n is None:
                return processed
            self.on_notification(n)
            processed += 1

    def on_notification(self, n: Notification) -> list[dict]:
        with self._lock:
            if self.status is not ServiceStatus.RUNNING:
                return []
            try:
                n.validate()
            except ValidationError as exc:
                self._log(
                    EventKind.NOTIFICATION_RECEIVED,
                    {"topic": getattr(n, "topic", ""), "error": str(exc)},
                )
                return []
            self._log(
                EventKind.NOTIFICATION_RECEIVED,
                {
                    "type": n.type.value,
                    "topic": n.topic,
                    "subject": n.subject_component_id,
                    "publisher": n.publisher_id,
                    "publisherSeq": n.seq,
                },
            )
            if n.type is EventType.THREAT_LEVEL_CHANGE:
                self.threat_state.update(
                    n.subject_component_id, n.threat_id, n.payload.probability, n.timestamp
                )

            actions: list[dict] = []
            active = self.active_plan()
            for rule in self.rules:
                if rule.scope.kind is not ScopeKind.WHOLE_PROCESS:
                    continue
                binding = active.binding_for(rule.subject_task_id)
                if binding is None:
                    continue
                if evaluate(rule, n, InstancePosition(), binding):
                    self._log(
                        EventKind.RULE_MATCHED,
                        {"rule": rule.rule_id, "level": "service", "topic": n.topic},
                    )
                    actions.append(self._execute_action(rule, n, None))
                    if rule.action.kind in (ActionKind.STOP, ActionKind.RECOMPOSE):
                        return actions

            for inst in list(self.instances.values()):
                if inst.outcome is not Outcome.IN_PROGRESS:
                    continue
                for rule in self.rules:
                    if rule.scope.kind is ScopeKind.WHOLE_PROCESS:
                        continue
                    binding = inst.bindings.get(rule.subject_task_id)
                    if binding is None:
                        continue
                    if evaluate(rule, n, inst.position(), binding):
                        self._log(
                            EventKind.RULE_MATCHED,
                            {"rule": rule.rule_id, "level": inst.instance_id, "topic": n.topic},
                        )
                        actions.append(self._execute_action(rule, n, inst))
                        if rule.action.kind in (ActionKind.STOP, ActionKind.RECOMPOSE):
                            return actions
            return actions

    def _execute_action(
        self, rule: AdaptationRule, n: Notification, inst: ProcessInstance | None
    ) -> dict:
        kind = rule.action.kind
        if kind is ActionKind.STOP:
            self.act_stop(reason=f"rule {rule.rule_id}")
            return {"rule": rule.rule_id, "action": "stop", "outcome": "stopped"}
        if kind is ActionKind.RECOMPOSE:
            result = self.act_recompose(n.subject_component_id, threat_id=n.threat_id)
            outcome = f"switched:{result.new_plan_id}" if result.switched else "stopped"
            return {"rule": rule.rule_id, "action": "recompose", "outcome": outcome}
        if kind is ActionKind.LAUNCH_PROCESS:
            ref = rule.action.param("processRef") or ""
            launched = self.act_launch(ref, {})
            outcome = f"started:{launched}" if launched else "unknownProcessRef"
            return {"rule": rule.rule_id, "action": "launchProcess", "outcome": outcome}
        message = rule.action.param("message") or ""
        self.act_notify(message)
        return {"rule": rule.rule_id, "action": "notify", "outcome": "published"}

    # -- adaptation actions

    def act_stop(self, reason: str = "requested") -> None:
        with self._lock:
            self._stop_internal(reason, log_event=True)

    def _stop_internal(self, reason: str, log_event: bool) -> list[str]:
        stopped = []
        for inst in self.live_instances():
            inst.outcome = Outcome.STOPPED_BY_RULE
            inst._tokens.clear()
            stopped.append(inst.instance_id)
        self.status = ServiceStatus.STOPPED
        if log_event:
            self._log(
                EventKind.ACTION_TAKEN,
                {"action": "stop", "reason": reason, "stoppedInstances": ",".join(stopped)},
            )
        return stopped

    def act_recompose(self, flagged_component_id: str, threat_id: str | None = None) -> RecomposeResult:
        """Exclude plans binding any flagged component, re-verify the rest in
        rank order against the current threat state, switch to the first that
        passes. With no passing plan the service stops and says so on the bus."""
        with self._lock:
            if flagged_component_id not in self._flagged:
                self._flagged[flagged_component_id] = threat_id
            elif self._flagged[flagged_component_id] is not None and threat_id is not None:
                self._flagged[flagged_component_id] = threat_id
            levels = self.threat_state.snapshot()
            self._prune_flags(levels, keep=flagged_component_id)

            old_plan_id = self.active_plan_id
            for plan in self.plans:
                if plan.component_ids() & self._flagged.keys():
                    continue
                verdict = verify_plan(plan, self.process, self.rules, levels)
                if not verdict.passed:
                    continue
                self.active_plan_id = plan.plan_id
                adopted = self._adopt_bindings(plan)
                self._log(
                    EventKind.ACTION_TAKEN,
                    {
                        "action": "recompose",
                        "flagged": flagged_component_id,
                        "result": f"switched:{plan.plan_id}",
                    },
                )
                self._log(
                    EventKind.PLAN_SWITCHED,
                    {
                        "from": old_plan_id,
                        "to": plan.plan_id,
                        "flagged": flagged_component_id,
                        "rebound": ",".join(adopted),
                    },
                )
                return RecomposeResult(switched=True, new_plan_id=plan.plan_id)

            stopped = self._stop_internal("no composition plan passes verification", log_event=False)
            self._log(
                EventKind.ACTION_TAKEN,
                {
                    "action": "recompose",
                    "flagged": flagged_component_id,
                    "result": "stopped",
                    "stoppedInstances": ",".join(stopped),
                },
            )
            self._publisher.publish(
                EventType.CONTEXT_CHANGE,
                self.service_id,
                value=f"service {self.service_id} stopped: no composition plan passes verification",
            )
            return RecomposeResult(switched=False)

    def _prune_flags(self, levels: dict[tuple[str, str], float], keep: str) -> None:
        """A flagged pair re-enters ranking once a lower level arrives that no
        longer satisfies any rule threshold; manual flags (no threat) stay."""
        for comp_id, threat_id in list(self._flagged.items()):
            if comp_id == keep or threat_id is None:
                continue
            level = levels.get((comp_id, threat_id))
            if level is None:
                continue
            escalated = any(
                r.predicate.satisfied_by(level)
                for r in self.rules
                if r.event_type is EventType.THREAT_LEVEL_CHANGE
                and r.threat_id == threat_id
                and r.predicate is not None
            )
            if not escalated:
                del self._flagged[comp_id]

    def _adopt_bindings(self, plan: CompositionPlan) -> list[str]:
        """notStarted tasks of live instances take the new plan's bindings;
        active/completed tasks keep their component and results."""
        adopted = []
        for inst in self.live_instances():
            inst.plan_id = plan.plan_id
            for task_id, comp_id in plan.bindings:
                if inst.task_status.get(task_id) is TaskStatus.NOT_STARTED:
                    if inst.bindings.get(task_id) != comp_id:
                        adopted.append(f"{inst.instance_id}:{task_id}:{comp_id}")
                    inst.bindings[task_id] = comp_id
        return adopted

    def act_launch(self, process_ref: str, variables: dict | None = None) -> str | None:
        with self._lock:
            target = self.aux.get(process_ref)
            if target is None:
                self._log(
                    EventKind.ACTION_TAKEN,
                    {"action": "launchProcess", "processRef": process_ref, "result": "unknownProcessRef"},
                )
                return None
            instance_id = target.start_instance(variables or {})
            self._log(
                EventKind.ACTION_TAKEN,
                {"action": "launchProcess", "processRef": process_ref, "result": f"started:{instance_id}"},
            )
            return instance_id

    def act_notify(self, message: str) -> int:
        with self._lock:
            count = self._publisher.publish(
                EventType.CONTEXT_CHANGE, self.service_id, value=message
            )
            self._log(
                EventKind.ACTION_TAKEN,
                {"action": "notify", "message": message, "deliveries": count},
            )
            return count


def deploy(
    pm: bpmn.ProcessModel,
    reg: CandidateRegistry,
    rules: list[AdaptationRule],
    criteria: RankingCriteria,
    broker: Broker,
    invoker: ComponentInvoker,
    service_id: str = "service",
    clock=None,
    aux: dict[str, DeployedService] | None = None,
) -> DeployedService:
    """Rank all plans, activate the best one that verifies against the (empty)
    initial threat state, and register the rule-derived subscriptions."""
    violations = bpmn.validate(pm)
    if violations:
        raise ValidationError("process model invalid: " + "; ".join(violations))
    criteria.validate()
    if "." in service_id or "*" in service_id or not service_id:
        raise ValidationError(f"service id {service_id!r} contains reserved characters")
    for rule in rules:
        rule.validate_against(pm)
    try:
        plans = rank_plans(generate_plans(pm, reg), criteria, reg)
    except MissingCandidatesError as exc:
        raise DeploymentError(str(exc))

    active_plan_id = None
    for plan in plans:
        if verify_plan(plan, pm, rules, {}).passed:
            active_plan_id = plan.plan_id
            break
    if active_plan_id is None:
        raise DeploymentError("no composition plan passes verification at deployment")

    topics = sorted(derive_subscriptions(rules, plans))
    for topic in topics:
        broker.subscribe(Subscription(subscriber_id=service_id, topic_pattern=topic))

    return DeployedService(
        service_id=service_id,
        process=pm,
        registry=reg,
        rules=rules,
        criteria=criteria,
        plans=plans,
        active_plan_id=active_plan_id,
        broker=broker,
        invoker=invoker,
        subscriptions=topics,
        clock=clock,
        aux=aux,
    )


def export_log_lines(events: list[ExecutionEvent]) -> str:
    """Line-delimited JSON records, one event per line, stable key order."""
    return "\n".join(
        json.dumps(e.to_record(), sort_keys=True, separators=(",", ":")) for e in events
    ) + ("\n" if events else "")
