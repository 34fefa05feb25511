"""Executable BPMN subset with threat-bearing error boundary events.

Supported elements: process, startEvent, endEvent, serviceTask,
parallelGateway, sequenceFlow, boundaryEvent (with errorEventDefinition)
and top-level error declarations. A boundary event stores the threat ID
directly in the errorRef attribute of its errorEventDefinition; the error
declaration carries the display name. Anything else is rejected by name.

Models are immutable values; parse/serialize round-trip to structural
equality, and serialization is deterministic byte-for-byte.
"""

from __future__ import annotations

import heapq
import xml.etree.ElementTree as ET
from dataclasses import dataclass, replace
from enum import Enum
from typing import Union
from xml.sax.saxutils import quoteattr

from .errors import (
    ConflictError,
    NotFoundError,
    ParseError,
    UnsupportedConstructError,
    ValidationError,
)

BPMN_NS = "http://www.omg.org/spec/BPMN/20100524/MODEL"
EXT_NS = "urn:x-threatflow:bpmn"

SUPPORTED_ELEMENTS = {
    "definitions",
    "process",
    "error",
    "startEvent",
    "endEvent",
    "serviceTask",
    "parallelGateway",
    "sequenceFlow",
    "boundaryEvent",
    "errorEventDefinition",
    "documentation",  # tolerated and ignored
}


class GatewayDirection(Enum):
    FORK = "fork"
    JOIN = "join"


@dataclass(frozen=True)
class StartEvent:
    id: str


@dataclass(frozen=True)
class EndEvent:
    id: str


@dataclass(frozen=True)
class ServiceTask:
    id: str
    name: str = ""
    operation_ref: str = ""
    input_vars: tuple[str, ...] = ()
    output_var: str = ""


@dataclass(frozen=True)
class ParallelGateway:
    id: str
    direction: GatewayDirection


@dataclass(frozen=True)
class ErrorBoundaryEvent:
    id: str
    attached_to: str
    error_ref: str
    handler_target: str


Node = Union[StartEvent, EndEvent, ServiceTask, ParallelGateway, ErrorBoundaryEvent]


@dataclass(frozen=True)
class SequenceFlow:
    id: str
    from_node: str
    to_node: str


@dataclass(frozen=True)
class ErrorDecl:
    id: str
    name: str = ""


@dataclass(frozen=True)
class ProcessModel:
    id: str
    name: str = ""
    nodes: tuple[Node, ...] = ()
    flows: tuple[SequenceFlow, ...] = ()
    errors: tuple[ErrorDecl, ...] = ()

    def node_by_id(self, node_id: str) -> Node | None:
        for n in self.nodes:
            if n.id == node_id:
                return n
        return None

    def service_tasks(self) -> list[ServiceTask]:
        return [n for n in self.nodes if isinstance(n, ServiceTask)]

    def boundary_events(self) -> list[ErrorBoundaryEvent]:
        return [n for n in self.nodes if isinstance(n, ErrorBoundaryEvent)]

    def start_event(self) -> StartEvent:
        starts = [n for n in self.nodes if isinstance(n, StartEvent)]
        if len(starts) != 1:
            raise ValidationError(f"process {self.id!r} has {len(starts)} start events")
        return starts[0]

    def end_events(self) -> list[EndEvent]:
        return [n for n in self.nodes if isinstance(n, EndEvent)]


# --- validation ---------------------------------------------------------------

def validate(pm: ProcessModel) -> list[str]:
    """Empty list iff all model invariants hold; each violation names the
    offending node or flow and the invariant it breaks."""
    v: list[str] = []
    ids: dict[str, Node] = {}
    for n in pm.nodes:
        if not n.id:
            v.append("node with empty id")
            continue
        if n.id in ids:
            v.append(f"duplicate node id {n.id!r}")
        ids[n.id] = n

    starts = [n for n in pm.nodes if isinstance(n, StartEvent)]
    if len(starts) != 1:
        v.append(f"process has {len(starts)} start events, expected exactly 1")
    if not any(isinstance(n, EndEvent) for n in pm.nodes):
        v.append("process has no end event")

    flow_ids: set[str] = set()
    for f in pm.flows:
        if f.id in flow_ids:
            v.append(f"duplicate flow id {f.id!r}")
        flow_ids.add(f.id)
        if f.from_node == f.to_node:
            v.append(f"flow {f.id!r} is a self-loop on {f.from_node!r}")
        for end in (f.from_node, f.to_node):
            if end not in ids:
                v.append(f"flow {f.id!r} endpoint {end!r} names no node")
            elif isinstance(ids[end], ErrorBoundaryEvent):
                v.append(
                    f"flow {f.id!r} touches boundary event {end!r}; boundary events "
                    "connect through their handler target"
                )

    seen_pairs: set[tuple[str, str]] = set()
    for b in pm.boundary_events():
        attached = ids.get(b.attached_to)
        if attached is None or not isinstance(attached, ServiceTask):
            v.append(f"boundary event {b.id!r} attachedTo {b.attached_to!r} is not a service task")
        if not b.error_ref:
            v.append(f"boundary event {b.id!r} has empty errorRef")
        if b.handler_target not in ids:
            v.append(f"boundary event {b.id!r} handler target {b.handler_target!r} names no node")
        pair = (b.attached_to, b.error_ref)
        if pair in seen_pairs:
            v.append(f"duplicate boundary event for task/threat pair {pair!r}")
        seen_pairs.add(pair)

    decl_ids: set[str] = set()
    for e in pm.errors:
        if e.id in decl_ids:
            v.append(f"duplicate error declaration {e.id!r}")
        decl_ids.add(e.id)
    for b in pm.boundary_events():
        if b.error_ref and b.error_ref not in decl_ids:
            v.append(f"errorRef {b.error_ref!r} on {b.id!r} has no error declaration")

    # degree rules for the structured subset (flows only; boundary events
    # are attached, not flow-connected)
    if not v:
        indeg = {n.id: 0 for n in pm.nodes}
        outdeg = {n.id: 0 for n in pm.nodes}
        for f in pm.flows:
            outdeg[f.from_node] += 1
            indeg[f.to_node] += 1
        # an end event may be fed solely by a boundary handler reroute
        handler_fed = {b.handler_target for b in pm.boundary_events()}
        for n in pm.nodes:
            i, o = indeg[n.id], outdeg[n.id]
            if isinstance(n, StartEvent) and (i != 0 or o != 1):
                v.append(f"start event {n.id!r} must have 0 in / 1 out flows, has {i}/{o}")
            elif isinstance(n, EndEvent) and ((i < 1 and n.id not in handler_fed) or o != 0):
                v.append(f"end event {n.id!r} must have >=1 in / 0 out flows, has {i}/{o}")
            elif isinstance(n, ServiceTask) and (i != 1 or o != 1):
                v.append(f"service task {n.id!r} must have 1 in / 1 out flows, has {i}/{o}")
            elif isinstance(n, ParallelGateway):
                if n.direction is GatewayDirection.FORK and (i != 1 or o < 2):
                    v.append(f"fork gateway {n.id!r} must have 1 in / >=2 out flows, has {i}/{o}")
                if n.direction is GatewayDirection.JOIN and (i < 2 or o != 1):
                    v.append(f"join gateway {n.id!r} must have >=2 in / 1 out flows, has {i}/{o}")

    if not v:
        v.extend(_check_acyclic(pm))
    if not v:
        v.extend(_check_reachability(pm))
        v.extend(_check_gateway_pairing(pm))
    return v


def _successors(pm: ProcessModel) -> dict[str, list[str]]:
    succ: dict[str, list[str]] = {n.id: [] for n in pm.nodes}
    for f in sorted(pm.flows, key=lambda f: f.id):
        succ[f.from_node].append(f.to_node)
    return succ


def _check_acyclic(pm: ProcessModel) -> list[str]:
    succ = _successors(pm)
    WHITE, GREY, BLACK = 0, 1, 2
    color = {nid: WHITE for nid in succ}
    for root in succ:
        if color[root] != WHITE:
            continue
        stack = [(root, iter(succ[root]))]
        color[root] = GREY
        while stack:
            nid, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                color[nid] = BLACK
                stack.pop()
            elif color[nxt] == GREY:
                return [f"cycle detected through node {nxt!r}"]
            elif color[nxt] == WHITE:
                color[nxt] = GREY
                stack.append((nxt, iter(succ[nxt])))
    return []


def _check_reachability(pm: ProcessModel) -> list[str]:
    starts = [n for n in pm.nodes if isinstance(n, StartEvent)]
    if len(starts) != 1:
        return []
    succ = _successors(pm)
    for b in pm.boundary_events():
        succ.setdefault(b.attached_to, []).append(b.id)
        succ.setdefault(b.id, []).append(b.handler_target)
    seen = set()
    frontier = [starts[0].id]
    while frontier:
        nid = frontier.pop()
        if nid in seen:
            continue
        seen.add(nid)
        frontier.extend(succ.get(nid, []))
    return [
        f"node {n.id!r} is unreachable from the start event"
        for n in pm.nodes
        if n.id not in seen and not isinstance(n, StartEvent)
    ]


def _check_gateway_pairing(pm: ProcessModel) -> list[str]:
    """Every fork must converge on one matching join across all branches."""
    v: list[str] = []
    nodes = {n.id: n for n in pm.nodes}
    succ = _successors(pm)
    forks = [n for n in pm.nodes if isinstance(n, ParallelGateway) and n.direction is GatewayDirection.FORK]
    joins = {n.id for n in pm.nodes if isinstance(n, ParallelGateway) and n.direction is GatewayDirection.JOIN}
    indeg: dict[str, int] = {n.id: 0 for n in pm.nodes}
    for f in pm.flows:
        indeg[f.to_node] += 1

    join_of: dict[str, str | None] = {}

    def find_join(fork_id: str) -> str | None:
        if fork_id in join_of:
            return join_of[fork_id]
        join_of[fork_id] = None  # guards (unreachable) recursion
        found: set[str | None] = set()
        for branch_head in succ[fork_id]:
            found.add(_walk_branch(branch_head))
        if len(found) == 1 and None not in found:
            join = found.pop()
            if indeg[join] != len(succ[fork_id]):
                v.append(
                    f"join {join!r} has {indeg[join]} incoming flows but fork "
                    f"{fork_id!r} has {len(succ[fork_id])} branches"
                )
            join_of[fork_id] = join
            return join
        v.append(f"fork {fork_id!r} branches do not converge on a single join")
        return None

    def _walk_branch(node_id: str) -> str | None:
        while True:
            node = nodes[node_id]
            if isinstance(node, ParallelGateway) and node.direction is GatewayDirection.JOIN:
                return node_id
            if isinstance(node, EndEvent):
                return None
            if isinstance(node, ParallelGateway) and node.direction is GatewayDirection.FORK:
                inner = find_join(node_id)
                if inner is None:
                    return None
                node_id = succ[inner][0]
                continue
            nxt = succ[node_id]
            if len(nxt) != 1:
                return None
            node_id = nxt[0]

    matched: set[str] = set()
    for fork in forks:
        j = find_join(fork.id)
        if j is not None:
            if j in matched:
                v.append(f"join {j!r} matched by more than one fork")
            matched.add(j)
    for j in joins - matched:
        v.append(f"join {j!r} has no matching fork")
    return v


# --- operations ---------------------------------------------------------------

def list_threat_refs(pm: ProcessModel) -> set[tuple[str, str]]:
    """(task id, threat ID) for every boundary event in the model."""
    return {(b.attached_to, b.error_ref) for b in pm.boundary_events()}


def error_ref_multiset(pm: ProcessModel) -> list[str]:
    return sorted(b.error_ref for b in pm.boundary_events())


def attach_threat(
    pm: ProcessModel,
    task_id: str,
    threat_id: str,
    handler_target: str | None = None,
    threat_name: str = "",
) -> ProcessModel:
    """Return a new model with a boundary event carrying threat_id on task_id.

    handler_target defaults to the process end event.
    """
    task = pm.node_by_id(task_id)
    if task is None or not isinstance(task, ServiceTask):
        raise NotFoundError(f"no service task {task_id!r} in process {pm.id!r}")
    if not threat_id:
        raise ValidationError("threat id is empty")
    if (task_id, threat_id) in list_threat_refs(pm):
        raise ConflictError(f"task {task_id!r} already carries threat {threat_id!r}")
    if handler_target is None:
        ends = pm.end_events()
        if len(ends) != 1:
            raise ValidationError(
                f"process {pm.id!r} has {len(ends)} end events; handler target must be explicit"
            )
        handler_target = ends[0].id
    elif pm.node_by_id(handler_target) is None:
        raise NotFoundError(f"handler target {handler_target!r} names no node")

    boundary = ErrorBoundaryEvent(
        id=f"boundary-{task_id}-{threat_id}",
        attached_to=task_id,
        error_ref=threat_id,
        handler_target=handler_target,
    )
    errors = pm.errors
    if all(e.id != threat_id for e in errors):
        errors = errors + (ErrorDecl(id=threat_id, name=threat_name or threat_id),)
    return replace(pm, nodes=pm.nodes + (boundary,), errors=errors)


def structurally_equal(a: ProcessModel, b: ProcessModel) -> bool:
    return not structural_diff(a, b)


def structural_diff(a: ProcessModel, b: ProcessModel) -> list[str]:
    """Human-readable differences, ignoring declaration order."""
    diffs: list[str] = []
    if a.id != b.id:
        diffs.append(f"process id {a.id!r} != {b.id!r}")
    if a.name != b.name:
        diffs.append(f"process name {a.name!r} != {b.name!r}")
    for label, left, right in (
        ("node", set(a.nodes), set(b.nodes)),
        ("flow", set(a.flows), set(b.flows)),
        ("error", set(a.errors), set(b.errors)),
    ):
        for item in sorted(left - right, key=repr):
            diffs.append(f"{label} only in first: {item}")
        for item in sorted(right - left, key=repr):
            diffs.append(f"{label} only in second: {item}")
    return diffs


def document_order(pm: ProcessModel) -> list[Node]:
    """Canonical order: topological over flows with id tie-break; boundary
    events follow their attached task."""
    nodes = {n.id: n for n in pm.nodes}
    regular = [n for n in pm.nodes if not isinstance(n, ErrorBoundaryEvent)]
    indeg = {n.id: 0 for n in regular}
    succ: dict[str, list[str]] = {n.id: [] for n in regular}
    for f in pm.flows:
        succ[f.from_node].append(f.to_node)
        indeg[f.to_node] += 1

    ready = [n.id for n in regular if indeg[n.id] == 0]
    heapq.heapify(ready)
    ordered: list[Node] = []
    boundaries_by_task: dict[str, list[ErrorBoundaryEvent]] = {}
    for b in pm.boundary_events():
        boundaries_by_task.setdefault(b.attached_to, []).append(b)
    while ready:
        nid = heapq.heappop(ready)
        node = nodes[nid]
        ordered.append(node)
        for b in sorted(boundaries_by_task.get(nid, []), key=lambda b: b.id):
            ordered.append(b)
        for nxt in succ[nid]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                heapq.heappush(ready, nxt)
    if len(ordered) != len(pm.nodes):
        raise ValidationError(f"process {pm.id!r} flow graph is not acyclic")
    return ordered


# --- XML serializer -----------------------------------------------------------

def serialize(pm: ProcessModel) -> str:
    """Deterministic BPMN 2.0 XML: identical models yield identical bytes."""
    violations = validate(pm)
    if violations:
        raise ValidationError("cannot serialize invalid model: " + "; ".join(violations))

    out: list[str] = ['<?xml version="1.0" encoding="UTF-8"?>']
    out.append(
        f'<definitions xmlns="{BPMN_NS}" xmlns:ext="{EXT_NS}" '
        'targetNamespace="urn:x-threatflow:process">'
    )
    for e in sorted(pm.errors, key=lambda e: e.id):
        attrs = f" id={quoteattr(e.id)}"
        if e.name:
            attrs += f" name={quoteattr(e.name)}"
        out.append(f"  <error{attrs} />")

    proc_attrs = f" id={quoteattr(pm.id)}"
    if pm.name:
        proc_attrs += f" name={quoteattr(pm.name)}"
    out.append(f"  <process{proc_attrs} isExecutable=\"true\">")

    for node in document_order(pm):
        if isinstance(node, StartEvent):
            out.append(f"    <startEvent id={quoteattr(node.id)} />")
        elif isinstance(node, EndEvent):
            out.append(f"    <endEvent id={quoteattr(node.id)} />")
        elif isinstance(node, ServiceTask):
            attrs = f" id={quoteattr(node.id)}"
            if node.name:
                attrs += f" name={quoteattr(node.name)}"
            if node.operation_ref:
                attrs += f" operationRef={quoteattr(node.operation_ref)}"
            if node.input_vars:
                attrs += f" ext:inputVars={quoteattr(','.join(node.input_vars))}"
            if node.output_var:
                attrs += f" ext:outputVar={quoteattr(node.output_var)}"
            out.append(f"    <serviceTask{attrs} />")
        elif isinstance(node, ParallelGateway):
            direction = "Diverging" if node.direction is GatewayDirection.FORK else "Converging"
            out.append(
                f"    <parallelGateway id={quoteattr(node.id)} "
                f'gatewayDirection="{direction}" />'
            )
        elif isinstance(node, ErrorBoundaryEvent):
            out.append(
                f"    <boundaryEvent id={quoteattr(node.id)} "
                f"attachedToRef={quoteattr(node.attached_to)}>"
            )
            out.append(f"      <errorEventDefinition errorRef={quoteattr(node.error_ref)} />")
            out.append("    </boundaryEvent>")

    all_flows = list(pm.flows) + [
        SequenceFlow(id=f"{b.id}-handler", from_node=b.id, to_node=b.handler_target)
        for b in pm.boundary_events()
    ]
    for f in sorted(all_flows, key=lambda f: f.id):
        out.append(
            f"    <sequenceFlow id={quoteattr(f.id)} "
            f"sourceRef={quoteattr(f.from_node)} targetRef={quoteattr(f.to_node)} />"
        )
    out.append("  </process>")
    out.append("</definitions>")
    return "\n".join(out) + "\n"


# --- XML parser ---------------------------------------------------------------

def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _attr(el: ET.Element, name: str) -> str:
    """Attribute by local name, tolerating namespace qualification."""
    if name in el.attrib:
        return el.attrib[name]
    for key, value in el.attrib.items():
        if _local(key) == name:
            return value
    return ""


def parse_bpmn(doc: str) -> ProcessModel:
    """Parse a BPMN 2.0 XML document into a validated ProcessModel."""
    try:
        root = ET.fromstring(doc)
    except ET.ParseError as exc:
        raise ParseError(f"malformed XML: {exc.msg.split(':')[0]}", exc.position)

    unsupported = sorted(
        {_local(el.tag) for el in root.iter() if _local(el.tag) not in SUPPORTED_ELEMENTS}
    )
    if unsupported:
        raise UnsupportedConstructError(unsupported)

    processes = [el for el in root if _local(el.tag) == "process"]
    if len(processes) != 1:
        raise ValidationError(f"document declares {len(processes)} processes, expected exactly 1")
    proc = processes[0]

    errors = tuple(
        ErrorDecl(id=_attr(el, "id"), name=_attr(el, "name"))
        for el in root
        if _local(el.tag) == "error"
    )

    nodes: list[Node] = []
    raw_flows: list[SequenceFlow] = []
    pending_gateways: list[str] = []
    boundary_raw: list[tuple[str, str, str]] = []  # id, attachedToRef, errorRef

    for el in proc:
        kind = _local(el.tag)
        el_id = _attr(el, "id")
        if kind == "startEvent":
            nodes.append(StartEvent(id=el_id))
        elif kind == "endEvent":
            nodes.append(EndEvent(id=el_id))
        elif kind == "serviceTask":
            raw_vars = _attr(el, "inputVars")
            nodes.append(
                ServiceTask(
                    id=el_id,
                    name=_attr(el, "name"),
                    operation_ref=_attr(el, "operationRef"),
                    input_vars=tuple(s for s in raw_vars.split(",") if s) if raw_vars else (),
                    output_var=_attr(el, "outputVar"),
                )
            )
        elif kind == "parallelGateway":
            direction = _attr(el, "gatewayDirection")
            if direction == "Diverging":
                nodes.append(ParallelGateway(id=el_id, direction=GatewayDirection.FORK))
            elif direction == "Converging":
                nodes.append(ParallelGateway(id=el_id, direction=GatewayDirection.JOIN))
            else:
                pending_gateways.append(el_id)
        elif kind == "sequenceFlow":
            raw_flows.append(
                SequenceFlow(id=el_id, from_node=_attr(el, "sourceRef"), to_node=_attr(el, "targetRef"))
            )
        elif kind == "boundaryEvent":
            defs = [c for c in el if _local(c.tag) == "errorEventDefinition"]
            if not defs:
                raise ValidationError(f"boundary event {el_id!r} lacks an errorEventDefinition")
            attached = _attr(el, "attachedToRef")
            if not attached:
                raise ValidationError(f"boundary event {el_id!r} lacks attachedToRef")
            boundary_raw.append((el_id, attached, _attr(defs[0], "errorRef")))
        # documentation elements are ignored

    for gw_id in pending_gateways:
        outs = sum(1 for f in raw_flows if f.from_node == gw_id)
        ins = sum(1 for f in raw_flows if f.to_node == gw_id)
        if outs >= 2 and ins <= 1:
            nodes.append(ParallelGateway(id=gw_id, direction=GatewayDirection.FORK))
        elif ins >= 2 and outs <= 1:
            nodes.append(ParallelGateway(id=gw_id, direction=GatewayDirection.JOIN))
        else:
            raise ValidationError(
                f"parallel gateway {gw_id!r} direction is ambiguous ({ins} in / {outs} out)"
            )

    # flows leaving a boundary event define its handler target
    boundary_ids = {b[0] for b in boundary_raw}
    handler_flows = [f for f in raw_flows if f.from_node in boundary_ids]
    flows = tuple(f for f in raw_flows if f.from_node not in boundary_ids)
    handlers: dict[str, str] = {}
    for f in handler_flows:
        if f.from_node in handlers:
            raise ValidationError(f"boundary event {f.from_node!r} has more than one outgoing flow")
        handlers[f.from_node] = f.to_node

    end_ids = [n.id for n in nodes if isinstance(n, EndEvent)]
    for b_id, attached, error_ref in boundary_raw:
        target = handlers.get(b_id)
        if target is None:
            if len(end_ids) != 1:
                raise ValidationError(
                    f"boundary event {b_id!r} has no handler flow and the process has "
                    f"{len(end_ids)} end events"
                )
            target = end_ids[0]
        nodes.append(
            ErrorBoundaryEvent(id=b_id, attached_to=attached, error_ref=error_ref, handler_target=target)
        )

    pm = ProcessModel(
        id=_attr(proc, "id"),
        name=_attr(proc, "name"),
        nodes=tuple(nodes),
        flows=flows,
        errors=errors,
    )
    violations = validate(pm)
    if violations:
        raise ValidationError("invalid process model: " + "; ".join(violations))
    return pm
