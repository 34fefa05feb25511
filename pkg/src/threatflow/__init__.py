"""Threat-aware composite services.

Threats identified while modeling a composite service keep their IDs all the
way into execution: BPMN error boundary events reference repository threat
IDs, a pub-sub bus carries live threat-level changes, and an
event-condition-action engine recomposes or stops the running service when a
threat crosses its threshold.
"""

from .bpmn import ProcessModel, parse_bpmn, serialize
from .bus import Broker, EventType, Notification, Payload, Publisher
from .composition import (
    CandidateRegistry,
    ComponentDescriptor,
    CompositionPlan,
    RankingCriteria,
    generate_plans,
    rank_plans,
    verify_plan,
)
from .errors import ThreatflowError
from .repo import Repository, Threat
from .rules import AdaptationRule, evaluate
from .runtime import DeployedService, deploy
from .scenario import run_demo
from .srs import SrsDocument, ThreatSelection, check_conformity, transform_to_skeleton

__version__ = "0.1.0"

__all__ = [
    "AdaptationRule",
    "Broker",
    "CandidateRegistry",
    "ComponentDescriptor",
    "CompositionPlan",
    "DeployedService",
    "EventType",
    "Notification",
    "Payload",
    "ProcessModel",
    "Publisher",
    "RankingCriteria",
    "Repository",
    "SrsDocument",
    "Threat",
    "ThreatSelection",
    "ThreatflowError",
    "check_conformity",
    "deploy",
    "evaluate",
    "generate_plans",
    "parse_bpmn",
    "rank_plans",
    "run_demo",
    "serialize",
    "transform_to_skeleton",
    "verify_plan",
]
