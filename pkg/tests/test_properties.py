"""Property-based checks for the invariants that hold over whole input spaces."""

from hypothesis import given, settings
from hypothesis import strategies as st

from threatflow import bpmn
from threatflow.bus import EventType, Notification, Payload, topic_matches
from threatflow.composition import (
    CandidateRegistry,
    ComponentDescriptor,
    RankingCriteria,
    generate_plans,
    rank_plans,
)

SUBJECTS = st.text(
    alphabet="abcdefghijklmnopqrstuvwxyz0123456789-", min_size=1, max_size=12
)
EVENT_TYPES = st.sampled_from(list(EventType))


@given(event_type=EVENT_TYPES, subject=SUBJECTS, other=EVENT_TYPES)
def test_topic_matches_exact_and_wildcard(event_type, subject, other):
    topic = f"{event_type.kebab}.{subject}"
    assert topic_matches(topic, topic)
    assert topic_matches(f"{event_type.kebab}.*", topic)
    if other is not event_type:
        assert not topic_matches(f"{other.kebab}.*", topic)


@given(
    event_type=EVENT_TYPES,
    subject=SUBJECTS,
    probability=st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
    value=st.none() | st.text(max_size=20),
    seq=st.integers(min_value=1, max_value=10**6),
    ts=st.floats(min_value=0.0, max_value=10**9, allow_nan=False),
)
def test_notification_record_roundtrip(event_type, subject, probability, value, seq, ts):
    threat = "T-X" if event_type is EventType.THREAT_LEVEL_CHANGE else None
    n = Notification(
        type=event_type,
        topic=f"{event_type.kebab}.{subject}",
        subject_component_id=subject,
        payload=Payload(probability=probability, value=value),
        timestamp=ts,
        seq=seq,
        publisher_id="monitor-1",
        threat_id=threat,
    )
    n.validate()
    assert Notification.from_record(n.to_record()) == n


@settings(max_examples=60, deadline=None)
@given(
    metrics=st.lists(
        st.tuples(
            st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
            st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
            st.floats(min_value=0.0, max_value=5.0, allow_nan=False),
        ),
        min_size=1,
        max_size=4,
    ),
    weights=st.tuples(
        st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
        st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
        st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
    ).filter(lambda w: sum(w) > 0),
)
def test_ranking_is_a_sorted_permutation(metrics, weights):
    pm = bpmn.ProcessModel(
        id="p",
        nodes=(
            bpmn.StartEvent(id="start"),
            bpmn.ServiceTask(id="t1", operation_ref="op1"),
            bpmn.EndEvent(id="end"),
        ),
        flows=(
            bpmn.SequenceFlow(id="f1", from_node="start", to_node="t1"),
            bpmn.SequenceFlow(id="f2", from_node="t1", to_node="end"),
        ),
    )
    reg = CandidateRegistry(
        entries=(
            (
                "t1",
                tuple(
                    ComponentDescriptor(
                        id=f"c{j}",
                        provider="prov",
                        operation_ref="op1",
                        trustworthiness=t,
                        latency_score=q,
                        cost=c,
                    )
                    for j, (t, q, c) in enumerate(metrics)
                ),
            ),
        )
    )
    plans = generate_plans(pm, reg)
    ranked = rank_plans(plans, RankingCriteria(*weights), reg)
    assert sorted(p.plan_id for p in ranked) == sorted(p.plan_id for p in plans)
    keys = [(-p.rank_score, p.plan_id) for p in ranked]
    assert keys == sorted(keys)
