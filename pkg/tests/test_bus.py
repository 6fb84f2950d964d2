import pytest
from hypothesis import given, strategies as st

from plantline.bus import (
    DelayModel,
    Envelope,
    InvalidTopicFilter,
    TransportDown,
    topic_matches,
    validate_filter,
)

from conftest import Rig


def collect(rig, pattern, **kwargs):
    inbox = []
    rig.bus.subscribe(pattern, inbox.append, **kwargs)
    return inbox


def test_direct_topic_match_delivery(rig):
    inbox = collect(rig, "dev/ctrl-1/#")
    rig.bus.publish(Envelope.json("dev/ctrl-1/io/3/cmd", {"value": 100, "ts": 0}))
    rig.run_for(1)
    assert len(inbox) == 1
    assert inbox[0].payload_json()["value"] == 100


def test_wildcard_semantics(rig):
    inbox = collect(rig, "dev/+/io/+/state")
    rig.bus.publish(Envelope.json("dev/station-2/io/1/state", {"value": 1, "ts": 0}))
    rig.bus.publish(Envelope.json("dev/station-2/telemetry", {"ts": 0}))
    rig.run_for(1)
    assert [e.topic for e in inbox] == ["dev/station-2/io/1/state"]


@pytest.mark.parametrize("pattern,topic,expected", [
    ("a/b/c", "a/b/c", True),
    ("a/+/c", "a/x/c", True),
    ("a/+/c", "a/x/y", False),
    ("a/#", "a/b/c/d", True),
    ("a/#", "a", True),
    ("#", "anything/at/all", True),
    ("a/+", "a", False),
    ("a/b", "a/b/c", False),
])
def test_topic_matching_table(pattern, topic, expected):
    assert topic_matches(pattern, topic) is expected


@given(st.lists(st.sampled_from(["dev", "io", "x", "1"]), min_size=1, max_size=5))
def test_exact_filter_matches_only_itself(levels):
    topic = "/".join(levels)
    assert topic_matches(topic, topic)
    assert not topic_matches(topic, topic + "/extra")


def test_invalid_filters_rejected(rig):
    for bad in ["", "a/#/b", "a/b+", "fo#o"]:
        with pytest.raises(InvalidTopicFilter):
            validate_filter(bad)
    with pytest.raises(InvalidTopicFilter):
        rig.bus.subscribe("a/#/b", lambda e: None)


def test_fanout_to_two_subscribers(rig):
    a = collect(rig, "dev/d/io/1/state")
    b = collect(rig, "dev/d/#")
    rig.bus.publish(Envelope.json("dev/d/io/1/state", {"value": 2, "ts": 0}))
    rig.run_for(1)
    assert len(a) == 1 and len(b) == 1


def test_unsubscribe_stops_delivery(rig):
    inbox = []
    sub = rig.bus.subscribe("t/x", inbox.append)
    rig.bus.publish(Envelope.json("t/x", {"ts": 0}))
    rig.run_for(1)
    sub.cancel()
    rig.bus.publish(Envelope.json("t/x", {"ts": 0}))
    rig.run_for(1)
    assert len(inbox) == 1


def test_per_topic_fifo_order(rig):
    inbox = collect(rig, "t/#")
    for i in range(20):
        rig.bus.publish(Envelope.json("t/a", {"i": i, "ts": 0}))
    rig.run_for(1)
    assert [e.payload_json()["i"] for e in inbox] == list(range(20))


def test_retained_replay_to_late_subscriber(rig):
    rig.bus.publish(Envelope.json("dev/d/status", {"s": 1}, retain=True))
    rig.run_for(1)
    inbox = collect(rig, "dev/d/status")
    rig.run_for(1)
    assert len(inbox) == 1
    assert inbox[0].retain is True


def test_retained_value_replaced(rig):
    rig.bus.publish(Envelope(topic="a/b", payload=b"1", retain=True))
    rig.bus.publish(Envelope(topic="a/b", payload=b"2", retain=True))
    inbox = collect(rig, "a/b")
    rig.run_for(1)
    assert [e.payload for e in inbox] == [b"2"]


def test_transport_down_surfaces(rig):
    rig.bus.stop()
    with pytest.raises(TransportDown):
        rig.bus.publish(Envelope.json("t/x", {}))
    rig.bus.start()
    rig.bus.publish(Envelope.json("t/x", {}))


def test_last_will_on_ungraceful_drop_only(rig):
    inbox = collect(rig, "dev/d/status")
    rig.bus.open_session("d")
    rig.bus.register_last_will("d", Envelope(topic="dev/d/status", payload=b"offline",
                                             retain=True))
    rig.bus.close_session("d", graceful=True)
    rig.run_for(1)
    assert inbox == []
    rig.bus.open_session("d")
    rig.bus.close_session("d", graceful=False)
    rig.run_for(1)
    assert [e.payload for e in inbox] == [b"offline"]


def test_offline_session_receives_nothing_then_retained_on_reconnect(rig):
    rig.bus.open_session("d")
    inbox = []
    rig.bus.subscribe("dev/d/io/1/cmd", inbox.append, session="d")
    rig.bus.close_session("d", graceful=False)
    rig.bus.publish(Envelope.json("dev/d/io/1/cmd", {"value": 1, "ts": 0},
                                  retain=True))
    rig.run_for(1)
    assert inbox == []
    rig.bus.open_session("d")
    rig.run_for(1)
    assert len(inbox) == 1 and inbox[0].payload_json()["value"] == 1


def test_recv_ts_after_source_ts_and_delay_applied(rig):
    rig.bus.set_link_delay("d", DelayModel(dist="constant", value=150))
    inbox = collect(rig, "dev/d/io/1/state")
    rig.bus.publish(Envelope.json("dev/d/io/1/state", {"value": 0, "ts": 0}))
    rig.run_for(1)
    env = inbox[0]
    assert env.recv_ts - env.source_ts == 150


def test_delay_models_respect_floor():
    from random import Random
    rng = Random(1)
    m = DelayModel(dist="normal", mean=5, stddev=50)
    assert all(m.sample(rng) >= 0 for _ in range(200))
    u = DelayModel(dist="uniform", low=10, high=20)
    assert all(10 <= u.sample(rng) <= 20 for _ in range(100))


def test_duplicate_injection_under_qos1():
    rig = Rig()
    rig.bus.duplicate_probability = 1.0
    inbox = collect(rig, "t/#")
    rig.bus.publish(Envelope.json("t/a", {"ts": 0}, qos=1))
    rig.bus.publish(Envelope.json("t/b", {"ts": 0}, qos=0))
    rig.run_for(1)
    topics = [e.topic for e in inbox]
    assert topics.count("t/a") == 2  # at-least-once may duplicate
    assert topics.count("t/b") == 1  # at-most-once never does
