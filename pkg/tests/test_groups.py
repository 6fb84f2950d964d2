import pytest

from plantline.actuators import ActuatorBinding, FaultScanConfig
from plantline.bus import Envelope
from plantline.groups import GroupCommander, GroupRejected

from conftest import Rig

BINDINGS = [
    ActuatorBinding("V01", "valve", "ctrl-1", 1, 2.0, 0.0),
    ActuatorBinding("V02", "valve", "ctrl-1", 2, 2.0, 0.0),
    ActuatorBinding("P1", "pump", "ctrl-1", 17, 0.5, 0.0),
]


@pytest.fixture
def setup(rig):
    layer = rig.actuator_layer(BINDINGS, scan=FaultScanConfig(escalate_after_ms=3000))
    commander = GroupCommander(layer, rig.clock, rig.log)
    return rig, layer, commander


def feedback(rig, io, value):
    rig.bus.publish(Envelope.json(f"dev/ctrl-1/io/{io}/state",
                                  {"value": value, "ts": rig.clock.now_ms()}))
    rig.run_for(0.001)


def test_group_completes_after_slowest_member(setup):
    rig, layer, commander = setup
    for io in (1, 2, 17):
        feedback(rig, io, 0.0)
    done = []
    commander.dispatch_group([("V01", 100), ("V02", 0), ("P1", 1)], "g1", done.append)
    feedback(rig, 2, 0.0)     # V02 already at target
    feedback(rig, 17, 1.0)    # pump confirms
    assert done == []
    feedback(rig, 1, 50.0)
    feedback(rig, 1, 99.0)    # last member stops
    assert done == ["g1"]
    assert "g1" not in commander.ledger


def test_group_of_one_equals_single_command(setup):
    rig, layer, commander = setup
    feedback(rig, 1, 0.0)
    done = []
    commander.dispatch_group([("V01", 100)], "solo", done.append)
    feedback(rig, 1, 100.0)
    assert done == ["solo"]


def test_members_dispatched_in_request_order(setup):
    rig, layer, commander = setup
    cmds = []
    rig.bus.subscribe("dev/ctrl-1/io/+/cmd", cmds.append)
    commander.dispatch_group([("V02", 10), ("V01", 20), ("P1", 1)], "order")
    rig.run_for(0.001)
    assert [e.topic.split("/")[3] for e in cmds] == ["2", "1", "17"]


def test_group_with_fault_locked_member_rejected_zero_publishes(setup):
    rig, layer, commander = setup
    feedback(rig, 1, 0.0)
    commander.dispatch_group([("V01", 100)], "will-stall")
    rig.run_for(5)  # no sim device: escalates at 3 s
    assert layer.record_of("V01").fault is not None
    cmds = []
    rig.bus.subscribe("dev/ctrl-1/io/+/cmd", cmds.append, replay_retained=False)
    with pytest.raises(GroupRejected):
        commander.dispatch_group([("V02", 50), ("V01", 10)], "rejected")
    rig.run_for(1)
    assert cmds == []  # all-or-nothing admission
    assert "rejected" not in commander.ledger


def test_group_with_unknown_member_rejected(setup):
    rig, layer, commander = setup
    with pytest.raises(GroupRejected):
        commander.dispatch_group([("V01", 10), ("NOPE", 1)], "bad")


def test_empty_and_duplicate_member_groups_rejected(setup):
    rig, layer, commander = setup
    with pytest.raises(GroupRejected):
        commander.dispatch_group([], "empty")
    with pytest.raises(GroupRejected):
        commander.dispatch_group([("V01", 1), ("V01", 2)], "dup")


def test_late_completion_after_group_closed_only_warns(setup, caplog):
    rig, layer, commander = setup
    feedback(rig, 1, 0.0)
    done = []
    commander.dispatch_group([("V01", 100)], "g1", done.append)
    feedback(rig, 1, 100.0)
    assert done == ["g1"]
    commander.on_member_complete("V01", "g1")  # stale event replay
    assert done == ["g1"]
    assert any(r.kind == "late_completion" for r in rig.log.iter(layer="group"))


def test_force_group_reaches_fault_locked_members(setup):
    rig, layer, commander = setup
    feedback(rig, 1, 0.0)
    commander.dispatch_group([("V01", 100)], "stall")
    rig.run_for(5)
    assert layer.record_of("V01").fault is not None
    cmds = []
    rig.bus.subscribe("dev/ctrl-1/io/+/cmd", cmds.append, replay_retained=False)
    commander.dispatch_group([("V01", 0), ("V02", 0), ("P1", 0)], "lockout", force=True)
    rig.run_for(0.001)
    assert len(cmds) == 3  # safe-state commands reach every member
