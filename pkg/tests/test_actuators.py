import pytest

from plantline.actuators import (
    ActuatorBinding,
    ActuatorFaultLocked,
    FaultScanConfig,
    UnknownActuator,
)
from plantline.bus import Envelope

from conftest import Rig

V7 = ActuatorBinding(system_id="V07", kind="valve", device="ctrl-1", io=7,
                     tolerance=2.0, idle_value=0.0)
P1 = ActuatorBinding(system_id="P1", kind="pump", device="ctrl-1", io=17,
                     tolerance=0.5, idle_value=0.0)


@pytest.fixture
def layer(rig):
    return rig.actuator_layer([V7, P1])


def feedback(rig, io, value, device="ctrl-1"):
    rig.bus.publish(Envelope.json(f"dev/{device}/io/{io}/state",
                                  {"value": value, "ts": rig.clock.now_ms()}))
    rig.run_for(0.001)


def completions(layer):
    done = []
    layer.on_completion(lambda sid, tok: done.append((sid, tok)))
    return done


def test_dispatch_publishes_mapped_command_and_marks_pending(rig, layer):
    inbox = []
    rig.bus.subscribe("dev/ctrl-1/io/7/cmd", inbox.append)
    layer.dispatch("V07", 100, "tok-1")
    rig.run_for(0.001)
    assert len(inbox) == 1
    doc = inbox[0].payload_json()
    assert doc["value"] == 100 and doc["token"] == "tok-1"
    rec = layer.record_of("V07")
    assert rec.phase == "pending" and rec.call_token == "tok-1" and rec.target == 100


def test_unknown_actuator_rejected(layer):
    with pytest.raises(UnknownActuator):
        layer.dispatch("V99", 1, "t")


def test_feedback_within_tolerance_completes(rig, layer):
    done = completions(layer)
    feedback(rig, 7, 0.0)
    layer.dispatch("V07", 100, "tok-1")
    feedback(rig, 7, 50.0)
    assert layer.record_of("V07").phase == "moving"
    feedback(rig, 7, 98.7)  # within 2.0 of 100
    assert done == [("V07", "tok-1")]
    assert layer.record_of("V07").phase == "idle"
    assert layer.record_of("V07").call_token == ""


def test_departure_beyond_tolerance_marks_moving(rig, layer):
    feedback(rig, 7, 0.0)
    layer.dispatch("V07", 100, "t")
    feedback(rig, 7, 1.5)   # within tolerance of start: not moving yet
    assert layer.record_of("V07").phase == "pending"
    feedback(rig, 7, 25.0)
    assert layer.record_of("V07").phase == "moving"


def test_report_by_exception_accepts_constant_stream_once(rig, layer):
    for _ in range(10):
        feedback(rig, 7, 50.0)
    accepted = [r for r in rig.log.records
                if r.layer == "bus"]  # bus records are not made by the layer
    rec = layer.record_of("V07")
    assert rec.last_value == 50.0
    # only the first message changed the accepted value/timestamp
    first_ts = rec.last_recv_ts
    feedback(rig, 7, 50.5)  # within tolerance: suppressed
    assert rec.last_recv_ts == first_ts
    feedback(rig, 7, 53.0)  # outside tolerance: accepted
    assert rec.last_value == 53.0


def test_command_to_current_position_still_returns(rig, layer):
    done = completions(layer)
    feedback(rig, 7, 0.0)
    layer.dispatch("V07", 0, "tok-same")
    feedback(rig, 7, 0.0)  # suppressed by report-by-exception, must still complete
    assert done == [("V07", "tok-same")]


def test_completion_emitted_exactly_once_under_duplicate_feedback(rig, layer):
    done = completions(layer)
    feedback(rig, 7, 0.0)
    layer.dispatch("V07", 100, "tok")
    feedback(rig, 7, 100.0)
    feedback(rig, 7, 100.0)
    feedback(rig, 7, 99.9)
    assert done == [("V07", "tok")]


def test_pump_completes_on_relay_confirm_without_moving(rig, layer):
    done = completions(layer)
    feedback(rig, 17, 0.0)
    layer.dispatch("P1", 1, "pt")
    feedback(rig, 17, 1.0)
    assert done == [("P1", "pt")]
    phases = [r.kind for r in rig.log.iter(layer="actuator") if r.subject == "P1"]
    assert "moving" not in phases


def test_fault_scan_retries_once_then_escalates(rig):
    layer = rig.actuator_layer([V7], scan=FaultScanConfig(
        period_ms=1000, retry_after_ms=3000, escalate_after_ms=10000))
    cmds = []
    rig.bus.subscribe("dev/ctrl-1/io/7/cmd", cmds.append)
    feedback(rig, 7, 0.0)
    layer.dispatch("V07", 100, "tok")  # simulated device absent: no motion ever
    rig.run_for(8)
    assert len(cmds) == 2  # original + exactly one retry
    assert layer.record_of("V07").fault is None
    rig.run_for(4)
    rec = layer.record_of("V07")
    assert rec.fault is not None and rec.fault["fault_type"] == "stalled"
    kinds = [r.kind for r in rig.log.iter(layer="actuator")]
    assert kinds.count("retry") == 1 and kinds.count("escalated") == 1
    # after escalation nothing further is published for that token
    n = len(cmds)
    rig.run_for(20)
    assert len(cmds) == n


def test_dispatch_to_fault_locked_errors_without_publish(rig):
    layer = rig.actuator_layer([V7], scan=FaultScanConfig(escalate_after_ms=2000))
    feedback(rig, 7, 0.0)
    layer.dispatch("V07", 100, "t1")
    rig.run_for(5)
    assert layer.record_of("V07").fault is not None
    cmds = []
    rig.bus.subscribe("dev/ctrl-1/io/7/cmd", cmds.append, replay_retained=False)
    with pytest.raises(ActuatorFaultLocked):
        layer.dispatch("V07", 50, "t2")
    rig.run_for(1)
    assert cmds == []
    # the safe-state path may force through
    layer.dispatch("V07", 0, "lockout", force=True)
    rig.run_for(1)
    assert len(cmds) == 1
    assert layer.record_of("V07").fault is not None  # force does not clear the fault


def test_healthy_fleet_scan_is_noop(rig):
    layer = rig.actuator_layer([V7, P1])
    rig.run_for(30)
    assert [r for r in rig.log.iter(layer="actuator")] == []


def test_retry_uses_original_issuance_for_metrics(rig):
    layer = rig.actuator_layer([V7], scan=FaultScanConfig(retry_after_ms=2000,
                                                          escalate_after_ms=30000))
    done = completions(layer)
    feedback(rig, 7, 0.0)
    layer.dispatch("V07", 100, "tok")
    rig.run_for(3)      # one retry goes out
    feedback(rig, 7, 100.0)
    assert done == [("V07", "tok")]
    dispatches = [r for r in rig.log.iter("actuator", "dispatch")]
    assert len(dispatches) == 1  # retries are logged as retry, not dispatch
