import json
from random import Random

from plantline.bus import Envelope
from plantline.sim import DeviceTimings, PlantSim, SimValve, constant_trace, ramp_trace

from conftest import Rig


ZERO_LAG = DeviceTimings(cmd_latency_low_ms=0, cmd_latency_high_ms=0,
                         motion_dead_time_ms=0)


def make_fleet(rig, timings=ZERO_LAG):
    return PlantSim(rig.bus, rig.scheduler, rig.clock, seed=3, timings=timings,
                    log=rig.log)


def state_values(inbox, io):
    return [e.payload_json()["value"] for e in inbox
            if e.topic.endswith(f"/io/{io}/state")]


def test_linear_sweep_publishes_quarter_steps():
    # full sweep in 4 s at 1 Hz: positions 25, 50, 75, 100
    valve = SimValve(io=1, sweep_time_s=4.0)
    valve.advance(1000)
    assert valve.position == 0
    valve.command(100, 1000, 1000, "tok")
    seen = []
    for t in range(2000, 5001, 1000):
        valve.advance(t)
        seen.append(valve.position)
    assert seen == [25, 50, 75, 100]


def test_valve_reaches_last_commanded_target_after_any_sequence():
    rng = Random(5)
    valve = SimValve(io=1, sweep_time_s=4.0)
    t = 0
    target = 0.0
    for _ in range(60):
        t += rng.randrange(1, 5000)
        target = rng.choice([0, 15, 40, 60, 100])
        valve.command(target, t, t, f"t{t}")
    valve.advance(t + 10_000)  # longer than any sweep
    assert valve.position == target
    assert valve.moving is False


def test_device_ticks_publish_one_state_per_channel_per_second(rig):
    fleet = make_fleet(rig)
    dev = fleet.add_device("ctrl-9")
    dev.add_valve(1)
    dev.add_sensor(2, constant_trace(42.0))
    inbox = []
    rig.bus.subscribe("dev/ctrl-9/io/+/state", inbox.append)
    fleet.start()
    rig.run_for(10)
    per_channel = {}
    for env in inbox:
        per_channel.setdefault(env.topic, []).append(env)
    assert len(per_channel) == 2
    for envs in per_channel.values():
        assert len(envs) in (9, 10)  # phase offset may land the 10th just outside


def test_day_of_ticks_yields_86400_samples_per_channel(rig):
    fleet = make_fleet(rig)
    dev = fleet.add_device("ctrl-1")
    dev.add_sensor(1, constant_trace(1.0))
    count = 0

    def on_state(env):
        nonlocal count
        count += 1

    rig.bus.subscribe("dev/ctrl-1/io/1/state", on_state)
    fleet.start()
    rig.run_for(86_400)
    assert count == 86_400


def test_telemetry_every_60th_tick(rig):
    fleet = make_fleet(rig)
    dev = fleet.add_device("ctrl-1")
    dev.add_sensor(1, constant_trace(0.0))
    telemetry = []
    rig.bus.subscribe("dev/ctrl-1/telemetry", telemetry.append)
    fleet.start()
    rig.run_for(300)
    assert len(telemetry) == 5
    doc = telemetry[-1].payload_json()
    assert set(doc) == {"uptime_s", "rssi", "ts"}


def test_command_moves_valve_and_feedback_converges(rig):
    fleet = make_fleet(rig)
    dev = fleet.add_device("ctrl-1")
    dev.add_valve(3)
    inbox = []
    rig.bus.subscribe("dev/ctrl-1/io/3/state", inbox.append)
    fleet.start()
    rig.run_for(2)
    rig.bus.publish(Envelope.json("dev/ctrl-1/io/3/cmd",
                                  {"value": 100, "ts": rig.clock.now_ms(), "token": "t1"}))
    rig.run_for(8)
    values = [e.payload_json()["value"] for e in inbox]
    assert values[-1] == 100
    assert dev.valves[3].position == 100


def test_duplicate_command_token_has_no_extra_effect(rig):
    fleet = make_fleet(rig)
    dev = fleet.add_device("ctrl-1")
    dev.add_valve(1)
    fleet.start()
    rig.run_for(1)
    now = rig.clock.now_ms()
    for _ in range(3):
        rig.bus.publish(Envelope.json("dev/ctrl-1/io/1/cmd",
                                      {"value": 60, "ts": now, "token": "dup"}))
    rig.run_for(6)
    assert dev.valves[1].position == 60


def test_unknown_channel_command_ignored(rig, caplog):
    fleet = make_fleet(rig)
    dev = fleet.add_device("ctrl-1")
    dev.add_valve(1)
    fleet.start()
    rig.bus.publish(Envelope.json("dev/ctrl-1/io/99/cmd", {"value": 1, "ts": 0,
                                                           "token": "x"}))
    rig.run_for(2)
    assert dev.valves[1].target == 0


def test_pump_flow_decays_within_one_tick(rig):
    fleet = make_fleet(rig)
    dev = fleet.add_device("ctrl-1")
    pump = dev.add_pump(17, flow_io=18, nominal_flow=80)
    flows = []
    rig.bus.subscribe("dev/ctrl-1/io/18/state", lambda e: flows.append(e.payload_json()["value"]))
    fleet.start()
    rig.bus.publish(Envelope.json("dev/ctrl-1/io/17/cmd", {"value": 1, "ts": 0, "token": "on"}))
    rig.run_for(3)
    assert flows[-1] == 80
    rig.bus.publish(Envelope.json("dev/ctrl-1/io/17/cmd", {"value": 0, "ts": 0, "token": "off"}))
    rig.run_for(3)
    assert flows[-1] == 0.0
    assert pump.running is False


def test_offline_device_publishes_nothing_but_physics_continue(rig):
    fleet = make_fleet(rig)
    dev = fleet.add_device("ctrl-1")
    dev.add_valve(1)
    fleet.start()
    rig.run_for(1)
    rig.bus.publish(Envelope.json("dev/ctrl-1/io/1/cmd", {"value": 100, "ts": 0, "token": "a"}))
    rig.run_for(2)
    inbox = []
    rig.bus.subscribe("dev/ctrl-1/io/1/state", inbox.append)
    dev.set_link_state(False)
    rig.run_for(5)
    assert inbox == []                      # no envelope from an offline device
    assert dev.valves[1].position == 100    # motion carried on locally


def test_disconnect_pauses_pump_and_short_blip_resumes(rig):
    fleet = make_fleet(rig)
    dev = fleet.add_device("ctrl-1")
    pump = dev.add_pump(17, flow_io=18)
    fleet.start()
    rig.bus.publish(Envelope.json("dev/ctrl-1/io/17/cmd", {"value": 1, "ts": 0, "token": "go"}))
    rig.run_for(3)
    assert pump.effective_on
    dev.set_link_state(False)
    rig.run_for(1)
    assert pump.paused_by_disconnect and not pump.effective_on
    assert pump.flow_rate(rig.clock.now_ms()) == 0.0
    dev.set_link_state(True)
    rig.run_for(2)
    assert pump.effective_on  # operation resumes where it left off


def test_reconnect_replays_retained_lockout_and_keeps_pump_off(rig):
    fleet = make_fleet(rig)
    dev = fleet.add_device("ctrl-1")
    pump = dev.add_pump(17)
    fleet.start()
    rig.bus.publish(Envelope.json("dev/ctrl-1/io/17/cmd", {"value": 1, "ts": 0, "token": "go"},
                                  retain=True))
    rig.run_for(3)
    assert pump.effective_on
    dev.set_link_state(False)
    rig.run_for(1)
    # lockout published while the device is away, retained on the cmd topic
    rig.bus.publish(Envelope.json("dev/ctrl-1/io/17/cmd", {"value": 0, "ts": 0, "token": "lock"},
                                  retain=True))
    rig.run_for(5)
    dev.set_link_state(True)
    rig.run_for(3)
    assert pump.running is False
    assert not pump.effective_on


def test_status_last_will_offline_then_online(rig):
    fleet = make_fleet(rig)
    dev = fleet.add_device("ctrl-1")
    dev.add_sensor(1, constant_trace(0))
    statuses = []
    rig.bus.subscribe("dev/ctrl-1/status", lambda e: statuses.append(e.payload.decode()))
    fleet.start()
    rig.run_for(1)
    dev.set_link_state(False)
    rig.run_for(1)
    dev.set_link_state(True)
    rig.run_for(1)
    assert statuses == ["online", "offline", "online"]


def test_stuck_valve_freezes_position(rig):
    fleet = make_fleet(rig)
    dev = fleet.add_device("ctrl-1")
    dev.add_valve(1)
    fleet.start()
    rig.bus.publish(Envelope.json("dev/ctrl-1/io/1/cmd", {"value": 100, "ts": 0, "token": "a"}))
    rig.run_for(2)
    dev.inject_stuck_valve(1)  # settles physics up to now, then freezes
    frozen_at = dev.valves[1].position
    assert 0 < frozen_at < 100
    rig.run_for(10)
    assert dev.valves[1].position == frozen_at


def test_scripted_ramp_trace(rig):
    fleet = make_fleet(rig)
    dev = fleet.add_device("s")
    dev.add_sensor(1, ramp_trace(0, 10, hi=100))
    values = []
    rig.bus.subscribe("dev/s/io/1/state", lambda e: values.append(e.payload_json()["value"]))
    fleet.start()
    rig.run_for(15)
    assert values[0] < values[5] <= 100
    assert values[-1] == 100
