"""Message transport: MQTT-style pub/sub with a deterministic in-process loopback.

Topic scheme (wire contract shared with the device fleet):

    dev/<device>/io/<n>/state   feedback/sensor value   {"value": N, "ts": ms}
    dev/<device>/io/<n>/cmd     command                 {"value": N, "ts": ms, "token": s}
    dev/<device>/telemetry      {"uptime_s": N, "rssi": N, "ts": ms}
    dev/<device>/status         retained "online"/"offline" (last will)
    sys/notify                  structured diagnostics
    sys/ctl/<verb>              control plane for manual injection

The loopback backend implements MQTT 3.1.1 semantics we rely on: wildcard
filters (+, #), retained messages, last-will publication on ungraceful
session drop, and per-topic FIFO ordering. It adds per-link delay models
so message time of flight can be reproduced, and an optional duplicate
injection knob to exercise at-least-once consumers.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from random import Random
from typing import Any, Callable

from .clock import Clock, Scheduler

logger = logging.getLogger(__name__)

QOS_AT_MOST_ONCE = 0
QOS_AT_LEAST_ONCE = 1


class TransportDown(RuntimeError):
    """Broker/loopback unavailable; callers treat this as fault-scan fodder."""


class InvalidTopicFilter(ValueError):
    pass


@dataclass
class Envelope:
    topic: str
    payload: bytes
    qos: int = QOS_AT_MOST_ONCE
    retain: bool = False
    source_ts: int | None = None  # epoch ms at publisher
    recv_ts: int | None = None    # epoch ms at receiver, filled on delivery

    @classmethod
    def json(cls, topic: str, obj: Any, *, qos: int = QOS_AT_MOST_ONCE,
             retain: bool = False, source_ts: int | None = None) -> "Envelope":
        return cls(topic=topic, payload=json.dumps(obj).encode("utf-8"),
                   qos=qos, retain=retain, source_ts=source_ts)

    def payload_json(self) -> Any:
        return json.loads(self.payload.decode("utf-8"))


def validate_topic(topic: str) -> None:
    if not topic or "+" in topic or "#" in topic or "\x00" in topic:
        raise InvalidTopicFilter(f"invalid topic: {topic!r}")


def validate_filter(pattern: str) -> None:
    if not pattern:
        raise InvalidTopicFilter("empty topic filter")
    levels = pattern.split("/")
    for i, level in enumerate(levels):
        if level == "#" and i != len(levels) - 1:
            raise InvalidTopicFilter(f"'#' must be the last level: {pattern!r}")
        if ("+" in level and level != "+") or ("#" in level and level != "#"):
            raise InvalidTopicFilter(f"wildcard must occupy a whole level: {pattern!r}")


def topic_matches(pattern: str, topic: str) -> bool:
    """MQTT 3.1.1 filter matching ('+' one level, '#' any tail)."""
    p_levels = pattern.split("/")
    t_levels = topic.split("/")
    for i, p in enumerate(p_levels):
        if p == "#":
            return True
        if i >= len(t_levels):
            return False
        if p != "+" and p != t_levels[i]:
            return False
    return len(p_levels) == len(t_levels)


def device_of_topic(topic: str) -> str | None:
    """Device owning a `dev/<device>/...` topic, else None (server-local)."""
    parts = topic.split("/")
    if len(parts) >= 2 and parts[0] == "dev":
        return parts[1]
    return None


@dataclass(frozen=True)
class DelayModel:
    """Link delay distribution in ms: constant, uniform, or normal (floor 0)."""

    dist: str = "constant"
    value: float = 0.0
    low: float = 0.0
    high: float = 0.0
    mean: float = 0.0
    stddev: float = 0.0

    def sample(self, rng: Random) -> float:
        if self.dist == "constant":
            return max(0.0, self.value)
        if self.dist == "uniform":
            return rng.uniform(self.low, self.high)
        if self.dist == "normal":
            return max(0.0, rng.normalvariate(self.mean, self.stddev))
        raise ValueError(f"unknown delay distribution: {self.dist}")

    @classmethod
    def from_config(cls, cfg: Any) -> "DelayModel":
        if cfg is None:
            return cls()
        if isinstance(cfg, (int, float)):
            return cls(dist="constant", value=float(cfg))
        return cls(**cfg)


class Subscription:
    __slots__ = ("pattern", "handler", "session", "_bus", "active")

    def __init__(self, bus: "LoopbackBus", pattern: str, handler: Callable[[Envelope], None],
                 session: str | None) -> None:
        self._bus = bus
        self.pattern = pattern
        self.handler = handler
        self.session = session  # owning device session, None = server side
        self.active = True

    def cancel(self) -> None:
        self.active = False
        self._bus._drop_subscription(self)


@dataclass
class _Session:
    device: str
    open: bool = True
    will: Envelope | None = None
    subscriptions: list[Subscription] = field(default_factory=list)


class LoopbackBus:
    """In-process broker with MQTT semantics and injectable link delays."""

    def __init__(self, scheduler: Scheduler, clock: Clock, *, rng: Random | None = None,
                 default_delay: DelayModel | None = None,
                 duplicate_probability: float = 0.0) -> None:
        self.scheduler = scheduler
        self.clock = clock
        self.rng = rng or Random(0)
        self._subs: list[Subscription] = []
        self._retained: dict[str, Envelope] = {}
        self._sessions: dict[str, _Session] = {}
        self._delays: dict[str, DelayModel] = {}
        self._default_delay = default_delay or DelayModel()
        self.duplicate_probability = duplicate_probability
        self._up = True

    # -- configuration -----------------------------------------------------

    def set_link_delay(self, device: str | None, model: DelayModel) -> None:
        if device is None:
            self._default_delay = model
        else:
            self._delays[device] = model

    def stop(self) -> None:
        self._up = False

    def start(self) -> None:
        self._up = True

    # -- sessions / last will ----------------------------------------------

    def open_session(self, device: str) -> None:
        sess = self._sessions.setdefault(device, _Session(device))
        was_closed = not sess.open
        sess.open = True
        if was_closed:
            self._replay_retained_for_session(sess)

    def register_last_will(self, device: str, env: Envelope) -> None:
        sess = self._sessions.setdefault(device, _Session(device))
        if not sess.open:
            raise TransportDown(f"session for {device} is not open")
        sess.will = env

    def close_session(self, device: str, *, graceful: bool) -> None:
        sess = self._sessions.setdefault(device, _Session(device))
        if not sess.open:
            return
        sess.open = False
        if not graceful and sess.will is not None:
            self.publish(sess.will)

    def session_open(self, device: str) -> bool:
        sess = self._sessions.get(device)
        return sess.open if sess else True

    # -- pub/sub -------------------------------------------------------------

    def subscribe(self, pattern: str, handler: Callable[[Envelope], None], *,
                  session: str | None = None, replay_retained: bool = True) -> Subscription:
        if not self._up:
            raise TransportDown("loopback bus is stopped")
        validate_filter(pattern)
        sub = Subscription(self, pattern, handler, session)
        self._subs.append(sub)
        if session is not None:
            self._sessions.setdefault(session, _Session(session)).subscriptions.append(sub)
        if replay_retained:
            for topic in sorted(self._retained):
                if topic_matches(pattern, topic):
                    self._schedule_delivery(sub, self._retained[topic], retained_replay=True)
        return sub

    def _drop_subscription(self, sub: Subscription) -> None:
        if sub in self._subs:
            self._subs.remove(sub)

    def publish(self, env: Envelope) -> None:
        if not self._up:
            raise TransportDown("loopback bus is stopped")
        validate_topic(env.topic)
        env.payload.decode("utf-8")  # pre: payload is a UTF-8 document
        if env.source_ts is None:
            env.source_ts = self.clock.now_ms()
        if env.retain:
            self._retained[env.topic] = replace(env)
        for sub in list(self._subs):
            if topic_matches(sub.pattern, env.topic):
                self._schedule_delivery(sub, env)

    def retained(self, topic: str) -> Envelope | None:
        return self._retained.get(topic)

    # -- delivery -------------------------------------------------------------

    def _delay_for(self, topic: str) -> float:
        device = device_of_topic(topic)
        model = self._delays.get(device, self._default_delay) if device else DelayModel()
        return model.sample(self.rng)

    def _schedule_delivery(self, sub: Subscription, env: Envelope, *,
                           retained_replay: bool = False) -> None:
        delay = self._delay_for(env.topic)
        env_out = replace(env)  # per-delivery copy: recv_ts differs per link
        self.scheduler.call_later(delay, self._deliver, sub, env_out)
        if (self.duplicate_probability > 0.0 and env.qos == QOS_AT_LEAST_ONCE
                and not retained_replay and self.rng.random() < self.duplicate_probability):
            self.scheduler.call_later(delay + 1, self._deliver, sub, replace(env_out))

    def _deliver(self, sub: Subscription, env: Envelope) -> None:
        if not sub.active:
            return
        if sub.session is not None and not self.session_open(sub.session):
            return  # subscriber offline: delivery lost (retained copy survives)
        env.recv_ts = self.clock.now_ms()
        sub.handler(env)

    def _replay_retained_for_session(self, sess: _Session) -> None:
        for sub in sess.subscriptions:
            if not sub.active:
                continue
            for topic in sorted(self._retained):
                if topic_matches(sub.pattern, topic):
                    self._schedule_delivery(sub, self._retained[topic], retained_replay=True)


class MqttBus:
    """External-broker backend (paho-mqtt), behaviorally interchangeable with
    the loopback for the server side. Deliveries are marshaled onto the
    scheduler thread so layer atomicity holds in real mode too.

    Note: producer timestamps come from unsynchronized clocks here, so clock
    skew pollutes time-of-flight numbers measured against a real fleet.
    """

    def __init__(self, url: str, scheduler: Scheduler, clock: Clock,
                 client_id: str = "plantline") -> None:
        try:
            import paho.mqtt.client as mqtt
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise TransportDown(
                "external broker support requires paho-mqtt (pip install plantline[mqtt])"
            ) from exc
        from urllib.parse import urlparse

        self.scheduler = scheduler
        self.clock = clock
        self._mqtt = mqtt
        self._subs: list[tuple[str, Callable[[Envelope], None]]] = []
        parsed = urlparse(url)
        self._client = mqtt.Client(client_id=client_id, protocol=mqtt.MQTTv311)
        self._client.on_message = self._on_message
        self._client.connect(parsed.hostname or "localhost", parsed.port or 1883)
        self._client.loop_start()

    def publish(self, env: Envelope) -> None:
        if env.source_ts is None:
            env.source_ts = self.clock.now_ms()
        info = self._client.publish(env.topic, env.payload, qos=env.qos, retain=env.retain)
        if info.rc != 0:  # pragma: no cover - network failure path
            raise TransportDown(f"mqtt publish failed rc={info.rc}")

    def subscribe(self, pattern: str, handler: Callable[[Envelope], None], *,
                  session: str | None = None, replay_retained: bool = True) -> None:
        validate_filter(pattern)
        self._subs.append((pattern, handler))
        self._client.subscribe(pattern, qos=QOS_AT_LEAST_ONCE)

    def register_last_will(self, device: str, env: Envelope) -> None:
        self._client.will_set(env.topic, env.payload, qos=env.qos, retain=env.retain)

    def _on_message(self, client: Any, userdata: Any, msg: Any) -> None:
        env = Envelope(topic=msg.topic, payload=msg.payload, qos=msg.qos, retain=msg.retain)
        try:
            env.source_ts = int(env.payload_json().get("ts"))
        except Exception:
            env.source_ts = None
        for pattern, handler in self._subs:
            if topic_matches(pattern, msg.topic):
                self.scheduler.post(self._deliver, handler, env)

    def _deliver(self, handler: Callable[[Envelope], None], env: Envelope) -> None:
        env.recv_ts = self.clock.now_ms()
        handler(env)

    def close(self) -> None:
        self._client.loop_stop()
        self._client.disconnect()


def make_bus(url: str, scheduler: Scheduler, clock: Clock, **kwargs: Any):
    """Build the transport for a `broker.url` config value."""
    if url.startswith("loopback"):
        return LoopbackBus(scheduler, clock, **kwargs)
    if url.startswith(("mqtt://", "tcp://")):
        return MqttBus(url, scheduler, clock)
    raise ValueError(f"unsupported broker url: {url!r}")
