"""Sensor context storage and the comparison expression language.

Operation conditions and routine triggers share one small grammar:

    expr    := term ("and" term)*
    term    := "always" | "elapsed" cmp number | sensor cmp number
    cmp     := ">=" | "<=" | ">" | "<" | "==" | "!="

`elapsed` (seconds in the current routine state) is only meaningful for
routine triggers; operation conditions using it are rejected at load time.
Expressions are parsed once at config load, never eval()'d.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

ELAPSED = "elapsed"

_TOKEN = re.compile(r"\s*(>=|<=|==|!=|>|<|\band\b|[A-Za-z_][\w.\-]*|-?\d+(?:\.\d+)?)")

_OPS = {
    ">=": lambda a, b: a >= b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    "<": lambda a, b: a < b,
    "==": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
}


class ExpressionError(ValueError):
    pass


class MissingSensor(LookupError):
    """A referenced sensor has no value in context: a configuration error."""


class SensorContext:
    """Latest accepted value per sensor id, forked live from subscriptions."""

    def __init__(self) -> None:
        self._values: dict[str, tuple[float, int]] = {}

    def update(self, sensor_id: str, value: float, recv_ts: int) -> None:
        self._values[sensor_id] = (float(value), int(recv_ts))

    def value(self, sensor_id: str) -> float:
        try:
            return self._values[sensor_id][0]
        except KeyError:
            raise MissingSensor(sensor_id) from None

    def recv_ts(self, sensor_id: str) -> int:
        try:
            return self._values[sensor_id][1]
        except KeyError:
            raise MissingSensor(sensor_id) from None

    def has(self, sensor_id: str) -> bool:
        return sensor_id in self._values

    def ids(self) -> list[str]:
        return sorted(self._values)


@dataclass(frozen=True)
class Comparison:
    subject: str   # sensor id or "elapsed"
    op: str
    constant: float

    def evaluate(self, ctx: SensorContext, *, elapsed_s: float | None = None) -> bool:
        if self.subject == ELAPSED:
            if elapsed_s is None:
                raise ExpressionError("elapsed guard outside a routine trigger")
            left = elapsed_s
        else:
            left = ctx.value(self.subject)
        return _OPS[self.op](left, self.constant)


@dataclass(frozen=True)
class Expr:
    terms: tuple[Comparison, ...] = ()
    text: str = ""

    def evaluate(self, ctx: SensorContext, *, elapsed_s: float | None = None) -> bool:
        return all(t.evaluate(ctx, elapsed_s=elapsed_s) for t in self.terms)

    @property
    def sensors(self) -> list[str]:
        return sorted({t.subject for t in self.terms if t.subject != ELAPSED})

    @property
    def uses_elapsed(self) -> bool:
        return any(t.subject == ELAPSED for t in self.terms)


ALWAYS = Expr(terms=(), text="always")


def _tokenize(text: str) -> list[str]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            if text[pos:].strip():
                raise ExpressionError(f"cannot parse {text!r} at offset {pos}")
            break
        tokens.append(m.group(1))
        pos = m.end()
    return tokens


def parse_expr(text: str) -> Expr:
    text = text.strip()
    if not text:
        raise ExpressionError("empty expression")
    if text == "always":
        return ALWAYS
    tokens = _tokenize(text)
    terms: list[Comparison] = []
    i = 0
    while i < len(tokens):
        if len(tokens) - i < 3:
            raise ExpressionError(f"incomplete comparison in {text!r}")
        subject, op, const = tokens[i:i + 3]
        if op not in _OPS:
            raise ExpressionError(f"expected comparison operator, got {op!r} in {text!r}")
        try:
            constant = float(const)
        except ValueError:
            raise ExpressionError(f"expected number, got {const!r} in {text!r}") from None
        if re.fullmatch(r"-?\d+(?:\.\d+)?", subject):
            raise ExpressionError(f"left side must be a sensor id in {text!r}")
        terms.append(Comparison(subject, op, constant))
        i += 3
        if i < len(tokens):
            if tokens[i] != "and":
                raise ExpressionError(f"expected 'and', got {tokens[i]!r} in {text!r}")
            i += 1
            if i >= len(tokens):
                raise ExpressionError(f"dangling 'and' in {text!r}")
    return Expr(terms=tuple(terms), text=text)
