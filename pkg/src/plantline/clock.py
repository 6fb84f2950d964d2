"""Time base and single-threaded event scheduler.

Everything in the control plane and the device simulator runs as callbacks
on one Scheduler. Each callback runs to completion before the next one
starts, which is what makes atomic critical sections trivial and runs
reproducible. In simulated mode the clock jumps from one due callback to
the next; in wall mode the scheduler sleeps.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import threading
import time
from typing import Any, Callable

logger = logging.getLogger(__name__)

MS = int  # epoch milliseconds


class WallClock:
    """Real time, 1 ms resolution."""

    mode = "real"

    def now_ms(self) -> MS:
        return int(time.time() * 1000)


class SimClock:
    """Simulated time, advanced only by the scheduler. 1 ms resolution."""

    mode = "simulated"

    def __init__(self, origin_ms: MS = 0) -> None:
        self._now = int(origin_ms)

    def now_ms(self) -> MS:
        return self._now

    def _advance_to(self, t_ms: MS) -> None:
        # monotonic non-decreasing by construction
        if t_ms > self._now:
            self._now = int(t_ms)


Clock = WallClock | SimClock


class Timer:
    """Handle for a scheduled callback."""

    __slots__ = ("due_ms", "fn", "args", "cancelled", "fired")

    def __init__(self, due_ms: MS, fn: Callable[..., Any], args: tuple) -> None:
        self.due_ms = due_ms
        self.fn = fn
        self.args = args
        self.cancelled = False
        self.fired = False

    def cancel(self) -> None:
        self.cancelled = True

    @property
    def active(self) -> bool:
        return not self.cancelled and not self.fired


class Scheduler:
    """Ordered callback queue over a Clock.

    Callbacks due at the same millisecond fire in scheduling order (FIFO),
    which keeps runs byte-for-byte reproducible under the simulated clock.
    `post` is the only entry point that may be called from another thread
    (real-broker backends deliver from their network thread).
    """

    def __init__(self, clock: Clock) -> None:
        self.clock = clock
        self._heap: list[tuple[MS, int, Timer]] = []
        self._seq = itertools.count()
        self._lock = threading.Lock()
        self._wakeup = threading.Event()
        self._stopped = False

    # -- scheduling --------------------------------------------------------

    def call_at(self, due_ms: MS, fn: Callable[..., Any], *args: Any) -> Timer:
        timer = Timer(int(due_ms), fn, args)
        with self._lock:
            heapq.heappush(self._heap, (timer.due_ms, next(self._seq), timer))
        self._wakeup.set()
        return timer

    def call_later(self, delay_ms: float, fn: Callable[..., Any], *args: Any) -> Timer:
        return self.call_at(self.clock.now_ms() + max(0, int(delay_ms)), fn, *args)

    def call_soon(self, fn: Callable[..., Any], *args: Any) -> Timer:
        return self.call_later(0, fn, *args)

    def post(self, fn: Callable[..., Any], *args: Any) -> Timer:
        """Thread-safe: marshal a callback onto this scheduler."""
        return self.call_at(self.clock.now_ms(), fn, *args)

    def every(self, period_ms: int, fn: Callable[..., Any], *, first_delay_ms: int | None = None) -> Timer:
        """Periodic callback; returned Timer cancels the whole series."""
        series = Timer(0, fn, ())

        def _tick() -> None:
            if series.cancelled:
                return
            fn()
            if not series.cancelled:
                self.call_later(period_ms, _tick)

        first = period_ms if first_delay_ms is None else first_delay_ms
        self.call_later(first, _tick)
        return series

    # -- execution ---------------------------------------------------------

    def _pop_due(self, horizon_ms: MS) -> Timer | None:
        with self._lock:
            while self._heap:
                due, _, timer = self._heap[0]
                if timer.cancelled:
                    heapq.heappop(self._heap)
                    continue
                if due > horizon_ms:
                    return None
                heapq.heappop(self._heap)
                return timer
        return None

    def _next_due(self) -> MS | None:
        with self._lock:
            while self._heap and self._heap[0][2].cancelled:
                heapq.heappop(self._heap)
            return self._heap[0][0] if self._heap else None

    def _fire(self, timer: Timer) -> None:
        timer.fired = True
        try:
            timer.fn(*timer.args)
        except Exception:
            logger.exception("unhandled error in scheduled callback %r", timer.fn)

    def run_until(self, t_ms: MS) -> None:
        """Simulated mode: execute every callback due up to and including t_ms."""
        if not isinstance(self.clock, SimClock):
            raise RuntimeError("run_until requires a simulated clock")
        while True:
            timer = self._pop_due(t_ms)
            if timer is None:
                break
            self.clock._advance_to(timer.due_ms)
            self._fire(timer)
        self.clock._advance_to(t_ms)

    def run_for(self, duration_ms: MS) -> None:
        self.run_until(self.clock.now_ms() + int(duration_ms))

    def stop(self) -> None:
        self._stopped = True
        self._wakeup.set()

    def run_wall(self, until_wall_ms: MS | None = None) -> None:
        """Real mode: sleep between callbacks until stop() or the deadline."""
        if isinstance(self.clock, SimClock):
            raise RuntimeError("run_wall requires the wall clock")
        self._stopped = False
        while not self._stopped:
            now = self.clock.now_ms()
            if until_wall_ms is not None and now >= until_wall_ms:
                return
            timer = self._pop_due(now)
            if timer is not None:
                self._fire(timer)
                continue
            nxt = self._next_due()
            if nxt is None:
                wait_s = 0.2
            else:
                wait_s = max(0.0, (nxt - now) / 1000.0)
            if until_wall_ms is not None:
                wait_s = min(wait_s, max(0.0, (until_wall_ms - now) / 1000.0))
            self._wakeup.clear()
            self._wakeup.wait(timeout=min(wait_s, 0.2) if nxt is None else wait_s)
