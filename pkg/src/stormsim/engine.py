"""Discrete-event core: a virtual clock and a priority-ordered event queue.

Events are totally ordered by (timestamp, priority class, insertion order).
The priority classes pin the intra-timestamp sequence the platform depends
on: the plant advances first, then in-flight link deliveries land, then nodes
wake, then subscriptions see the result. Insertion order breaks the final
tie, so replays are exact.

Wall-clock time only exists through the optional pacer callback; headless
runs never sleep.
"""

from __future__ import annotations

import heapq
import time
from enum import IntEnum
from itertools import count
from typing import Callable, Optional


class Priority(IntEnum):
    HYDRO_STEP = 0
    LINK_DELIVERY = 1
    NODE_WAKE = 2
    SUBSCRIPTION = 3


class EventLoop:
    """Single-threaded scheduler over a virtual ms clock."""

    def __init__(self, start_ms: int = 0):
        self.now = start_ms
        self._queue: list[tuple[int, int, int, Callable[[], None]]] = []
        self._seq = count()
        self._stopped = False

    def schedule(self, at_ms: int, priority: Priority,
                 fn: Callable[[], None]) -> None:
        if at_ms < self.now:
            raise ValueError(
                f"cannot schedule at {at_ms} before now {self.now}")
        heapq.heappush(self._queue,
                       (at_ms, int(priority), next(self._seq), fn))

    def stop(self) -> None:
        self._stopped = True

    def run(self, until_ms: int,
            pacer: Optional[Callable[[int, int], None]] = None) -> int:
        """Process events with timestamp <= until_ms in order; returns the
        count processed. ``pacer(prev_ms, next_ms)`` runs before each event,
        which is where serve mode sleeps."""
        processed = 0
        while self._queue and not self._stopped:
            at, _prio, _seq, fn = self._queue[0]
            if at > until_ms:
                break
            heapq.heappop(self._queue)
            if pacer is not None and at > self.now:
                pacer(self.now, at)
            self.now = at
            fn()
            processed += 1
        self.now = max(self.now, until_ms)
        return processed


def wall_clock_pacer(compression: float,
                     sleep=time.sleep) -> Callable[[int, int], None]:
    """Build a pacer that replays virtual time at ``compression`` x speed.

    Keeps an absolute schedule (virtual start against wall start), so
    processing time is absorbed rather than accumulated as drift.
    """
    if compression <= 0:
        raise ValueError("compression must be positive")
    state: dict[str, float] = {}

    def pace(prev_ms: int, next_ms: int) -> None:
        wall = time.monotonic()
        if "wall0" not in state:
            state["wall0"] = wall
            state["virt0"] = prev_ms
        target = state["wall0"] + (next_ms - state["virt0"]) / 1000.0 / compression
        delay = target - wall
        if delay > 0:
            sleep(delay)

    return pace
