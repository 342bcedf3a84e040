"""Event loop ordering and pacing."""

import pytest

from stormsim.engine import EventLoop, Priority, wall_clock_pacer


def test_events_run_in_timestamp_order():
    loop = EventLoop()
    seen = []
    loop.schedule(3000, Priority.NODE_WAKE, lambda: seen.append("c"))
    loop.schedule(1000, Priority.NODE_WAKE, lambda: seen.append("a"))
    loop.schedule(2000, Priority.NODE_WAKE, lambda: seen.append("b"))
    assert loop.run(10_000) == 3
    assert seen == ["a", "b", "c"]
    assert loop.now == 10_000


def test_priority_breaks_timestamp_ties():
    loop = EventLoop()
    seen = []
    loop.schedule(1000, Priority.SUBSCRIPTION, lambda: seen.append("sub"))
    loop.schedule(1000, Priority.NODE_WAKE, lambda: seen.append("wake"))
    loop.schedule(1000, Priority.HYDRO_STEP, lambda: seen.append("hydro"))
    loop.schedule(1000, Priority.LINK_DELIVERY, lambda: seen.append("link"))
    loop.run(1000)
    assert seen == ["hydro", "link", "wake", "sub"]


def test_insertion_order_breaks_full_ties():
    loop = EventLoop()
    seen = []
    for i in range(5):
        loop.schedule(1000, Priority.NODE_WAKE, lambda i=i: seen.append(i))
    loop.run(1000)
    assert seen == [0, 1, 2, 3, 4]


def test_events_can_schedule_more_events():
    loop = EventLoop()
    seen = []

    def tick():
        seen.append(loop.now)
        if loop.now < 5000:
            loop.schedule(loop.now + 1000, Priority.HYDRO_STEP, tick)

    loop.schedule(1000, Priority.HYDRO_STEP, tick)
    loop.run(10_000)
    assert seen == [1000, 2000, 3000, 4000, 5000]


def test_run_leaves_future_events_queued():
    loop = EventLoop()
    seen = []
    loop.schedule(1000, Priority.NODE_WAKE, lambda: seen.append(1))
    loop.schedule(9000, Priority.NODE_WAKE, lambda: seen.append(9))
    loop.run(5000)
    assert seen == [1]
    loop.run(10_000)
    assert seen == [1, 9]


def test_cannot_schedule_in_the_past():
    loop = EventLoop(start_ms=5000)
    with pytest.raises(ValueError):
        loop.schedule(4000, Priority.NODE_WAKE, lambda: None)


def test_stop_halts_processing():
    loop = EventLoop()
    seen = []
    loop.schedule(1000, Priority.NODE_WAKE, lambda: (seen.append(1), loop.stop()))
    loop.schedule(2000, Priority.NODE_WAKE, lambda: seen.append(2))
    loop.run(10_000)
    assert seen == [1]


def test_pacer_called_between_distinct_timestamps():
    loop = EventLoop()
    gaps = []
    loop.schedule(1000, Priority.NODE_WAKE, lambda: None)
    loop.schedule(1000, Priority.SUBSCRIPTION, lambda: None)
    loop.schedule(3000, Priority.NODE_WAKE, lambda: None)
    loop.run(10_000, pacer=lambda prev, nxt: gaps.append((prev, nxt)))
    # second event at 1000 shares the timestamp: no pacing before it
    assert gaps == [(0, 1000), (1000, 3000)]


def test_wall_clock_pacer_sleeps_compressed_gaps():
    slept = []
    pace = wall_clock_pacer(compression=60.0, sleep=slept.append)
    pace(0, 60_000)   # one virtual minute -> one wall second
    assert len(slept) == 1
    assert abs(slept[0] - 1.0) < 0.05
    pace(60_000, 120_000)
    assert len(slept) == 2


def test_wall_clock_pacer_validates_compression():
    with pytest.raises(ValueError):
        wall_clock_pacer(0)
