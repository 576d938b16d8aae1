"""Bounded FIFO channels and schedulers for networks of pipeline stages.

A stage is a generator that yields effects instead of touching channels
directly:

    ("put", channel, item)   block until the channel accepts the item
    ("get", channel)         block until an item arrives; it is sent back in

Because stages only communicate through blocking FIFOs, the network computes
the same values under any scheduling, so the simple round-robin scheduler and
the genuinely concurrent threaded one are interchangeable. The round-robin
run doubles as a deadlock checker: if no stage can advance it names exactly
who is stuck on what.
"""
from __future__ import annotations

import threading
from collections import deque

from ..errors import ConfigurationError, DeadlockError


class FifoChannel:
    """Bounded FIFO with non-blocking and blocking endpoints.

    Tracks its high-water mark (`max_depth`) and the number of items ever
    enqueued (`put_count`) so pipeline runs can report buffer pressure.
    """

    def __init__(self, name: str, capacity: int = 2):
        if capacity < 1:
            raise ConfigurationError(f"fifo {name!r}: capacity must be >= 1")
        self.name = name
        self.capacity = capacity
        self.max_depth = 0
        self.put_count = 0
        self._items = deque()
        self._lock = threading.Lock()
        self._not_full = threading.Condition(self._lock)
        self._not_empty = threading.Condition(self._lock)

    def __len__(self) -> int:
        return len(self._items)

    def _enqueue(self, item) -> None:
        self._items.append(item)
        self.put_count += 1
        if len(self._items) > self.max_depth:
            self.max_depth = len(self._items)

    def try_put(self, item) -> bool:
        with self._lock:
            if len(self._items) >= self.capacity:
                return False
            self._enqueue(item)
            self._not_empty.notify()
            return True

    def try_get(self):
        """Returns (True, item) or (False, None) without blocking."""
        with self._lock:
            if not self._items:
                return False, None
            item = self._items.popleft()
            self._not_full.notify()
            return True, item

    def put(self, item, timeout=None) -> None:
        with self._not_full:
            while len(self._items) >= self.capacity:
                if not self._not_full.wait(timeout):
                    raise DeadlockError(f"timed out putting to fifo {self.name!r}")
            self._enqueue(item)
            self._not_empty.notify()

    def get(self, timeout=None):
        with self._not_empty:
            while not self._items:
                if not self._not_empty.wait(timeout):
                    raise DeadlockError(f"timed out getting from fifo {self.name!r}")
            item = self._items.popleft()
            self._not_full.notify()
            return item


def _stage_name(gen) -> str:
    return getattr(gen, "__name__", None) or "stage"


def run_round_robin(stages) -> None:
    """Drive all stage generators to completion on a single thread.

    Each pass resumes every stage whose pending effect can complete. A full
    pass with no progress while stages remain is a deadlock and raises with
    a description of every stuck stage.
    """
    live = []
    for gen in stages:
        try:
            effect = next(gen)
            live.append([_stage_name(gen), gen, effect])
        except StopIteration:
            pass
    while live:
        progressed = False
        still = []
        for entry in live:
            name, gen, effect = entry
            value = None
            ready = False
            if effect[0] == "put":
                ready = effect[1].try_put(effect[2])
            elif effect[0] == "get":
                ready, value = effect[1].try_get()
            else:
                raise ConfigurationError(f"stage {name!r} yielded unknown effect {effect[0]!r}")
            if ready:
                progressed = True
                try:
                    entry[2] = gen.send(value)
                    still.append(entry)
                except StopIteration:
                    pass
            else:
                still.append(entry)
        live = still
        if live and not progressed:
            stuck = ", ".join(
                f"{name} waiting to {eff[0]} "
                f"{'to' if eff[0] == 'put' else 'from'} {eff[1].name!r}"
                for name, _, eff in live
            )
            raise DeadlockError(f"no stage can advance: {stuck}")


def run_threaded(stages, timeout: float = 30.0) -> None:
    """Drive the stages on real threads with blocking channel endpoints.

    Channel waits use a timeout as a deadlock backstop; the first failure
    from any stage is re-raised on the caller's thread after all workers
    stop.
    """
    failures = []

    def drive(gen):
        try:
            effect = next(gen)
            while True:
                if effect[0] == "put":
                    effect[1].put(effect[2], timeout=timeout)
                    value = None
                elif effect[0] == "get":
                    value = effect[1].get(timeout=timeout)
                else:
                    raise ConfigurationError(
                        f"stage {_stage_name(gen)!r} yielded unknown effect {effect[0]!r}"
                    )
                effect = gen.send(value)
        except StopIteration:
            pass
        except BaseException as e:  # noqa: BLE001 - reported to the caller
            failures.append(e)

    threads = [threading.Thread(target=drive, args=(g,), daemon=True) for g in stages]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if failures:
        raise failures[0]


SCHEDULERS = {
    "single-thread": run_round_robin,
    "concurrent": run_threaded,
}


def run_network(stages, scheduler: str = "single-thread") -> None:
    try:
        runner = SCHEDULERS[scheduler]
    except KeyError:
        raise ConfigurationError(
            f"unknown scheduler {scheduler!r}; choose from {sorted(SCHEDULERS)}"
        ) from None
    runner(list(stages))
