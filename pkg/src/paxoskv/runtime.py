"""Execution runtimes: real threads for deployment, a deterministic scheduler for simulation.

The protocol engine is written against a small concurrency surface (spawn,
locks, conditions, events, clock, seeded rng).  ``ThreadRuntime`` maps it onto
``threading``/wall-clock.  ``SimRuntime`` maps it onto cooperatively scheduled
greenlets driven by a virtual clock: exactly one task runs at a time, every
blocking point yields to the scheduler, and all nondeterminism funnels through
one seeded source, so a run is a pure function of (program, seed).

All durations are milliseconds.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import random
import threading
import time
from collections import deque

import greenlet

log = logging.getLogger(__name__)


class ThreadRuntime:
    """Wall-clock runtime backed by daemon threads."""

    name = "thread"

    def __init__(self, seed: int | None = None):
        self._seed = seed
        self._threads: list[threading.Thread] = []
        self._threads_mu = threading.Lock()
        self.on_task_error = None
        self.task_errors: list[tuple[str, BaseException]] = []

    def now(self) -> float:
        return time.monotonic() * 1000.0

    def sleep(self, ms: float) -> None:
        time.sleep(ms / 1000.0)

    def lock(self):
        return threading.Lock()

    def condition(self, lock):
        return _ThreadCondition(threading.Condition(lock))

    def event(self):
        return _ThreadEvent(threading.Event())

    def rng(self, salt) -> random.Random:
        if self._seed is None:
            return random.Random()
        return random.Random(f"{self._seed}:{salt}")

    def spawn(self, fn, *args, name: str = "task"):
        def body():
            try:
                fn(*args)
            except Exception as exc:  # noqa: BLE001 - task boundary
                self.task_errors.append((name, exc))
                if self.on_task_error is not None:
                    self.on_task_error(name, exc)
                else:
                    log.exception("task %s failed", name)

        t = threading.Thread(target=body, name=name, daemon=True)
        with self._threads_mu:
            self._threads = [x for x in self._threads if x.is_alive()]
            self._threads.append(t)
        t.start()
        return t

    def join_all(self, timeout_ms: float = 5000.0) -> list[str]:
        """Join every spawned thread; returns names of any still alive."""
        deadline = time.monotonic() + timeout_ms / 1000.0
        with self._threads_mu:
            threads = list(self._threads)
        alive = []
        for t in threads:
            t.join(max(0.0, deadline - time.monotonic()))
            if t.is_alive():
                alive.append(t.name)
        return alive


class _ThreadCondition:
    __slots__ = ("_c",)

    def __init__(self, cond):
        self._c = cond

    def wait(self, timeout_ms: float | None = None) -> bool:
        return self._c.wait(None if timeout_ms is None else timeout_ms / 1000.0)

    def notify(self, n: int = 1) -> None:
        self._c.notify(n)

    def notify_all(self) -> None:
        self._c.notify_all()


class _ThreadEvent:
    __slots__ = ("_e",)

    def __init__(self, event):
        self._e = event

    def set(self) -> None:
        self._e.set()

    def clear(self) -> None:
        self._e.clear()

    def is_set(self) -> bool:
        return self._e.is_set()

    def wait(self, timeout_ms: float | None = None) -> bool:
        return self._e.wait(None if timeout_ms is None else timeout_ms / 1000.0)


# --- deterministic simulation runtime ------------------------------------

_NEW, _RUNNABLE, _RUNNING, _PARKED, _FINISHED = range(5)


class _SimTask:
    __slots__ = ("name", "fn", "args", "g", "state", "resume_value", "wait_token")

    def __init__(self, name, fn, args):
        self.name = name
        self.fn = fn
        self.args = args
        self.g = None
        self.state = _NEW
        self.resume_value = None
        self.wait_token = 0


class SimRuntime:
    """Cooperative single-threaded scheduler with a virtual millisecond clock.

    Tasks are greenlets; they run until they hit a blocking primitive
    (sleep, lock, condition, event), which parks them and switches back to
    the scheduler.  Ready tasks run FIFO; when none are ready the clock
    jumps to the earliest timer.  Identical seeds and identical call
    sequences therefore yield identical executions.
    """

    name = "sim"

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._now = 0.0
        self._seq = itertools.count()
        self._runnable: deque[_SimTask] = deque()
        self._timers: list[tuple[float, int, object]] = []
        self._tasks: list[_SimTask] = []
        self._hub = None
        self._current: _SimTask | None = None
        self._shutting_down = False
        self.on_task_error = None
        self.task_errors: list[tuple[str, BaseException]] = []

    # clock and rng

    def now(self) -> float:
        return self._now

    def rng(self, salt) -> random.Random:
        return random.Random(f"{self.seed}:{salt}")

    # task management

    def spawn(self, fn, *args, name: str = "task"):
        task = _SimTask(name, fn, args)
        self._tasks.append(task)
        task.state = _RUNNABLE
        self._runnable.append(task)
        return task

    def call_later(self, delay_ms: float, fn) -> None:
        """Run ``fn`` in scheduler context at now+delay; it must not block."""
        heapq.heappush(self._timers, (self._now + delay_ms, next(self._seq), fn))

    def sleep(self, ms: float) -> None:
        task = self._require_current()
        token = task.wait_token + 1  # token after _park() increments
        self.call_later(ms, lambda: self._wake(task, token=token, value=False))
        self._park()

    # primitives

    def lock(self):
        return _SimLock(self)

    def condition(self, lock):
        return _SimCondition(self, lock)

    def event(self):
        return _SimEvent(self)

    # scheduler loop

    def run(self, until_ms: float | None = None) -> None:
        """Drive the world until the virtual clock reaches ``until_ms`` (or idle)."""
        hub = greenlet.getcurrent()
        if self._hub is None:
            self._hub = hub
        assert self._hub is hub, "SimRuntime must always be driven from the same greenlet"
        while True:
            if self._runnable:
                self._dispatch(self._runnable.popleft())
                continue
            if not self._timers:
                break
            when = self._timers[0][0]
            if until_ms is not None and when > until_ms:
                break
            when, _, fn = heapq.heappop(self._timers)
            if when > self._now:
                self._now = when
            fn()
        if until_ms is not None and self._now < until_ms:
            self._now = until_ms

    def run_for(self, ms: float) -> None:
        self.run(self._now + ms)

    def shutdown(self) -> None:
        """Kill every unfinished task (used at the end of a scenario)."""
        self._shutting_down = True
        for task in self._tasks:
            if task.state in (_PARKED, _RUNNABLE) and task.g is not None and not task.g.dead:
                self._current = task
                try:
                    task.g.throw(greenlet.GreenletExit)
                except BaseException:  # pragma: no cover - cleanup is best effort
                    pass
                self._current = None
            task.state = _FINISHED
        self._runnable.clear()
        self._timers.clear()

    # internals

    def _dispatch(self, task: _SimTask) -> None:
        if task.state == _FINISHED:
            return
        task.state = _RUNNING
        self._current = task
        if task.g is None:
            task.g = greenlet.greenlet(self._task_body(task), parent=self._hub)
            task.g.switch()
        else:
            task.g.switch(task.resume_value)
        self._current = None

    def _task_body(self, task: _SimTask):
        def body():
            try:
                task.fn(*task.args)
            except greenlet.GreenletExit:
                pass
            except Exception as exc:  # noqa: BLE001 - task boundary
                self.task_errors.append((task.name, exc))
                if self.on_task_error is not None:
                    self.on_task_error(task.name, exc)
                else:
                    log.error("sim task %s failed: %r", task.name, exc)
            finally:
                task.state = _FINISHED

        return body

    def _require_current(self) -> _SimTask:
        task = self._current
        assert task is not None, "blocking primitive used outside a sim task"
        return task

    def _park(self):
        """Park the current task; returns the value passed to ``_wake``."""
        task = self._require_current()
        task.state = _PARKED
        task.wait_token += 1
        value = self._hub.switch()
        if self._shutting_down:
            raise greenlet.GreenletExit
        return value

    def _wake(self, task: _SimTask, token: int | None = None, value=None) -> bool:
        """Make a parked task runnable; stale wakes (token mismatch) are ignored."""
        if task.state != _PARKED:
            return False
        if token is not None and task.wait_token != token:
            return False
        task.state = _RUNNABLE
        task.resume_value = value
        task.wait_token += 1
        self._runnable.append(task)
        return True


_HUB_OWNER = object()  # lock held from scheduler (hub) context


class _SimLock:
    __slots__ = ("_rt", "_owner", "_waiters")

    def __init__(self, rt: SimRuntime):
        self._rt = rt
        self._owner = None
        self._waiters: deque[_SimTask] = deque()

    def acquire(self) -> None:
        cur = self._rt._current
        if self._owner is None:
            self._owner = cur if cur is not None else _HUB_OWNER
            return
        # Tasks never park while holding a lock, so a held lock implies a
        # running task; only another task can legitimately wait for it.
        assert cur is not None, "hub blocked on a held lock (park-while-locked bug)"
        assert self._owner is not cur, "sim locks are not reentrant"
        self._waiters.append(cur)
        self._rt._park()
        assert self._owner is cur

    def release(self) -> None:
        holder = self._rt._current if self._rt._current is not None else _HUB_OWNER
        if self._rt._shutting_down and self._owner is not holder:
            return
        assert self._owner is holder, "release by non-owner"
        if self._waiters:
            nxt = self._waiters.popleft()
            self._owner = nxt
            self._rt._wake(nxt, token=nxt.wait_token)
        else:
            self._owner = None

    def __enter__(self):
        self.acquire()
        return self

    def __exit__(self, *exc):
        self.release()
        return False


class _SimCondition:
    __slots__ = ("_rt", "_lock", "_waiters")

    def __init__(self, rt: SimRuntime, lock: _SimLock):
        self._rt = rt
        self._lock = lock
        self._waiters: list[_SimTask] = []

    def wait(self, timeout_ms: float | None = None) -> bool:
        rt = self._rt
        cur = rt._require_current()
        assert self._lock._owner is cur, "condition waited without holding its lock"
        self._waiters.append(cur)
        self._lock.release()
        token = cur.wait_token + 1  # token after _park() increments
        if timeout_ms is not None:
            def timeout():
                if cur in self._waiters and cur.wait_token == token:
                    self._waiters.remove(cur)
                    rt._wake(cur, token=token, value=True)

            rt.call_later(timeout_ms, timeout)
        timed_out = rt._park()
        self._lock.acquire()
        return not timed_out

    def notify(self, n: int = 1) -> None:
        for _ in range(min(n, len(self._waiters))):
            task = self._waiters.pop(0)
            self._rt._wake(task, token=task.wait_token, value=False)

    def notify_all(self) -> None:
        self.notify(len(self._waiters))


class _SimEvent:
    __slots__ = ("_rt", "_flag", "_waiters")

    def __init__(self, rt: SimRuntime):
        self._rt = rt
        self._flag = False
        self._waiters: list[_SimTask] = []

    def set(self) -> None:
        self._flag = True
        waiters, self._waiters = self._waiters, []
        for task in waiters:
            self._rt._wake(task, token=task.wait_token, value=False)

    def clear(self) -> None:
        self._flag = False

    def is_set(self) -> bool:
        return self._flag

    def wait(self, timeout_ms: float | None = None) -> bool:
        if self._flag:
            return True
        if timeout_ms is not None and timeout_ms <= 0:
            return False
        rt = self._rt
        cur = rt._require_current()
        self._waiters.append(cur)
        token = cur.wait_token + 1
        if timeout_ms is not None:
            def timeout():
                if cur in self._waiters and cur.wait_token == token:
                    self._waiters.remove(cur)
                    rt._wake(cur, token=token, value=True)

            rt.call_later(timeout_ms, timeout)
        rt._park()
        return self._flag
