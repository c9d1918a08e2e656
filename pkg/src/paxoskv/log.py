"""The replicated log: an unbounded, thread-safe producer-consumer map of slots.

Slots are sparse (consensus does not require consecutive indices), start at
index 1, and move through in_progress -> committed -> executed.  Three cursors
track progress:

* ``last_index``     - highest slot ever reserved or seen,
* ``last_executed``  - highest slot applied to the state machine,
* ``global_last_executed`` - trim frontier: the minimum last_executed across
  all peers, as computed by the leader; every slot at or below it has been
  deleted locally.

Invariants (checked by ``check_invariants``):
  i1: global_last_executed <= last_executed
  i2: every slot in (global_last_executed, last_executed] exists and is executed
  i3: no slot above last_executed is executed
  i4: no slot exists at or below global_last_executed
"""

from __future__ import annotations

import logging
from dataclasses import replace

from paxoskv.core import Instance, InstanceState, SafetyViolationError
from paxoskv.kvstore import KVStore

log = logging.getLogger(__name__)

COMMIT_WAIT_WARN_MS = 1000.0


def insert(slots: dict[int, Instance], instance: Instance) -> bool:
    """Insert ``instance`` into a slot map; returns True iff an empty slot was filled.

    Case 1: slot empty -> store.  Case 2: slot committed/executed -> no-op,
    but the commands must match.  Case 3: slot in_progress -> replace only on
    a strictly higher ballot; equal ballots must carry equal commands; lower
    ballots are stale and ignored.  Command mismatches in cases 2/3 signal a
    protocol-safety bug and raise.
    """
    i = instance.index
    current = slots.get(i)
    if current is None:
        slots[i] = instance
        return True

    if current.state in (InstanceState.COMMITTED, InstanceState.EXECUTED):
        if current.command != instance.command:
            raise SafetyViolationError(
                f"case2: conflicting command for decided slot {i}: "
                f"{current.command} vs {instance.command}"
            )
        return False

    if instance.ballot > current.ballot:
        slots[i] = instance
    elif instance.ballot == current.ballot:
        if current.command != instance.command:
            raise SafetyViolationError(
                f"case3: same ballot {instance.ballot}, different command at slot {i}"
            )
    return False


class Log:
    """Concurrent log shared by accept/commit handlers, the replicate path, and one executor."""

    def __init__(self, kv: KVStore, runtime, on_execute=None):
        self._kv = kv
        self._on_execute = on_execute  # (index, instance) hook for tracing; must not block
        self._mu = runtime.lock()
        self._executable_cv = runtime.condition(self._mu)   # commit -> execute
        self._committable_cv = runtime.condition(self._mu)  # append -> commit
        self._running = True
        self._slots: dict[int, Instance] = {}
        self._last_index = 0
        self._last_executed = 0
        self._global_last_executed = 0

    # cursor accessors

    def last_index(self) -> int:
        with self._mu:
            return self._last_index

    def set_last_index(self, value: int) -> None:
        with self._mu:
            self._last_index = value

    def advance_last_index(self) -> int:
        with self._mu:
            self._last_index += 1
            return self._last_index

    def last_executed(self) -> int:
        with self._mu:
            return self._last_executed

    def global_last_executed(self) -> int:
        with self._mu:
            return self._global_last_executed

    def is_executable(self) -> bool:
        with self._mu:
            return self._is_executable_locked()

    def _is_executable_locked(self) -> bool:
        nxt = self._slots.get(self._last_executed + 1)
        return nxt is not None and nxt.state is InstanceState.COMMITTED

    def stop(self) -> None:
        with self._mu:
            self._running = False
            self._executable_cv.notify_all()
            self._committable_cv.notify_all()

    def restart(self) -> None:
        """Resume a stopped log with its state intact (node restart)."""
        with self._mu:
            self._running = True

    def is_running(self) -> bool:
        with self._mu:
            return self._running

    # slot operations

    def append(self, instance: Instance) -> None:
        with self._mu:
            i = instance.index
            if i <= self._global_last_executed:
                return  # already executed everywhere and trimmed
            if insert(self._slots, instance):
                if i > self._last_index:
                    self._last_index = i
                self._committable_cv.notify_all()

    def commit(self, index: int) -> None:
        """Mark ``index`` committed; blocks until the slot exists (remote oks can beat local append)."""
        with self._mu:
            while (self._running and index not in self._slots
                   and index > self._global_last_executed):
                if not self._committable_cv.wait(timeout_ms=COMMIT_WAIT_WARN_MS):
                    log.warning("commit(%d) waiting >%.0fms for append", index, COMMIT_WAIT_WARN_MS)
            if not self._running:
                return
            if index <= self._global_last_executed:
                return  # executed everywhere and trimmed; nothing left to commit
            inst = self._slots[index]
            if inst.state is InstanceState.IN_PROGRESS:
                self._slots[index] = replace(inst, state=InstanceState.COMMITTED)
            # A slot merged from a remote log may already be committed or even
            # executed here; commit must then be a no-op, but the executor may
            # still need a wake-up.
            if self._is_executable_locked():
                self._executable_cv.notify_all()

    def execute(self):
        """Consume the next executable slot; returns (client_id, result), or None once stopped.

        Exactly one executor calls this.  Blocks until the slot after
        last_executed is committed.
        """
        with self._mu:
            while self._running and not self._is_executable_locked():
                self._executable_cv.wait()
            if not self._running:
                return None
            index = self._last_executed + 1
            inst = self._slots[index]
            result = self._kv.apply(inst.command)
            self._slots[index] = replace(inst, state=InstanceState.EXECUTED)
            self._last_executed = index
            if self._on_execute is not None:
                self._on_execute(index, inst)
            return inst.client_id, result

    def commit_until(self, leader_last_executed: int, ballot: int) -> None:
        """Batch-commit sequential slots up to the leader's last_executed.

        Stops at the first empty slot (a gap: the accept may still be in
        flight).  Slots with a lower ballot than the heartbeat's are stale
        commands awaiting replay and stay untouched.  A slot with a higher
        ballot is impossible because lower-ballot heartbeats were rejected
        upstream.
        """
        if leader_last_executed < 0 or ballot < 0:
            raise ValueError("negative leader_last_executed or ballot")
        with self._mu:
            for i in range(self._last_executed + 1, leader_last_executed + 1):
                inst = self._slots.get(i)
                if inst is None:
                    break
                if inst.ballot > ballot:
                    raise SafetyViolationError(
                        f"commit_until: slot {i} ballot {inst.ballot} above heartbeat ballot {ballot}"
                    )
                if inst.ballot == ballot and inst.state is InstanceState.IN_PROGRESS:
                    self._slots[i] = replace(inst, state=InstanceState.COMMITTED)
            if self._is_executable_locked():
                self._executable_cv.notify_all()

    def trim_until(self, leader_global_last_executed: int) -> None:
        """Delete slots up to the leader-supplied trim frontier; all must be executed."""
        with self._mu:
            while self._global_last_executed < leader_global_last_executed:
                self._global_last_executed += 1
                inst = self._slots.get(self._global_last_executed)
                if inst is None or inst.state is not InstanceState.EXECUTED:
                    raise SafetyViolationError(
                        f"trim_until: slot {self._global_last_executed} not executed "
                        f"(gle computation broken)"
                    )
                del self._slots[self._global_last_executed]

    def instances(self) -> list[Instance]:
        """Occupied slots in (global_last_executed, last_index], ascending; gaps skipped."""
        with self._mu:
            return [
                self._slots[i]
                for i in range(self._global_last_executed + 1, self._last_index + 1)
                if i in self._slots
            ]

    def at(self, index: int) -> Instance | None:
        with self._mu:
            return self._slots.get(index)

    def num_slots(self) -> int:
        with self._mu:
            return len(self._slots)

    # validation

    def check_invariants(self) -> None:
        """Raise SafetyViolationError if any of i1-i4 is violated."""
        with self._mu:
            gle = self._global_last_executed
            le = self._last_executed
            if gle > le:
                raise SafetyViolationError(f"i1: gle {gle} > last_executed {le}")
            for i in range(gle + 1, le + 1):
                inst = self._slots.get(i)
                if inst is None or inst.state is not InstanceState.EXECUTED:
                    raise SafetyViolationError(f"i2: slot {i} missing or not executed")
            for i, inst in self._slots.items():
                if i > le and inst.state is InstanceState.EXECUTED:
                    raise SafetyViolationError(f"i3: executed slot {i} above last_executed {le}")
                if i <= gle:
                    raise SafetyViolationError(f"i4: slot {i} at or below gle {gle}")
            if self._slots and max(self._slots) > self._last_index:
                raise SafetyViolationError(
                    f"last_index {self._last_index} below occupied slot {max(self._slots)}"
                )
