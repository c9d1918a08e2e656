"""Deterministic in-memory key-value state machine applied by log execution."""

from __future__ import annotations

from paxoskv.core import Command, CommandKind, CommandResult


class KVStore:
    """Byte-string table whose state is a pure function of the applied command sequence.

    Only the log executor applies commands; there is no internal locking.
    A del of an absent key returns not-ok so delete idempotence is visible.
    """

    def __init__(self):
        self._table: dict[bytes, bytes] = {}

    def apply(self, cmd: Command) -> CommandResult:
        if cmd.kind is CommandKind.GET:
            value = self._table.get(cmd.key)
            if value is None:
                return CommandResult(ok=False)
            return CommandResult(ok=True, value=value)
        if cmd.kind is CommandKind.PUT:
            self._table[cmd.key] = cmd.value
            return CommandResult(ok=True)
        if cmd.kind is CommandKind.DEL:
            if cmd.key in self._table:
                del self._table[cmd.key]
                return CommandResult(ok=True)
            return CommandResult(ok=False)
        raise ValueError(f"unknown command kind: {cmd.kind!r}")

    def snapshot(self) -> dict[bytes, bytes]:
        """Copy of the table; for tests and checkers on a quiescent node."""
        return dict(self._table)
