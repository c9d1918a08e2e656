"""Ballot arithmetic and the value types shared by every other module.

A ballot is a 64-bit non-negative integer whose low 8 bits name the peer
that minted it and whose high bits carry the election round.  Peer ids are
restricted to [0, 16); the value 15 doubles as the "no leader yet" sentinel
that every peer boots with.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

ID_BITS = 0xFF
ROUND_INCREMENT = ID_BITS + 1
MAX_NUM_PEERS = 0xF

# Every peer boots with this ballot; its embedded id (15) is outside the
# valid peer-id range, meaning no leader has been elected yet.
NO_LEADER_BALLOT = MAX_NUM_PEERS


class SafetyViolationError(AssertionError):
    """An "impossible" protocol state was observed; continuing would break agreement."""


def extract_leader_id(ballot: int) -> int:
    """Return the peer id embedded in the low 8 bits of the ballot."""
    return ballot & ID_BITS


def is_leader(ballot: int, peer_id: int) -> bool:
    """True iff the ballot names ``peer_id`` as leader."""
    return extract_leader_id(ballot) == peer_id


def is_someone_else_leader(ballot: int, peer_id: int) -> bool:
    """True iff the ballot names a valid leader other than ``peer_id``."""
    leader = extract_leader_id(ballot)
    return leader != peer_id and leader < MAX_NUM_PEERS


def next_ballot(ballot: int, peer_id: int) -> int:
    """Next ballot for ``peer_id``: bump the round, stamp our id in the low bits.

    The result is strictly greater than ``ballot`` for any id in [0, 256),
    and distinct peers can never mint the same value.
    """
    nb = ballot + ROUND_INCREMENT
    return (nb & ~ID_BITS) | peer_id


class CommandKind(enum.Enum):
    GET = "get"
    PUT = "put"
    DEL = "del"


@dataclass(frozen=True, slots=True)
class Command:
    """One key-value operation.  Keys and values are opaque byte-strings."""

    kind: CommandKind
    key: bytes
    value: bytes = b""


@dataclass(frozen=True, slots=True)
class CommandResult:
    ok: bool
    value: bytes | None = None


class InstanceState(enum.Enum):
    IN_PROGRESS = "in_progress"
    COMMITTED = "committed"
    EXECUTED = "executed"


@dataclass(frozen=True, slots=True)
class Instance:
    """One log slot: a command tagged with the ballot and index it was accepted under."""

    ballot: int
    index: int
    client_id: int
    state: InstanceState
    command: Command


class OutcomeKind(enum.Enum):
    OK = "ok"
    RETRY = "retry"
    SOMEONE_ELSE_LEADER = "someone_else_leader"


@dataclass(frozen=True, slots=True)
class ReplicateOutcome:
    kind: OutcomeKind
    leader: int | None = None


class ResponseType(enum.Enum):
    OK = "ok"
    REJECT = "reject"


# Wire messages.  Reject responses carry the responder's ballot; ok prepare
# responses carry instances; ok commit responses carry last_executed.

@dataclass(frozen=True, slots=True)
class PrepareRequest:
    ballot: int
    sender: int


@dataclass(frozen=True, slots=True)
class PrepareResponse:
    type: ResponseType
    ballot: int = 0
    instances: tuple[Instance, ...] = field(default_factory=tuple)


@dataclass(frozen=True, slots=True)
class AcceptRequest:
    instance: Instance
    sender: int


@dataclass(frozen=True, slots=True)
class AcceptResponse:
    type: ResponseType
    ballot: int = 0


@dataclass(frozen=True, slots=True)
class CommitRequest:
    ballot: int
    last_executed: int
    global_last_executed: int
    sender: int


@dataclass(frozen=True, slots=True)
class CommitResponse:
    type: ResponseType
    ballot: int = 0
    last_executed: int = 0


Message = (
    PrepareRequest
    | PrepareResponse
    | AcceptRequest
    | AcceptResponse
    | CommitRequest
    | CommitResponse
)
