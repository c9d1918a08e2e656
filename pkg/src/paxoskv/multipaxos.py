"""The consensus engine: replicate entry point, the three phases, their RPC
handlers, the two long-lived loops, and the adaptive failure detector.

Leadership is tracked solely through the active ballot: the peer named in the
low bits of ``ballot()`` is the leader, and the ballot is updated only when
leadership actually changes (a won election via ``become_leader`` or a higher
ballot observed via ``become_follower``).  A candidate's election ballot stays
a local variable of the attempt, so there is no separate leadership flag to
keep consistent.

Two loops coordinate with the engine through condition variables:

* prepare loop  - sleeps while this peer leads; otherwise sleeps a randomized
  election interval, checks whether a heartbeat arrived, and if not runs an
  election and, on success, replays the merged log.
* commit loop   - sleeps while this peer follows; otherwise broadcasts commit
  messages (doubling as heartbeats) every commit interval, trims the log to
  the global execution frontier, and advances that frontier when every single
  peer answers.

Many ``replicate`` calls may run accept phases concurrently; each phase keeps
its fan-out state in a dedicated record with its own lock so in-flight workers
can outlive the initiating call.
"""

from __future__ import annotations

import logging
from collections import deque

from paxoskv.config import Config
from paxoskv.core import (
    MAX_NUM_PEERS,
    NO_LEADER_BALLOT,
    AcceptRequest,
    AcceptResponse,
    Command,
    CommitRequest,
    CommitResponse,
    Instance,
    InstanceState,
    OutcomeKind,
    PrepareRequest,
    PrepareResponse,
    ReplicateOutcome,
    ResponseType,
    SafetyViolationError,
    extract_leader_id,
    is_leader,
    is_someone_else_leader,
    next_ballot,
)
from paxoskv.log import Log

log = logging.getLogger(__name__)


def merge_responses(merged: dict[int, Instance], instance: Instance) -> None:
    """Fold one prepare-response instance into the merged recovery log.

    Per slot the higher ballot wins.  Equal ballots must carry equal commands
    (ballots are unique per proposer), anything else is a safety bug.  States
    are irrelevant here: replay re-proposes every merged command under the new
    ballot anyway.
    """
    current = merged.get(instance.index)
    if current is None or instance.ballot > current.ballot:
        merged[instance.index] = instance
    elif instance.ballot == current.ballot and instance.command != current.command:
        raise SafetyViolationError(
            f"merge: ballot {instance.ballot} carries two commands at slot {instance.index}"
        )


class _PhaseState:
    """Shared fan-out record for one phase; guarded by its own lock."""

    __slots__ = ("mu", "cv", "num_rpcs", "num_oks", "leader", "last_index", "merged",
                 "min_last_executed", "peer_last_executed")

    def __init__(self, runtime, leader: int):
        self.mu = runtime.lock()
        self.cv = runtime.condition(self.mu)
        self.num_rpcs = 0
        self.num_oks = 0
        self.leader = leader
        self.last_index = 0
        self.merged: dict[int, Instance] = {}
        self.min_last_executed = 0
        self.peer_last_executed: dict[int, int] = {}


class MultiPaxos:
    def __init__(self, paxos_log: Log, config: Config, transport, runtime, listener=None):
        self._log = paxos_log
        self._cfg = config
        self._transport = transport
        self._rt = runtime
        self._listener = listener
        self._id = config.id
        self._num_peers = config.num_peers
        self._rpc_timeout = config.effective_rpc_timeout_ms

        self._mu = runtime.lock()
        self._cv_leader = runtime.condition(self._mu)    # commit loop sleeps here
        self._cv_follower = runtime.condition(self._mu)  # prepare loop sleeps here
        self._ballot = NO_LEADER_BALLOT
        self._commit_received = False

        self._rng = runtime.rng(f"engine-{self._id}")
        self._base_interval = config.commit_interval_ms
        self._effective_interval = config.commit_interval_ms
        self._election_times: deque[float] = deque()
        self._last_election_at: float | None = None

        # gap-fill bookkeeping (leader side)
        self._peer_last_executed: dict[int, int] = {}
        self._peer_stall_rounds: dict[int, int] = {}
        self._last_leader_le = 0

        self._shutdown = None  # event; one per start() generation

    # introspection

    def id(self) -> int:
        return self._id

    def ballot(self) -> int:
        with self._mu:
            return self._ballot

    def is_self_leader(self) -> bool:
        return is_leader(self.ballot(), self._id)

    def effective_commit_interval(self) -> float:
        with self._mu:
            return self._effective_interval

    def running(self) -> bool:
        return self._shutdown is not None and not self._shutdown.is_set()

    # lifecycle

    def start(self) -> None:
        assert self._shutdown is None or self._shutdown.is_set(), "already started"
        shutdown = self._rt.event()
        self._shutdown = shutdown
        self._rt.spawn(self._prepare_loop, shutdown, name=f"prepare-loop-{self._id}")
        self._rt.spawn(self._commit_loop, shutdown, name=f"commit-loop-{self._id}")

    def stop(self) -> None:
        shutdown = self._shutdown
        if shutdown is None or shutdown.is_set():
            return
        shutdown.set()
        with self._mu:
            self._cv_leader.notify_all()
            self._cv_follower.notify_all()

    # ballot bookkeeping (all under self._mu)

    def _set_ballot_locked(self, new_ballot: int) -> None:
        if new_ballot < self._ballot:
            raise SafetyViolationError(
                f"peer {self._id}: ballot would decrease {self._ballot} -> {new_ballot}"
            )
        self._ballot = new_ballot

    def next_ballot(self) -> int:
        with self._mu:
            return next_ballot(self._ballot, self._id)

    def become_leader(self, new_ballot: int, new_last_index: int) -> None:
        with self._mu:
            self._set_ballot_locked(new_ballot)
            self._log.set_last_index(new_last_index)
            self._emit("become_leader", ballot=new_ballot, last_index=new_last_index)
            self._cv_leader.notify_all()

    def become_follower(self, new_ballot: int) -> None:
        with self._mu:
            self._become_follower_locked(new_ballot)

    def _become_follower_locked(self, new_ballot: int) -> None:
        old_leader = extract_leader_id(self._ballot)
        new_leader = extract_leader_id(new_ballot)
        if new_leader != self._id or old_leader == MAX_NUM_PEERS:
            self._cv_follower.notify_all()
        self._set_ballot_locked(new_ballot)
        if new_leader != old_leader:
            self._emit("become_follower", ballot=new_ballot, leader=new_leader)

    # failure detector

    def _received_commit(self) -> bool:
        with self._mu:
            value = self._commit_received
            self._commit_received = False
            return value

    def _sleep_election_interval(self, shutdown) -> None:
        lo = self._cfg.election_multiplier_lo
        hi = self._cfg.election_multiplier_hi
        with self._mu:
            interval = self._effective_interval
        factor = lo if hi <= lo else lo + (hi - lo) * self._rng.random()
        shutdown.wait(timeout_ms=interval * factor)

    def _record_election(self) -> None:
        adaptive = self._cfg.adaptive_timeout
        with self._mu:
            now = self._rt.now()
            self._last_election_at = now
            self._emit("election", ballot=self._ballot)
            if not adaptive.enabled:
                return
            window = adaptive.window_multiplier * self._base_interval
            self._election_times.append(now)
            while self._election_times and self._election_times[0] < now - window:
                self._election_times.popleft()
            if len(self._election_times) >= adaptive.k:
                cap = adaptive.cap_multiplier * self._base_interval
                widened = min(self._effective_interval * 2, cap)
                if widened != self._effective_interval:
                    self._effective_interval = widened
                    self._emit("adapt", interval_ms=widened)

    def _maybe_reset_interval(self) -> None:
        # called right after a heartbeat was observed, so commits are flowing
        adaptive = self._cfg.adaptive_timeout
        if not adaptive.enabled:
            return
        with self._mu:
            if self._effective_interval <= self._base_interval or self._last_election_at is None:
                return
            quiet = adaptive.quiet_multiplier * self._base_interval
            if self._rt.now() - self._last_election_at >= quiet:
                self._effective_interval = self._base_interval
                self._election_times.clear()
                self._emit("adapt", interval_ms=self._base_interval)

    # client entry point

    def replicate(self, command: Command, client_id: int) -> ReplicateOutcome:
        ballot = self.ballot()
        if is_leader(ballot, self._id):
            return self._run_accept_phase(ballot, self._log.advance_last_index(), command, client_id)
        if is_someone_else_leader(ballot, self._id):
            return ReplicateOutcome(OutcomeKind.SOMEONE_ELSE_LEADER, leader=extract_leader_id(ballot))
        # the first ever election is still in progress
        return ReplicateOutcome(OutcomeKind.RETRY)

    # phases

    def run_prepare_phase(self, ballot: int):
        """Returns (last_index, merged_log) on quorum, or None on any failure."""
        state = _PhaseState(self._rt, self._id)
        with self._mu:
            if ballot <= self._ballot:
                return None  # someone moved faster; this attempt is stale
            state.num_rpcs += 1
            state.num_oks += 1
            state.last_index = self._log.last_index()
            for inst in self._log.instances():
                state.merged[inst.index] = inst
        request = PrepareRequest(ballot=ballot, sender=self._id)
        for peer in range(self._num_peers):
            if peer != self._id:
                self._rt.spawn(self._prepare_worker, peer, request, state,
                               name=f"prepare-rpc-{self._id}->{peer}")
        with state.mu:
            while (state.leader == self._id
                   and state.num_oks <= self._num_peers // 2
                   and state.num_rpcs != self._num_peers):
                state.cv.wait()
            if state.num_oks > self._num_peers // 2:
                return state.last_index, dict(state.merged)
            return None

    def _prepare_worker(self, peer: int, request: PrepareRequest, state: _PhaseState) -> None:
        response = self._transport.send_request(peer, request, self._rpc_timeout)
        with state.mu:
            state.num_rpcs += 1
            if isinstance(response, PrepareResponse):
                if response.type is ResponseType.OK:
                    state.num_oks += 1
                    for inst in response.instances:
                        if inst.index > state.last_index:
                            state.last_index = inst.index
                        merge_responses(state.merged, inst)
                else:
                    with self._mu:
                        if response.ballot > self._ballot:
                            self._become_follower_locked(response.ballot)
                            state.leader = extract_leader_id(self._ballot)
            state.cv.notify_all()

    def _run_accept_phase(self, ballot: int, index: int, command: Command,
                          client_id: int) -> ReplicateOutcome:
        state = _PhaseState(self._rt, self._id)
        instance = Instance(ballot=ballot, index=index, client_id=client_id,
                            state=InstanceState.IN_PROGRESS, command=command)
        with self._mu:
            current_leader = extract_leader_id(self._ballot)
            if current_leader != self._id:
                if current_leader < MAX_NUM_PEERS:
                    return ReplicateOutcome(OutcomeKind.SOMEONE_ELSE_LEADER, leader=current_leader)
                return ReplicateOutcome(OutcomeKind.RETRY)
            state.num_rpcs += 1
            state.num_oks += 1
            self._log.append(instance)
        request = AcceptRequest(instance=instance, sender=self._id)
        for peer in range(self._num_peers):
            if peer != self._id:
                self._rt.spawn(self._accept_worker, peer, request, state,
                               name=f"accept-rpc-{self._id}->{peer}")
        with state.mu:
            while (state.leader == self._id
                   and state.num_oks <= self._num_peers // 2
                   and state.num_rpcs != self._num_peers):
                state.cv.wait()
            num_oks = state.num_oks
            leader = state.leader
        if num_oks > self._num_peers // 2:
            self._log.commit(index)
            return ReplicateOutcome(OutcomeKind.OK)
        if leader != self._id:
            return ReplicateOutcome(OutcomeKind.SOMEONE_ELSE_LEADER, leader=leader)
        return ReplicateOutcome(OutcomeKind.RETRY)

    def _accept_worker(self, peer: int, request: AcceptRequest, state: _PhaseState) -> None:
        response = self._transport.send_request(peer, request, self._rpc_timeout)
        with state.mu:
            state.num_rpcs += 1
            if isinstance(response, AcceptResponse):
                if response.type is ResponseType.OK:
                    state.num_oks += 1
                else:
                    with self._mu:
                        if response.ballot > self._ballot:
                            self._become_follower_locked(response.ballot)
                            state.leader = extract_leader_id(self._ballot)
            state.cv.notify_all()

    def run_commit_phase(self, ballot: int, global_last_executed: int) -> int:
        """One heartbeat round; returns the new trim frontier.

        The frontier advances only when all peers answer ok: it is the
        minimum last_executed across the whole cluster, so a single silent
        peer freezes it (and the logs grow until that peer catches up).
        """
        state = _PhaseState(self._rt, self._id)
        own_last_executed = self._log.last_executed()
        state.num_rpcs = 1
        state.num_oks = 1
        state.min_last_executed = own_last_executed
        self._log.trim_until(global_last_executed)
        request = CommitRequest(ballot=ballot, last_executed=own_last_executed,
                                global_last_executed=global_last_executed, sender=self._id)
        for peer in range(self._num_peers):
            if peer != self._id:
                self._rt.spawn(self._commit_worker, peer, request, state,
                               name=f"commit-rpc-{self._id}->{peer}")
        with state.mu:
            while state.leader == self._id and state.num_rpcs != self._num_peers:
                state.cv.wait()
            num_oks = state.num_oks
            leader = state.leader
            min_last_executed = state.min_last_executed
            peer_last_executed = dict(state.peer_last_executed)
        self._emit("commit_round", oks=num_oks, min_last_executed=min_last_executed,
                   gle=global_last_executed)
        if leader == self._id:
            self._maybe_gap_fill(ballot, peer_last_executed, own_last_executed)
        if num_oks == self._num_peers:
            return min_last_executed
        return global_last_executed

    def _commit_worker(self, peer: int, request: CommitRequest, state: _PhaseState) -> None:
        response = self._transport.send_request(peer, request, self._rpc_timeout)
        with state.mu:
            state.num_rpcs += 1
            if isinstance(response, CommitResponse):
                if response.type is ResponseType.OK:
                    state.num_oks += 1
                    state.peer_last_executed[peer] = response.last_executed
                    if response.last_executed < state.min_last_executed:
                        state.min_last_executed = response.last_executed
                else:
                    with self._mu:
                        if response.ballot > self._ballot:
                            self._become_follower_locked(response.ballot)
                            state.leader = extract_leader_id(self._ballot)
            state.cv.notify_all()

    # replay of the merged recovery log

    def replay(self, ballot: int, merged: dict[int, Instance]) -> None:
        """Re-run the accept phase for every merged instance, lowest index first.

        Runs on the prepare loop, concurrently with fresh replications.  Any
        failed accept means leadership moved (or quorum vanished); the rest is
        abandoned and left to the next leader's recovery.
        """
        for index in sorted(merged):
            if index <= self._log.global_last_executed():
                continue  # merged from a peer lagging behind our trim frontier
            inst = merged[index]
            outcome = self._run_accept_phase(ballot, index, inst.command, inst.client_id)
            if outcome.kind is not OutcomeKind.OK:
                log.info("peer %d: replay stopped at slot %d (%s)",
                         self._id, index, outcome.kind.value)
                return

    # gap fill (leader side)

    def _maybe_gap_fill(self, ballot: int, peer_last_executed: dict[int, int],
                        leader_last_executed: int) -> None:
        if self._cfg.gap_fill.mode != "retransmit":
            return
        leader_advanced = leader_last_executed > self._last_leader_le
        self._last_leader_le = leader_last_executed
        for peer, le in peer_last_executed.items():
            previous = self._peer_last_executed.get(peer)
            self._peer_last_executed[peer] = le
            if previous is not None and le == previous and le < leader_last_executed and leader_advanced:
                self._peer_stall_rounds[peer] = self._peer_stall_rounds.get(peer, 0) + 1
            else:
                self._peer_stall_rounds[peer] = 0
            if self._peer_stall_rounds[peer] >= self._cfg.gap_fill.stall_rounds:
                self._retransmit_range(ballot, peer, le, leader_last_executed)

    def _retransmit_range(self, ballot: int, peer: int, lo: int, hi: int) -> None:
        sent = 0
        for index in range(lo + 1, hi + 1):
            stored = self._log.at(index)
            if stored is None:
                continue
            fresh = Instance(ballot=ballot, index=index, client_id=stored.client_id,
                             state=InstanceState.IN_PROGRESS, command=stored.command)
            self._rt.spawn(self._gap_fill_worker, peer, AcceptRequest(instance=fresh, sender=self._id),
                           name=f"gapfill-rpc-{self._id}->{peer}")
            sent += 1
            if sent >= self._cfg.gap_fill.batch_cap:
                break
        if sent:
            self._emit("gap_fill", target=peer, lo=lo, count=sent)

    def _gap_fill_worker(self, peer: int, request: AcceptRequest) -> None:
        response = self._transport.send_request(peer, request, self._rpc_timeout)
        if (isinstance(response, AcceptResponse) and response.type is ResponseType.REJECT):
            with self._mu:
                if response.ballot > self._ballot:
                    self._become_follower_locked(response.ballot)

    # RPC handlers

    def handle_message(self, msg):
        if self._shutdown is not None and self._shutdown.is_set():
            return None  # stopped peers answer nothing
        if isinstance(msg, PrepareRequest):
            return self.on_prepare(msg)
        if isinstance(msg, AcceptRequest):
            return self.on_accept(msg)
        if isinstance(msg, CommitRequest):
            return self.on_commit(msg)
        log.warning("peer %d: unexpected message %r", self._id, msg)
        return None

    def on_prepare(self, request: PrepareRequest) -> PrepareResponse:
        with self._mu:
            if request.ballot >= self._ballot:
                # equality makes a duplicate prepare from the ballot owner idempotent
                if request.ballot > self._ballot:
                    self._become_follower_locked(request.ballot)
                return PrepareResponse(type=ResponseType.OK,
                                       instances=tuple(self._log.instances()))
            return PrepareResponse(type=ResponseType.REJECT, ballot=self._ballot)

    def on_accept(self, request: AcceptRequest) -> AcceptResponse:
        with self._mu:
            ballot = request.instance.ballot
            if ballot >= self._ballot:
                if ballot > self._ballot:
                    self._become_follower_locked(ballot)
                self._log.append(request.instance)
                return AcceptResponse(type=ResponseType.OK)
            return AcceptResponse(type=ResponseType.REJECT, ballot=self._ballot)

    def on_commit(self, request: CommitRequest) -> CommitResponse:
        with self._mu:
            if request.ballot >= self._ballot:
                self._commit_received = True
                if request.ballot > self._ballot:
                    self._become_follower_locked(request.ballot)
                self._log.commit_until(request.last_executed, request.ballot)
                self._log.trim_until(request.global_last_executed)
                return CommitResponse(type=ResponseType.OK,
                                      last_executed=self._log.last_executed())
            return CommitResponse(type=ResponseType.REJECT, ballot=self._ballot)

    # long-lived loops

    def _prepare_loop(self, shutdown) -> None:
        while not shutdown.is_set():
            with self._mu:
                while not shutdown.is_set() and is_leader(self._ballot, self._id):
                    self._cv_follower.wait()
            while not shutdown.is_set():
                self._sleep_election_interval(shutdown)
                if shutdown.is_set():
                    return
                if self.is_self_leader():
                    break  # leadership arrived outside this loop; back to outer sleep
                if self._received_commit():
                    self._maybe_reset_interval()
                    continue
                self._record_election()
                ballot = self.next_ballot()
                result = self.run_prepare_phase(ballot)
                if result is not None:
                    last_index, merged = result
                    self.become_leader(ballot, last_index)
                    self.replay(ballot, merged)
                    break

    def _commit_loop(self, shutdown) -> None:
        while not shutdown.is_set():
            with self._mu:
                while not shutdown.is_set() and not is_leader(self._ballot, self._id):
                    self._cv_leader.wait()
            if shutdown.is_set():
                return
            gle = self._log.global_last_executed()
            while not shutdown.is_set():
                ballot = self.ballot()
                if not is_leader(ballot, self._id):
                    break
                started = self._rt.now()
                gle = self.run_commit_phase(ballot, gle)
                with self._mu:
                    interval = self._effective_interval
                # sleep the remainder so heartbeat cadence stays one interval
                # even when a dead peer burns the whole rpc deadline
                remaining = interval - (self._rt.now() - started)
                if remaining > 0:
                    shutdown.wait(timeout_ms=remaining)

    # events

    def _emit(self, kind: str, **fields) -> None:
        if self._listener is not None:
            fields.update(t=self._rt.now(), peer=self._id, kind=kind)
            self._listener(fields)
