"""A runnable replica: kvstore -> log -> consensus engine -> transport, plus client serving.

The executor loop is the single consumer of the log; it applies commands in
index order and routes each result back to the waiting client session when the
originating client is local (followers execute purely for state).  Client ids
embed the node id in their low 8 bits so ids stay globally unique across
leader changes and results are never misrouted.
"""

from __future__ import annotations

import json
import logging

from paxoskv.config import Config
from paxoskv.core import Command, CommandResult, OutcomeKind
from paxoskv.kvstore import KVStore
from paxoskv.log import Log
from paxoskv.multipaxos import MultiPaxos
from paxoskv.transport import FramedServer, SimNetwork, SocketTransport, parse_addr
from paxoskv.wire import CodecError, command_from_dict

log = logging.getLogger(__name__)

RESULT_WAIT_MS = 60_000.0


class _Pending:
    __slots__ = ("event", "result")

    def __init__(self, runtime):
        self.event = runtime.event()
        self.result: CommandResult | None = None


class Node:
    """One replica.  Pass a SimNetwork for simulated clusters; otherwise it opens sockets."""

    def __init__(self, config: Config, runtime, sim_network: SimNetwork | None = None,
                 listener=None, trace: bool = False):
        config.validate()
        self.config = config
        self.id = config.id
        self._rt = runtime
        self._sim_network = sim_network
        self._listener = listener

        self.kv = KVStore()
        self.execution_trace: list[tuple[int, Command]] = []
        on_execute = self._record_execution if trace else None
        self.log = Log(self.kv, runtime, on_execute=on_execute)

        if sim_network is not None:
            transport = sim_network.endpoint(config.id)
        else:
            transport = SocketTransport(config.peers, config.effective_rpc_timeout_ms)
        self._transport = transport
        self.mp = MultiPaxos(self.log, config, transport, runtime, listener=listener)

        self._pending_mu = runtime.lock()
        self._pending: dict[int, _Pending] = {}
        self._client_counter = 0

        self._peer_server: FramedServer | None = None
        self._client_server: FramedServer | None = None
        self._started = False

    # lifecycle

    def start(self) -> None:
        assert not self._started, "node already started"
        self._started = True
        if not self.log.is_running():
            self.log.restart()
        self._rt.spawn(self._executor_loop, name=f"executor-{self.id}")
        self.mp.start()
        if self._sim_network is not None:
            self._sim_network.register(self.id, self.mp.handle_message)
            self._sim_network.set_node_up(self.id, True)
        else:
            host, port = parse_addr(self.config.peers[self.id])
            self._peer_server = FramedServer(self._rt, host, port, self._peer_session,
                                             name=f"peer-rpc-{self.id}")
            self._peer_server.start()
            self._client_server = FramedServer(self._rt, host, self.config.client_port,
                                               self._client_session, name=f"client-{self.id}")
            self._client_server.start()

    def stop(self) -> None:
        if not self._started:
            return
        self._started = False
        if self._client_server is not None:
            self._client_server.stop()
        if self._peer_server is not None:
            self._peer_server.stop()
        if self._sim_network is not None:
            self._sim_network.set_node_up(self.id, False)
        self.mp.stop()
        self.log.stop()
        self._transport.close()
        self._flush_pending()

    def crash(self) -> None:
        """Abrupt halt: loops stop, nothing is served, in-memory state survives."""
        self.stop()

    def restart(self) -> None:
        """Resume a crashed replica with its preserved log, ballot, and kv state."""
        self.start()

    @property
    def client_port(self) -> int:
        return self._client_server.port if self._client_server is not None else 0

    # client path (shared by socket sessions and in-process sim clients)

    def new_client_id(self) -> int:
        with self._pending_mu:
            self._client_counter += 1
            return (self._client_counter << 8) | self.id

    def submit_command(self, command: Command, client_id: int):
        """Run one command through the log; returns (outcome, result, leader_hint).

        The pending slot is registered before replicate so the executor cannot
        surface the result ahead of the wait.  Sessions keep one outstanding
        request per client id and retry the same command, so a stale result
        from an earlier attempt of the same command is indistinguishable from
        a fresh one (command application is at-least-once under retries).
        """
        pending = _Pending(self._rt)
        with self._pending_mu:
            self._pending[client_id] = pending
        outcome = self.mp.replicate(command, client_id)
        if outcome.kind is OutcomeKind.OK:
            pending.event.wait(timeout_ms=RESULT_WAIT_MS)
            with self._pending_mu:
                self._pending.pop(client_id, None)
            if pending.result is None:
                return "retry", None, None
            return "ok", pending.result, None
        with self._pending_mu:
            self._pending.pop(client_id, None)
        if outcome.kind is OutcomeKind.SOMEONE_ELSE_LEADER:
            return "leader_hint", None, outcome.leader
        return "retry", None, None

    # internals

    def _executor_loop(self) -> None:
        while True:
            item = self.log.execute()
            if item is None:
                return
            client_id, result = item
            if (client_id & 0xFF) != self.id:
                continue  # replicated for state only; the owner answers its client
            with self._pending_mu:
                pending = self._pending.get(client_id)
            if pending is not None:
                pending.result = result
                pending.event.set()

    def _record_execution(self, index: int, instance) -> None:
        self.execution_trace.append((index, instance.command))

    def _flush_pending(self) -> None:
        with self._pending_mu:
            pendings = list(self._pending.values())
            self._pending.clear()
        for p in pendings:
            p.event.set()

    def _peer_session(self):
        from paxoskv.wire import decode_message, encode_message

        def handle(payload: bytes) -> bytes | None:
            response = self.mp.handle_message(decode_message(payload))
            if response is None:
                return None
            return encode_message(response)

        return handle

    def _client_session(self):
        client_id = self.new_client_id()

        def handle(payload: bytes) -> bytes | None:
            try:
                request = json.loads(payload.decode("utf-8"))
                command = command_from_dict(request["command"])
                request_id = request["request_id"]
            except (ValueError, KeyError, CodecError):
                return None
            outcome, result, leader = self.submit_command(command, client_id)
            response = {"request_id": request_id, "outcome": outcome}
            if result is not None and result.value is not None:
                response["value"] = result.value.decode("latin-1")
            if leader is not None:
                response["leader"] = leader
            return json.dumps(response, sort_keys=True).encode("utf-8")

        return handle
