"""Message delivery backends.

``SocketTransport``/``FramedServer`` carry framed JSON over TCP for real
deployments.  ``SimNetwork`` is the deterministic in-process backend: messages
still round-trip through the wire codec (so the sim exercises the same
encoding and never shares object references between nodes), but delivery is
driven by the simulation scheduler with seeded latency, directional link
states, and node up/down flags.  A message sent on a down link is dropped,
never queued; the sender only learns about it by timeout.
"""

from __future__ import annotations

import logging
import socket
import threading
from collections import deque

from paxoskv.core import Message
from paxoskv.wire import CodecError, decode_message, encode_message, read_frame, write_frame

log = logging.getLogger(__name__)

DEFAULT_RPC_TIMEOUT_MS = 1000.0


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host, int(port)


class SocketTransport:
    """Per-node client side of peer RPC: one pooled connection stream per in-flight call."""

    def __init__(self, peer_addrs: list[str], default_timeout_ms: float = DEFAULT_RPC_TIMEOUT_MS):
        self._addrs = [parse_addr(a) for a in peer_addrs]
        self._default_timeout_ms = default_timeout_ms
        self._pools: dict[int, deque] = {i: deque() for i in range(len(peer_addrs))}
        self._mu = threading.Lock()
        self._closed = False

    def send_request(self, to: int, msg: Message, timeout_ms: float | None = None) -> Message | None:
        """At-most-once request; returns the response or None on any failure."""
        if timeout_ms is None:
            timeout_ms = self._default_timeout_ms
        sock = self._lease(to, timeout_ms)
        if sock is None:
            return None
        try:
            sock.settimeout(timeout_ms / 1000.0)
            write_frame(sock, encode_message(msg))
            payload = read_frame(sock)
            if payload is None:
                raise CodecError("peer closed connection")
            response = decode_message(payload)
        except (OSError, CodecError):
            _close_quietly(sock)
            return None
        self._release(to, sock)
        return response

    def _lease(self, to: int, timeout_ms: float):
        with self._mu:
            if self._closed:
                return None
            pool = self._pools[to]
            if pool:
                return pool.popleft()
        try:
            return socket.create_connection(self._addrs[to], timeout=timeout_ms / 1000.0)
        except OSError:
            return None

    def _release(self, to: int, sock) -> None:
        with self._mu:
            if not self._closed and len(self._pools[to]) < 4:
                self._pools[to].append(sock)
                return
        _close_quietly(sock)

    def close(self) -> None:
        with self._mu:
            self._closed = True
            socks = [s for pool in self._pools.values() for s in pool]
            for pool in self._pools.values():
                pool.clear()
        for s in socks:
            _close_quietly(s)


def _close_quietly(sock) -> None:
    try:
        sock.close()
    except OSError:
        pass


class FramedServer:
    """TCP server speaking length-prefixed frames; one session handler per connection.

    ``session_factory()`` returns a callable ``handle(payload: bytes) -> bytes | None``;
    returning None ends the session.
    """

    def __init__(self, runtime, host: str, port: int, session_factory, name: str = "server"):
        self._runtime = runtime
        self._host = host
        self._port = port
        self._session_factory = session_factory
        self._name = name
        self._listener = None
        self._conns: set = set()
        self._mu = threading.Lock()
        self._stopping = False

    @property
    def port(self) -> int:
        return self._port

    def start(self) -> None:
        self._stopping = False
        lsock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        lsock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        lsock.bind((self._host, self._port))
        lsock.listen(64)
        self._port = lsock.getsockname()[1]
        self._listener = lsock
        self._runtime.spawn(self._accept_loop, lsock, name=f"{self._name}-accept")

    def stop(self) -> None:
        self._stopping = True
        if self._listener is not None:
            _close_quietly(self._listener)
            self._listener = None
        with self._mu:
            conns = list(self._conns)
            self._conns.clear()
        for c in conns:
            _close_quietly(c)

    def _accept_loop(self, lsock) -> None:
        while not self._stopping:
            try:
                conn, _ = lsock.accept()
            except OSError:
                return
            with self._mu:
                if self._stopping:
                    _close_quietly(conn)
                    return
                self._conns.add(conn)
            self._runtime.spawn(self._serve, conn, name=f"{self._name}-conn")

    def _serve(self, conn) -> None:
        handle = self._session_factory()
        try:
            while True:
                payload = read_frame(conn)
                if payload is None:
                    return
                reply = handle(payload)
                if reply is None:
                    return
                write_frame(conn, reply)
        except (OSError, CodecError):
            return
        finally:
            with self._mu:
                self._conns.discard(conn)
            _close_quietly(conn)
            done = getattr(handle, "close", None)
            if done is not None:
                done()


# --- simulated network -----------------------------------------------------


class SimNetwork:
    """Deterministic message fabric for in-process clusters.

    Link states are directional; ``set_link(a, b, up=False)`` makes a->b drop
    silently.  ``set_node_up(p, False)`` models a crashed process: nothing is
    delivered to it and nothing it previously scheduled gets out.  Latency is
    sampled from the runtime's seeded rng, so delivery order is reproducible.
    """

    def __init__(self, runtime, latency_ms: float = 1.0, jitter_ms: float = 0.2):
        self._runtime = runtime
        self._rng = runtime.rng("simnet")
        self._latency_ms = latency_ms
        self._jitter_ms = jitter_ms
        self._handlers: dict[int, object] = {}
        self._down: set[tuple[int, int]] = set()
        self._dead: set[int] = set()
        self.deliveries: list[tuple[float, str, int, int, str]] = []

    def register(self, peer_id: int, handler) -> None:
        self._handlers[peer_id] = handler

    def endpoint(self, peer_id: int) -> "SimEndpoint":
        return SimEndpoint(self, peer_id)

    def set_link(self, a: int, b: int, up: bool) -> None:
        if up:
            self._down.discard((a, b))
        else:
            self._down.add((a, b))

    def cut_both(self, a: int, b: int) -> None:
        self.set_link(a, b, up=False)
        self.set_link(b, a, up=False)

    def heal_all(self) -> None:
        self._down.clear()

    def set_node_up(self, peer_id: int, up: bool) -> None:
        if up:
            self._dead.discard(peer_id)
        else:
            self._dead.add(peer_id)

    def link_up(self, a: int, b: int) -> bool:
        return (a, b) not in self._down

    def _delay(self) -> float:
        if self._jitter_ms <= 0:
            return self._latency_ms
        return max(0.0, self._latency_ms + self._rng.uniform(-self._jitter_ms, self._jitter_ms))

    def send_request(self, frm: int, to: int, msg: Message, timeout_ms: float) -> Message | None:
        runtime = self._runtime
        payload = encode_message(msg)
        done = runtime.event()
        box: dict[str, bytes] = {}

        if frm not in self._dead and to not in self._dead and self.link_up(frm, to):
            def deliver():
                if to in self._dead:
                    return
                self.deliveries.append((runtime.now(), "req", frm, to, _kind(payload)))
                runtime.spawn(handle, name=f"rpc-{frm}->{to}")

            def handle():
                handler = self._handlers.get(to)
                if handler is None:
                    return
                response = handler(decode_message(payload))
                if response is None:
                    return
                if to in self._dead or frm in self._dead or not self.link_up(to, frm):
                    return
                resp_payload = encode_message(response)

                def deliver_response():
                    if frm in self._dead:
                        return
                    self.deliveries.append((runtime.now(), "resp", to, frm, _kind(resp_payload)))
                    box["resp"] = resp_payload
                    done.set()

                runtime.call_later(self._delay(), deliver_response)

            runtime.call_later(self._delay(), deliver)

        done.wait(timeout_ms)
        if "resp" in box:
            return decode_message(box["resp"])
        return None


class SimEndpoint:
    """Per-node view of a SimNetwork, matching the SocketTransport surface."""

    def __init__(self, net: SimNetwork, peer_id: int, default_timeout_ms: float = DEFAULT_RPC_TIMEOUT_MS):
        self._net = net
        self._id = peer_id
        self._default_timeout_ms = default_timeout_ms

    def send_request(self, to: int, msg: Message, timeout_ms: float | None = None) -> Message | None:
        if timeout_ms is None:
            timeout_ms = self._default_timeout_ms
        return self._net.send_request(self._id, to, msg, timeout_ms)

    def close(self) -> None:
        pass


def _kind(payload: bytes) -> str:
    # cheap discriminator extraction for the delivery trace
    marker = b'"kind":"'
    i = payload.find(marker)
    if i < 0:
        return "?"
    j = payload.find(b'"', i + len(marker))
    return payload[i + len(marker):j].decode("ascii", "replace")
