"""Closed-loop wall-clock workload driver for a socket-transport cluster.

N client threads each keep exactly one request in flight: build a command
(zipfian key, configurable read fraction), send it over the framed client
protocol, wait for the response, repeat.  Clients follow leader hints and
rotate endpoints on connection failures.  Throughput and latency are reported
over the post-warmup window.
"""

from __future__ import annotations

import json
import logging
import random
import socket
import threading
import time
from dataclasses import dataclass

from paxoskv.transport import parse_addr
from paxoskv.wire import CodecError, read_frame, write_frame

log = logging.getLogger(__name__)

UNAVAILABLE_ABORT_S = 30.0


@dataclass
class WorkloadSpec:
    clients: int = 8
    duration_s: float = 20.0
    read_fraction: float = 0.5
    key_count: int = 1000
    zipfian_theta: float = 0.99
    key_len: int = 23
    value_len: int = 500
    warmup_s: float = 2.0
    seed: int | None = None


class ZipfianGenerator:
    """Rejection-free zipfian sampler (the classic Gray et al. construction)."""

    def __init__(self, item_count: int, theta: float, rng):
        if item_count < 2:
            raise ValueError("need at least two items")
        self._n = item_count
        self._theta = theta
        self._rng = rng
        self._zetan = self._zeta(item_count)
        self._zeta2 = self._zeta(2)
        self._alpha = 1.0 / (1.0 - theta)
        self._eta = (1.0 - (2.0 / item_count) ** (1.0 - theta)) / (1.0 - self._zeta2 / self._zetan)

    def _zeta(self, n: int) -> float:
        return sum(1.0 / (i ** self._theta) for i in range(1, n + 1))

    def next(self) -> int:
        u = self._rng.random()
        uz = u * self._zetan
        if uz < 1.0:
            return 0
        if uz < 1.0 + 0.5 ** self._theta:
            return 1
        return int(self._n * (self._eta * u - self._eta + 1.0) ** self._alpha)


class _ClientStats:
    def __init__(self):
        self.completions: list[tuple[float, float]] = []  # (t_done_monotonic, latency_ms)
        self.aborted = False


def _make_key(index: int, key_len: int) -> bytes:
    return (b"key" + str(index).encode().rjust(key_len - 3, b"0"))[:key_len]


def _client_worker(idx: int, spec: WorkloadSpec, addrs: list[tuple[str, int]],
                   deadline: float, stats: _ClientStats, rng) -> None:
    zipf = ZipfianGenerator(spec.key_count, spec.zipfian_theta, rng)
    value = bytes(rng.randrange(256) for _ in range(spec.value_len))
    target = idx % len(addrs)
    sock = None
    request_id = 0
    last_success = time.monotonic()
    while time.monotonic() < deadline:
        if time.monotonic() - last_success > UNAVAILABLE_ABORT_S:
            stats.aborted = True
            return
        if sock is None:
            try:
                sock = socket.create_connection(addrs[target], timeout=1.0)
                sock.settimeout(5.0)
            except OSError:
                sock = None
                target = (target + 1) % len(addrs)
                time.sleep(0.1)
                continue
        key = _make_key(zipf.next(), spec.key_len)
        if rng.random() < spec.read_fraction:
            command = {"type": "get", "key": key.decode("latin-1")}
        else:
            command = {"type": "put", "key": key.decode("latin-1"),
                       "value": value.decode("latin-1")}
        request_id += 1
        payload = json.dumps({"request_id": request_id, "command": command}).encode()
        started = time.monotonic()
        try:
            write_frame(sock, payload)
            raw = read_frame(sock)
            if raw is None:
                raise OSError("server closed")
            response = json.loads(raw.decode("utf-8"))
        except (OSError, CodecError, ValueError):
            try:
                sock.close()
            except OSError:
                pass
            sock = None
            target = (target + 1) % len(addrs)
            continue
        outcome = response.get("outcome")
        if outcome == "ok":
            now = time.monotonic()
            stats.completions.append((now, (now - started) * 1000.0))
            last_success = now
        elif outcome == "leader_hint":
            leader = response.get("leader")
            if isinstance(leader, int) and 0 <= leader < len(addrs) and leader != target:
                target = leader
                try:
                    sock.close()
                except OSError:
                    pass
                sock = None
            else:
                time.sleep(0.05)
        else:  # retry: an election is in progress
            time.sleep(0.05)
    if sock is not None:
        try:
            sock.close()
        except OSError:
            pass


def run_workload(spec: WorkloadSpec, addrs: list[str]) -> dict:
    """Drive the workload against client endpoints (index = peer id); returns the report."""
    parsed = [parse_addr(a) for a in addrs]
    start = time.monotonic()
    deadline = start + spec.duration_s
    stats = [_ClientStats() for _ in range(spec.clients)]
    threads = []
    for i in range(spec.clients):
        rng = random.Random(f"{spec.seed}:{i}") if spec.seed is not None else random.Random()
        t = threading.Thread(target=_client_worker, name=f"bench-client-{i}",
                             args=(i, spec, parsed, deadline, stats[i], rng), daemon=True)
        threads.append(t)
        t.start()
    for t in threads:
        t.join(spec.duration_s + UNAVAILABLE_ABORT_S + 10.0)

    cutoff = start + spec.warmup_s
    latencies = []
    per_second: dict[int, int] = {}
    total_ops = 0
    for st in stats:
        for t_done, lat_ms in st.completions:
            total_ops += 1
            per_second[int(t_done - start)] = per_second.get(int(t_done - start), 0) + 1
            if t_done >= cutoff:
                latencies.append(lat_ms)
    window = max(1e-9, spec.duration_s - spec.warmup_s)
    latencies.sort()
    report = {
        "clients": spec.clients,
        "duration_s": spec.duration_s,
        "warmup_s": spec.warmup_s,
        "total_ops": total_ops,
        "measured_ops": len(latencies),
        "throughput_ops": len(latencies) / window,
        "latency_avg_ms": (sum(latencies) / len(latencies)) if latencies else None,
        "latency_p50_ms": latencies[len(latencies) // 2] if latencies else None,
        "latency_p99_ms": latencies[min(len(latencies) - 1, int(0.99 * len(latencies)))] if latencies else None,
        "ops_per_second": {str(k): v for k, v in sorted(per_second.items())},
        "aborted_clients": sum(1 for st in stats if st.aborted),
    }
    return report
