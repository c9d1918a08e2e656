"""Deterministic scenario runner for partition and compaction experiments.

A scenario boots an in-process cluster on the simulated network, applies
scripted link/crash events at virtual times, drives a closed-loop workload,
samples per-peer metrics every commit interval, and finishes with cross-peer
agreement and log-invariant checks.  Identical (script, seed) pairs produce
identical reports.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import asdict, dataclass, field

from paxoskv.config import AdaptiveTimeoutConfig, Config, GapFillConfig
from paxoskv.core import (
    MAX_NUM_PEERS,
    Command,
    CommandKind,
    SafetyViolationError,
    extract_leader_id,
)
from paxoskv.kvstore import KVStore
from paxoskv.node import Node
from paxoskv.runtime import SimRuntime
from paxoskv.transport import SimNetwork

log = logging.getLogger(__name__)


@dataclass
class SimWorkload:
    clients: int = 2
    mode: str = "closed_loop"
    key_dist: str = "uniform"  # "uniform" | "zipfian"
    zipfian_theta: float = 0.99
    key_count: int = 64
    read_fraction: float = 0.5
    think_time_ms: float = 100.0


@dataclass
class ScenarioEvent:
    at_ms: float
    action: str  # set_link | cut | isolate_follower | heal_all | crash | restart
    a: int | None = None
    b: int | None = None
    up: bool = False


@dataclass
class ScenarioScript:
    name: str
    cluster_size: int = 3
    duration_ms: float = 10_000.0
    events: list[ScenarioEvent] = field(default_factory=list)
    workload: SimWorkload = field(default_factory=SimWorkload)
    seed: int = 0
    commit_interval_ms: float = 300.0
    election_multiplier_lo: float = 1.5
    election_multiplier_hi: float = 2.0
    adaptive_enabled: bool = True
    gap_fill_mode: str = "retransmit"
    latency_ms: float = 1.0
    jitter_ms: float = 0.2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioScript":
        d = dict(d)
        if isinstance(d.get("workload"), dict):
            d["workload"] = SimWorkload(**d["workload"])
        d["events"] = [ScenarioEvent(**e) if isinstance(e, dict) else e for e in d.get("events", [])]
        return cls(**d)

    @classmethod
    def from_file(cls, path: str) -> "ScenarioScript":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


@dataclass
class RunReport:
    scenario: str
    seed: int
    duration_ms: float
    leader_timeline: list = field(default_factory=list)           # (t, peer, ballot)
    elections_initiated: dict = field(default_factory=dict)       # peer -> count
    adapt_events: list = field(default_factory=list)              # (t, peer, interval_ms)
    gap_fill_events: list = field(default_factory=list)           # (t, peer, target, count)
    sample_times: list = field(default_factory=list)
    log_len_series: dict = field(default_factory=dict)            # peer -> [len per sample]
    gle_series: dict = field(default_factory=dict)
    last_executed_series: dict = field(default_factory=dict)
    committed_per_interval: list = field(default_factory=list)
    commit_rounds: list = field(default_factory=list)             # (t, peer, oks, min_le, gle)
    client_ops: int = 0
    invariant_violations: list = field(default_factory=list)
    isolated_peer: int | None = None
    notes: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @property
    def ok(self) -> bool:
        return not self.invariant_violations


class SimCluster:
    """N nodes over one SimNetwork and one scheduler; collects engine events."""

    def __init__(self, size: int, seed: int = 0, commit_interval_ms: float = 300.0,
                 adaptive_enabled: bool = True, gap_fill_mode: str = "retransmit",
                 election_multiplier_lo: float = 1.5, election_multiplier_hi: float = 2.0,
                 latency_ms: float = 1.0, jitter_ms: float = 0.2):
        self.runtime = SimRuntime(seed)
        self.net = SimNetwork(self.runtime, latency_ms=latency_ms, jitter_ms=jitter_ms)
        self.events: list[dict] = []
        self.violations: list[str] = []
        self.runtime.on_task_error = self._on_task_error
        self.nodes: list[Node] = []
        for i in range(size):
            cfg = Config(
                id=i,
                peers=[f"sim://{p}" for p in range(size)],
                commit_interval_ms=commit_interval_ms,
                election_multiplier_lo=election_multiplier_lo,
                election_multiplier_hi=election_multiplier_hi,
                adaptive_timeout=AdaptiveTimeoutConfig(enabled=adaptive_enabled),
                gap_fill=GapFillConfig(mode=gap_fill_mode),
                seed=seed,
            )
            self.nodes.append(Node(cfg, self.runtime, sim_network=self.net,
                                   listener=self.events.append, trace=True))

    def _on_task_error(self, name: str, exc: BaseException) -> None:
        kind = "safety" if isinstance(exc, SafetyViolationError) else "task-error"
        self.violations.append(f"{kind}: {name}: {exc!r}")

    def start_all(self) -> None:
        for node in self.nodes:
            node.start()

    def stop_all(self) -> None:
        for node in self.nodes:
            node.stop()

    def current_leader(self) -> int | None:
        ballots = [node.mp.ballot() for node in self.nodes]
        leader = extract_leader_id(max(ballots))
        return leader if leader < MAX_NUM_PEERS else None

    def check_log_invariants(self) -> None:
        for node in self.nodes:
            try:
                node.log.check_invariants()
            except SafetyViolationError as exc:
                self.violations.append(f"log-invariant: peer {node.id}: {exc}")


def check_agreement(nodes) -> list[str]:
    """Cross-peer safety: executed sequences must be command-equal prefixes of each other.

    Uses per-node execution traces (what each state machine actually applied),
    so trimming never hides history.  Also replays each trace into a fresh
    store and compares tables, confirming state is a pure function of the
    trace.
    """
    violations: list[str] = []
    traces = {node.id: node.execution_trace for node in nodes}
    for pid, trace in traces.items():
        for k, (index, _) in enumerate(trace):
            if index != k + 1:
                violations.append(f"peer {pid}: execution skipped to index {index} at step {k + 1}")
                break
    longest_pid = max(traces, key=lambda p: len(traces[p]))
    longest = traces[longest_pid]
    for pid, trace in traces.items():
        for k, (index, cmd) in enumerate(trace):
            if k < len(longest) and cmd != longest[k][1]:
                violations.append(
                    f"agreement violation at index {k + 1}: peer {pid} executed {cmd} "
                    f"vs peer {longest_pid} {longest[k][1]}"
                )
    by_len: dict[int, tuple[int, dict]] = {}
    for node in nodes:
        replayed = KVStore()
        for _, cmd in node.execution_trace:
            replayed.apply(cmd)
        actual = node.kv.snapshot()
        if replayed.snapshot() != actual:
            violations.append(f"peer {node.id}: kv state diverged from its own execution trace")
        n = len(node.execution_trace)
        if n in by_len:
            other_id, other_snapshot = by_len[n]
            if actual != other_snapshot:
                violations.append(
                    f"peers {node.id} and {other_id} executed {n} commands but differ in kv state"
                )
        else:
            by_len[n] = (node.id, actual)
    return violations


# --- workload ---------------------------------------------------------------


class _WorkloadStats:
    def __init__(self):
        self.ops = 0


def _client_loop(cluster: SimCluster, spec: SimWorkload, idx: int, stop, stats: _WorkloadStats):
    runtime = cluster.runtime
    rng = runtime.rng(f"client-{idx}")
    nodes = cluster.nodes
    target = nodes[idx % len(nodes)]
    client_id = target.new_client_id()
    zipf = None
    if spec.key_dist == "zipfian":
        from paxoskv.bench import ZipfianGenerator
        zipf = ZipfianGenerator(spec.key_count, spec.zipfian_theta, rng)
    misses = 0
    while not stop.is_set():
        k = zipf.next() if zipf is not None else rng.randrange(spec.key_count)
        key = f"key{k:06d}".encode()
        if rng.random() < spec.read_fraction:
            cmd = Command(CommandKind.GET, key)
        else:
            cmd = Command(CommandKind.PUT, key, f"v{idx}-{stats.ops}".encode())
        outcome, _result, leader = target.submit_command(cmd, client_id)
        if stop.is_set():
            return
        if outcome == "ok":
            stats.ops += 1
            misses = 0
            if spec.think_time_ms > 0:
                runtime.sleep(spec.think_time_ms)
            continue
        # Hints can chase a moving target during churn (X names Y while Y
        # names X); bound the chase before backing off so the client cannot
        # spin without consuming virtual time.
        misses += 1
        if outcome == "leader_hint" and leader is not None and leader < len(nodes):
            target = nodes[leader]
            client_id = target.new_client_id()
        elif misses % 3 == 0:
            target = nodes[(nodes.index(target) + 1) % len(nodes)]
            client_id = target.new_client_id()
        if outcome != "leader_hint" or misses > len(nodes):
            runtime.sleep(max(50.0, spec.think_time_ms))
            misses = 0


# --- scenario execution -----------------------------------------------------


def _apply_event(cluster: SimCluster, ev: ScenarioEvent, report: RunReport) -> None:
    net = cluster.net
    size = len(cluster.nodes)
    if ev.action == "set_link":
        net.set_link(ev.a, ev.b, up=ev.up)
    elif ev.action == "cut":
        net.cut_both(ev.a, ev.b)
    elif ev.action == "isolate_follower":
        leader = cluster.current_leader()
        follower = next(i for i in range(size) if i != leader)
        report.isolated_peer = follower
        for other in range(size):
            if other != follower:
                net.cut_both(follower, other)
    elif ev.action == "heal_all":
        net.heal_all()
    elif ev.action == "crash":
        cluster.nodes[ev.a].crash()
    elif ev.action == "restart":
        cluster.nodes[ev.a].restart()
    elif ev.action == "elect":
        # deterministic bootstrap: run a protocol-ordinary election from peer a
        mp = cluster.nodes[ev.a].mp
        ballot = mp.next_ballot()
        result = mp.run_prepare_phase(ballot)
        if result is not None:
            last_index, merged = result
            mp.become_leader(ballot, last_index)
            mp.replay(ballot, merged)
    else:
        raise ValueError(f"unknown scenario action {ev.action!r}")


def run_scenario(script: ScenarioScript) -> RunReport:
    cluster = SimCluster(
        script.cluster_size,
        seed=script.seed,
        commit_interval_ms=script.commit_interval_ms,
        adaptive_enabled=script.adaptive_enabled,
        gap_fill_mode=script.gap_fill_mode,
        election_multiplier_lo=script.election_multiplier_lo,
        election_multiplier_hi=script.election_multiplier_hi,
        latency_ms=script.latency_ms,
        jitter_ms=script.jitter_ms,
    )
    runtime = cluster.runtime
    report = RunReport(scenario=script.name, seed=script.seed, duration_ms=script.duration_ms)
    for node in cluster.nodes:
        pid = node.id
        report.elections_initiated[pid] = 0
        report.log_len_series[pid] = []
        report.gle_series[pid] = []
        report.last_executed_series[pid] = []

    cluster.start_all()

    for ev in script.events:
        runtime.call_later(ev.at_ms, lambda e=ev: runtime.spawn(
            _apply_event, cluster, e, report, name=f"event-{e.action}"))

    stop = runtime.event()
    stats = _WorkloadStats()
    for c in range(script.workload.clients):
        runtime.spawn(_client_loop, cluster, script.workload, c, stop, stats,
                      name=f"client-{c}")

    interval = script.commit_interval_ms

    def sampler():
        prev_max_le = 0
        while not stop.is_set():
            runtime.sleep(interval)
            report.sample_times.append(runtime.now())
            max_le = 0
            for node in cluster.nodes:
                pid = node.id
                report.log_len_series[pid].append(node.log.num_slots())
                report.gle_series[pid].append(node.log.global_last_executed())
                le = node.log.last_executed()
                report.last_executed_series[pid].append(le)
                max_le = max(max_le, le)
            report.committed_per_interval.append(max_le - prev_max_le)
            prev_max_le = max_le
            cluster.check_log_invariants()

    runtime.spawn(sampler, name="sampler")

    runtime.run(script.duration_ms)
    stop.set()
    runtime.run_for(4 * interval)  # drain in-flight requests
    runtime.spawn(cluster.stop_all, name="stop-all")
    runtime.run_for(2 * interval)
    runtime.shutdown()

    cluster.check_log_invariants()
    report.invariant_violations.extend(cluster.violations)
    report.invariant_violations.extend(check_agreement(cluster.nodes))
    report.client_ops = stats.ops

    for ev in cluster.events:
        kind = ev["kind"]
        if kind == "become_leader":
            report.leader_timeline.append((ev["t"], ev["peer"], ev["ballot"]))
        elif kind == "election":
            report.elections_initiated[ev["peer"]] = report.elections_initiated.get(ev["peer"], 0) + 1
        elif kind == "adapt":
            report.adapt_events.append((ev["t"], ev["peer"], ev["interval_ms"]))
        elif kind == "gap_fill":
            report.gap_fill_events.append((ev["t"], ev["peer"], ev["target"], ev["count"]))
        elif kind == "commit_round":
            report.commit_rounds.append(
                (ev["t"], ev["peer"], ev["oks"], ev["min_last_executed"], ev["gle"]))

    ballots = {}
    for ev in cluster.events:
        if ev["kind"] == "become_leader":
            ballots.setdefault(ev["ballot"], set()).add(ev["peer"])
    for ballot, peers in ballots.items():
        if len(peers) > 1:
            report.invariant_violations.append(
                f"ballot {ballot} claimed by multiple leaders: {sorted(peers)}")

    return report


# --- built-in scenarios -----------------------------------------------------

BUILTIN_SCENARIOS = (
    "leader_losing_quorum",
    "chained_churn",
    "chained_churn_classic",
    "compaction_common",
    "compaction_disconnect",
    "compaction_disconnect_nofill",
    "random_faults",
)

SWEEP_SCENARIOS = (
    "leader_losing_quorum",
    "chained_churn",
    "compaction_disconnect",
    "random_faults",
)


def build_scenario(name: str, seed: int = 0) -> ScenarioScript:
    if name == "leader_losing_quorum":
        # five peers led by peer 1; peers 0-3 lose every link among themselves,
        # peer 4 stays connected to everyone and alone retains a quorum
        cuts = [ScenarioEvent(at_ms=2000.0, action="cut", a=a, b=b)
                for a in range(4) for b in range(a + 1, 4)]
        return ScenarioScript(
            name=name, cluster_size=5, duration_ms=10_000.0, seed=seed,
            events=[ScenarioEvent(at_ms=100.0, action="elect", a=1)]
            + cuts
            + [ScenarioEvent(at_ms=8000.0, action="heal_all")],
            workload=SimWorkload(clients=2, think_time_ms=100.0),
        )
    if name in ("chained_churn", "chained_churn_classic"):
        # peer 0 leads, then loses its link to peer 2; both keep reaching peer 1
        return ScenarioScript(
            name=name, cluster_size=3, duration_ms=13_000.0, seed=seed,
            adaptive_enabled=(name == "chained_churn"),
            events=[
                ScenarioEvent(at_ms=100.0, action="elect", a=0),
                ScenarioEvent(at_ms=1500.0, action="cut", a=0, b=2),
                ScenarioEvent(at_ms=11_000.0, action="heal_all"),
            ],
            workload=SimWorkload(clients=2, think_time_ms=100.0),
        )
    if name == "compaction_common":
        return ScenarioScript(
            name=name, cluster_size=3, duration_ms=30_000.0, seed=seed,
            events=[ScenarioEvent(at_ms=100.0, action="elect", a=0)],
            workload=SimWorkload(clients=3, think_time_ms=30.0),
        )
    if name in ("compaction_disconnect", "compaction_disconnect_nofill"):
        return ScenarioScript(
            name=name, cluster_size=3, duration_ms=16_000.0, seed=seed,
            gap_fill_mode=("off" if name.endswith("nofill") else "retransmit"),
            events=[
                ScenarioEvent(at_ms=100.0, action="elect", a=0),
                ScenarioEvent(at_ms=3000.0, action="isolate_follower"),
                ScenarioEvent(at_ms=8000.0, action="heal_all"),
            ],
            workload=SimWorkload(clients=2, think_time_ms=80.0),
        )
    if name == "random_faults":
        rng = random.Random(f"random-faults:{seed}")
        events: list[ScenarioEvent] = []
        t = 1000.0
        crashed: int | None = None
        while t < 6000.0:
            roll = rng.random()
            if roll < 0.15 and crashed is None:
                crashed = rng.randrange(3)
                events.append(ScenarioEvent(at_ms=t, action="crash", a=crashed))
            elif roll < 0.3 and crashed is not None:
                events.append(ScenarioEvent(at_ms=t, action="restart", a=crashed))
                crashed = None
            elif roll < 0.65:
                a, b = rng.sample(range(3), 2)
                events.append(ScenarioEvent(at_ms=t, action="set_link", a=a, b=b, up=False))
            else:
                events.append(ScenarioEvent(at_ms=t, action="heal_all"))
            t += rng.uniform(400.0, 1200.0)
        events.append(ScenarioEvent(at_ms=6000.0, action="heal_all"))
        if crashed is not None:
            events.append(ScenarioEvent(at_ms=6000.0, action="restart", a=crashed))
        return ScenarioScript(
            name=name, cluster_size=3, duration_ms=9000.0, seed=seed, events=events,
            workload=SimWorkload(clients=2, think_time_ms=150.0),
        )
    raise ValueError(f"unknown scenario {name!r}; built-ins: {', '.join(BUILTIN_SCENARIOS)}")


def sweep(seeds, scenario_names=SWEEP_SCENARIOS) -> dict:
    """Safety sweep: run each scenario at each seed; collect every violation."""
    failures: list[dict] = []
    runs = 0
    for seed in seeds:
        for name in scenario_names:
            report = run_scenario(build_scenario(name, seed=seed))
            runs += 1
            if not report.ok:
                failures.append({"scenario": name, "seed": seed,
                                 "violations": report.invariant_violations})
    return {"runs": runs, "failures": failures, "ok": not failures}
