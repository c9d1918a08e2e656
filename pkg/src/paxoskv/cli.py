"""Command-line entry points: node server, scenario runner, benchmark driver."""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading

from paxoskv import bench as bench_mod
from paxoskv import sim as sim_mod
from paxoskv.config import Config
from paxoskv.node import Node
from paxoskv.runtime import ThreadRuntime


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def node_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="paxoskv-node", description="Run one replica.")
    parser.add_argument("--config", required=True, help="path to a JSON config file")
    parser.add_argument("--sim", action="store_true",
                        help="instead of serving, boot the whole peer set as an in-process "
                             "simulated cluster and print a smoke report")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)

    config = Config.from_file(args.config)
    if "NODE_ID" in os.environ:
        config.id = int(os.environ["NODE_ID"])
    if "CLIENT_PORT" in os.environ:
        config.client_port = int(os.environ["CLIENT_PORT"])
    config.validate()

    if args.sim:
        script = sim_mod.ScenarioScript(
            name="config-smoke",
            cluster_size=config.num_peers,
            duration_ms=20 * config.commit_interval_ms,
            commit_interval_ms=config.commit_interval_ms,
            adaptive_enabled=config.adaptive_timeout.enabled,
            gap_fill_mode=config.gap_fill.mode,
            seed=config.seed or 0,
            workload=sim_mod.SimWorkload(clients=2, think_time_ms=config.commit_interval_ms / 3),
        )
        report = sim_mod.run_scenario(script)
        print(report.to_json())
        return 0 if report.ok else 1

    runtime = ThreadRuntime(seed=config.seed)
    node = Node(config, runtime)
    node.start()
    print(f"peer {config.id} serving peers on {config.peers[config.id]}, "
          f"clients on port {node.client_port}", flush=True)

    done = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: done.set())
    signal.signal(signal.SIGTERM, lambda *_: done.set())
    done.wait()
    node.stop()
    runtime.join_all()
    return 0


def sim_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="paxoskv-sim", description="Deterministic scenario runner.")
    sub = parser.add_subparsers(dest="cmd", required=True)

    run_p = sub.add_parser("run", help="run one scenario")
    group = run_p.add_mutually_exclusive_group(required=True)
    group.add_argument("--scenario", choices=sim_mod.BUILTIN_SCENARIOS)
    group.add_argument("--script", help="path to a ScenarioScript JSON file")
    run_p.add_argument("--seed", type=int, default=0)
    run_p.add_argument("--report", help="write the RunReport JSON here")

    sweep_p = sub.add_parser("sweep", help="safety sweep over a seed range")
    sweep_p.add_argument("--seeds", default="0..99", help="inclusive range A..B")
    sweep_p.add_argument("--scenario", action="append",
                         help="scenario name (repeatable; default: the sweep set)")
    sweep_p.add_argument("--report", help="write the sweep summary JSON here")

    args = parser.parse_args(argv)
    _setup_logging(False)

    if args.cmd == "run":
        if args.script:
            script = sim_mod.ScenarioScript.from_file(args.script)
            script.seed = args.seed
        else:
            script = sim_mod.build_scenario(args.scenario, seed=args.seed)
        report = sim_mod.run_scenario(script)
        out = report.to_json()
        if args.report:
            with open(args.report, "w", encoding="utf-8") as f:
                f.write(out)
        leaders = [(round(t), p) for t, p, _ in report.leader_timeline]
        print(f"scenario={report.scenario} seed={report.seed} ok={report.ok} "
              f"ops={report.client_ops} leaders={leaders} "
              f"violations={report.invariant_violations}")
        return 0 if report.ok else 1

    lo, _, hi = args.seeds.partition("..")
    seeds = range(int(lo), int(hi or lo) + 1)
    names = tuple(args.scenario) if args.scenario else sim_mod.SWEEP_SCENARIOS
    summary = sim_mod.sweep(seeds, names)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=2)
    print(f"sweep: {summary['runs']} runs, {len(summary['failures'])} failures")
    for failure in summary["failures"]:
        print(f"  FAIL {failure['scenario']} seed={failure['seed']}: {failure['violations']}")
    return 0 if summary["ok"] else 1


def bench_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="paxoskv-bench",
                                     description="Closed-loop benchmark against a live cluster.")
    parser.add_argument("--addr", required=True,
                        help="client endpoint(s), comma-separated host:port in peer-id order "
                             "(one address works; more enable leader-hint redirects)")
    parser.add_argument("--clients", type=int, default=8)
    parser.add_argument("--duration", type=float, default=20.0)
    parser.add_argument("--read-frac", type=float, default=0.5)
    parser.add_argument("--warmup", type=float, default=2.0)
    parser.add_argument("--keys", type=int, default=1000)
    parser.add_argument("--theta", type=float, default=0.99)
    parser.add_argument("--value-len", type=int, default=500)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", help="write the report JSON here")
    args = parser.parse_args(argv)
    _setup_logging(False)

    spec = bench_mod.WorkloadSpec(
        clients=args.clients,
        duration_s=args.duration,
        read_fraction=args.read_frac,
        key_count=args.keys,
        zipfian_theta=args.theta,
        value_len=args.value_len,
        warmup_s=args.warmup,
        seed=args.seed,
    )
    report = bench_mod.run_workload(spec, args.addr.split(","))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(report, f, indent=2)
    print(json.dumps({k: v for k, v in report.items() if k != "ops_per_second"}, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(node_main())
