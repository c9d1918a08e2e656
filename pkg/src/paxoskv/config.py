"""Node configuration."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field


@dataclass
class AdaptiveTimeoutConfig:
    """Failure-detector damping: a peer that keeps electing itself slows down.

    If at least ``k`` self-initiated elections land inside a window of
    ``window_multiplier`` x base interval, the effective commit interval
    doubles (capped at ``cap_multiplier`` x base).  After a quiet period of
    ``quiet_multiplier`` x base with heartbeats flowing and no further
    self-elections, it resets to base.
    """

    enabled: bool = True
    k: int = 3
    window_multiplier: float = 10.0
    cap_multiplier: float = 8.0
    quiet_multiplier: float = 10.0


@dataclass
class GapFillConfig:
    """Leader-side retransmission for followers whose execution has stalled on a log gap.

    mode "off" leaves a disconnected-then-healed follower stuck (and the trim
    frontier frozen) until the next leader change; "retransmit" re-sends
    accepts for the follower's missing range once its last_executed has been
    frozen for ``stall_rounds`` consecutive commit rounds while the leader's
    advanced, at most ``batch_cap`` instances per round.
    """

    mode: str = "retransmit"
    stall_rounds: int = 5
    batch_cap: int = 256


@dataclass
class Config:
    id: int
    peers: list[str] = field(default_factory=list)
    commit_interval_ms: float = 300.0
    client_port: int = 0
    election_multiplier_lo: float = 1.5
    election_multiplier_hi: float = 2.0
    rpc_timeout_ms: float | None = None  # default: one commit interval
    adaptive_timeout: AdaptiveTimeoutConfig = field(default_factory=AdaptiveTimeoutConfig)
    gap_fill: GapFillConfig = field(default_factory=GapFillConfig)
    seed: int | None = None

    @property
    def num_peers(self) -> int:
        return len(self.peers)

    @property
    def effective_rpc_timeout_ms(self) -> float:
        return self.rpc_timeout_ms if self.rpc_timeout_ms is not None else self.commit_interval_ms

    def validate(self) -> None:
        if not 0 <= self.id < min(len(self.peers), 16):
            raise ValueError(f"id {self.id} out of range for {len(self.peers)} peers")
        if len(self.peers) % 2 == 0:
            raise ValueError("peer count must be odd")
        if self.commit_interval_ms <= 0:
            raise ValueError("commit_interval_ms must be positive")
        if self.election_multiplier_lo > self.election_multiplier_hi:
            raise ValueError("election multiplier range inverted")
        if self.gap_fill.mode not in ("off", "retransmit"):
            raise ValueError(f"unknown gap_fill mode {self.gap_fill.mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        d = dict(d)
        if "adaptive_timeout" in d and isinstance(d["adaptive_timeout"], dict):
            d["adaptive_timeout"] = AdaptiveTimeoutConfig(**d["adaptive_timeout"])
        if "gap_fill" in d and isinstance(d["gap_fill"], dict):
            d["gap_fill"] = GapFillConfig(**d["gap_fill"])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str) -> "Config":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))
