"""Replicated key-value store on MultiPaxos plus a deterministic fault simulator."""

__version__ = "0.1.0"
