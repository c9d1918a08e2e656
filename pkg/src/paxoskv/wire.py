"""Framed JSON wire format for inter-peer and client traffic.

A frame is a 4-byte big-endian unsigned length followed by that many bytes of
UTF-8 JSON.  Each message carries a top-level ``kind`` discriminator naming
the variant; response messages additionally carry ``type`` ("ok"|"reject").
Field presence follows the protocol rules: reject responses carry the
responder's ballot, ok prepare responses carry instances, ok commit responses
carry last_executed.

Keys and values are arbitrary byte-strings; they ride in JSON via latin-1,
which maps bytes 0-255 onto code points 0-255 reversibly.
"""

from __future__ import annotations

import json
import struct

from paxoskv.core import (
    AcceptRequest,
    AcceptResponse,
    Command,
    CommandKind,
    CommitRequest,
    CommitResponse,
    Instance,
    InstanceState,
    Message,
    PrepareRequest,
    PrepareResponse,
    ResponseType,
)

MAX_FRAME_BYTES = 64 * 1024 * 1024


class CodecError(ValueError):
    """Payload is not a well-formed message."""


def _bytes_to_json(b: bytes) -> str:
    return b.decode("latin-1")


def _json_to_bytes(s: str) -> bytes:
    return s.encode("latin-1")


def command_to_dict(cmd: Command) -> dict:
    d = {"type": cmd.kind.value, "key": _bytes_to_json(cmd.key)}
    if cmd.kind is CommandKind.PUT:
        d["value"] = _bytes_to_json(cmd.value)
    return d


def command_from_dict(d: dict) -> Command:
    try:
        kind = CommandKind(d["type"])
        key = _json_to_bytes(d["key"])
        value = _json_to_bytes(d.get("value", ""))
    except (KeyError, TypeError, ValueError) as exc:
        raise CodecError(f"bad command: {d!r}") from exc
    return Command(kind=kind, key=key, value=value)


def instance_to_dict(inst: Instance) -> dict:
    return {
        "ballot": inst.ballot,
        "index": inst.index,
        "client_id": inst.client_id,
        "state": inst.state.value,
        "command": command_to_dict(inst.command),
    }


def instance_from_dict(d: dict) -> Instance:
    try:
        return Instance(
            ballot=d["ballot"],
            index=d["index"],
            client_id=d["client_id"],
            state=InstanceState(d["state"]),
            command=command_from_dict(d["command"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CodecError(f"bad instance: {d!r}") from exc


def message_to_dict(msg: Message) -> dict:
    if isinstance(msg, PrepareRequest):
        return {"kind": "prepare_request", "ballot": msg.ballot, "sender": msg.sender}
    if isinstance(msg, PrepareResponse):
        d = {"kind": "prepare_response", "type": msg.type.value}
        if msg.type is ResponseType.OK:
            d["instances"] = [instance_to_dict(i) for i in msg.instances]
        else:
            d["ballot"] = msg.ballot
        return d
    if isinstance(msg, AcceptRequest):
        return {
            "kind": "accept_request",
            "instance": instance_to_dict(msg.instance),
            "sender": msg.sender,
        }
    if isinstance(msg, AcceptResponse):
        d = {"kind": "accept_response", "type": msg.type.value}
        if msg.type is ResponseType.REJECT:
            d["ballot"] = msg.ballot
        return d
    if isinstance(msg, CommitRequest):
        return {
            "kind": "commit_request",
            "ballot": msg.ballot,
            "last_executed": msg.last_executed,
            "global_last_executed": msg.global_last_executed,
            "sender": msg.sender,
        }
    if isinstance(msg, CommitResponse):
        d = {"kind": "commit_response", "type": msg.type.value}
        if msg.type is ResponseType.OK:
            d["last_executed"] = msg.last_executed
        else:
            d["ballot"] = msg.ballot
        return d
    raise CodecError(f"not a message: {msg!r}")


def message_from_dict(d: dict) -> Message:
    try:
        kind = d["kind"]
        if kind == "prepare_request":
            return PrepareRequest(ballot=d["ballot"], sender=d["sender"])
        if kind == "prepare_response":
            rt = ResponseType(d["type"])
            return PrepareResponse(
                type=rt,
                ballot=d.get("ballot", 0),
                instances=tuple(instance_from_dict(i) for i in d.get("instances", [])),
            )
        if kind == "accept_request":
            return AcceptRequest(instance=instance_from_dict(d["instance"]), sender=d["sender"])
        if kind == "accept_response":
            return AcceptResponse(type=ResponseType(d["type"]), ballot=d.get("ballot", 0))
        if kind == "commit_request":
            return CommitRequest(
                ballot=d["ballot"],
                last_executed=d["last_executed"],
                global_last_executed=d["global_last_executed"],
                sender=d["sender"],
            )
        if kind == "commit_response":
            return CommitResponse(
                type=ResponseType(d["type"]),
                ballot=d.get("ballot", 0),
                last_executed=d.get("last_executed", 0),
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise CodecError(f"bad message: {d!r}") from exc
    raise CodecError(f"unknown message kind: {d.get('kind')!r}")


def encode_message(msg: Message) -> bytes:
    return json.dumps(message_to_dict(msg), sort_keys=True, separators=(",", ":")).encode("utf-8")


def decode_message(payload: bytes) -> Message:
    try:
        d = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CodecError("payload is not valid JSON") from exc
    if not isinstance(d, dict):
        raise CodecError("payload is not a JSON object")
    return message_from_dict(d)


# framing (shared by peer RPC and the client protocol)

def frame(payload: bytes) -> bytes:
    if len(payload) > MAX_FRAME_BYTES:
        raise CodecError(f"frame too large: {len(payload)}")
    return struct.pack(">I", len(payload)) + payload


def write_frame(sock, payload: bytes) -> None:
    sock.sendall(frame(payload))


def read_frame(sock) -> bytes | None:
    """Read one frame; returns None on clean EOF before any bytes."""
    header = _read_exact(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME_BYTES:
        raise CodecError(f"frame too large: {length}")
    payload = _read_exact(sock, length)
    if payload is None:
        raise CodecError("connection closed mid-frame")
    return payload


def _read_exact(sock, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if buf:
                raise CodecError("connection closed mid-read")
            return None
        buf.extend(chunk)
    return bytes(buf)
