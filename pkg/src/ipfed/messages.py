"""Typed protocol messages and the append-only message log."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

LEARNING_SERVER = "learning_server"
PARAMETER_SERVER = "parameter_server"

GLOBAL_PARAMS = "GlobalParams"
TRANSFORM = "Transform"
CLIENT_UPDATE = "ClientUpdate"
SPREADOUT_RESULT = "SpreadoutResult"

KINDS = (GLOBAL_PARAMS, TRANSFORM, CLIENT_UPDATE, SPREADOUT_RESULT)

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def client_name(client_id: int) -> str:
    return f"client:{client_id}"


def fnv1a_64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV64_PRIME) & _MASK64
    return h


def canonical_bytes(payload: dict) -> bytes:
    """Little-endian serialization, fields in sorted key order.

    Each field is ``key`` (UTF-8) + NUL + the value as ``<i8`` when integral,
    ``<f8`` otherwise, flattened in C order.
    """
    parts = []
    for key in sorted(payload):
        arr = np.asarray(payload[key])
        dtype = "<i8" if np.issubdtype(arr.dtype, np.integer) else "<f8"
        parts.append(key.encode() + b"\0" + arr.astype(dtype).tobytes(order="C"))
    return b"".join(parts)


@dataclass(frozen=True)
class Message:
    round: int
    sender: str
    recipient: str
    kind: str
    payload: dict = field(repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown message kind {self.kind!r}")

    def digest(self) -> int:
        return fnv1a_64(canonical_bytes(self.payload))

    def to_record(self) -> dict:
        return {
            "round": self.round,
            "from": self.sender,
            "to": self.recipient,
            "kind": self.kind,
            "payload_digest": f"{self.digest():016x}",
        }


class MessageLog:
    """Every message exchanged during a run, in send order."""

    def __init__(self):
        self.messages = []

    def append(self, msg: Message) -> Message:
        self.messages.append(msg)
        return msg

    def __iter__(self):
        return iter(self.messages)

    def __len__(self):
        return len(self.messages)

    def for_round(self, t: int):
        return [m for m in self.messages if m.round == t]

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for msg in self.messages:
                fh.write(json.dumps(msg.to_record(), sort_keys=True) + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
