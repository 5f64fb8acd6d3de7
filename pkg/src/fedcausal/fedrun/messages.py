"""Wire messages exchanged between the server and source workers.

Only these types ever cross the source boundary. None of them has a field
that can carry unit-level records: parameters and seeds flow out to the
sources, gradients and the scalar ELBO flow back.

Encoding is one JSON object per line, UTF-8. Floats use Python's shortest
round-trip repr, so a decoded message is bit-identical to the one sent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError


@dataclass(frozen=True)
class ParamBroadcast:
    round: int
    theta: np.ndarray
    noise_seed: int

    def to_wire(self) -> dict:
        return {
            "type": "broadcast",
            "round": int(self.round),
            "theta": [float(v) for v in self.theta],
            "noise_seed": int(self.noise_seed),
        }


@dataclass(frozen=True)
class GradientReport:
    source_id: int
    round: int
    grad: np.ndarray
    elbo_value: float

    def to_wire(self) -> dict:
        return {
            "type": "grad",
            "round": int(self.round),
            "source_id": int(self.source_id),
            "grad": [float(v) for v in self.grad],
            "elbo": float(self.elbo_value),
        }


@dataclass(frozen=True)
class WorkerError:
    """Sent instead of a gradient when a worker cannot finish its round."""

    source_id: int
    round: int
    message: str

    def to_wire(self) -> dict:
        return {
            "type": "error",
            "round": int(self.round),
            "source_id": int(self.source_id),
            "message": self.message,
        }


@dataclass(frozen=True)
class Hello:
    """First line a TCP worker sends so the server can route by source."""

    source_id: int

    def to_wire(self) -> dict:
        return {"type": "hello", "source_id": int(self.source_id)}


@dataclass(frozen=True)
class Stop:
    def to_wire(self) -> dict:
        return {"type": "stop"}


WIRE_FIELDS = {
    "broadcast": ("type", "round", "theta", "noise_seed"),
    "grad": ("type", "round", "source_id", "grad", "elbo"),
    "error": ("type", "round", "source_id", "message"),
    "hello": ("type", "source_id"),
    "stop": ("type",),
}


def encode(msg) -> bytes:
    return (json.dumps(msg.to_wire(), separators=(",", ":")) + "\n").encode("utf-8")


def decode(line: bytes | str):
    if isinstance(line, bytes):
        line = line.decode("utf-8")
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed message line: {exc}") from None
    kind = obj.get("type") if isinstance(obj, dict) else None
    if kind not in WIRE_FIELDS:
        raise ValidationError(f"unknown message type {kind!r}")
    if set(obj) != set(WIRE_FIELDS[kind]):
        raise ValidationError(f"{kind} message has fields {sorted(obj)}, expected {sorted(WIRE_FIELDS[kind])}")
    if kind == "broadcast":
        return ParamBroadcast(int(obj["round"]), np.asarray(obj["theta"], dtype=float), int(obj["noise_seed"]))
    if kind == "grad":
        return GradientReport(
            int(obj["source_id"]), int(obj["round"]), np.asarray(obj["grad"], dtype=float), float(obj["elbo"])
        )
    if kind == "error":
        return WorkerError(int(obj["source_id"]), int(obj["round"]), str(obj["message"]))
    if kind == "hello":
        return Hello(int(obj["source_id"]))
    return Stop()
