"""Protocol vocabulary exchanged between the host and its guests.

Every message is a ``type`` tag, a round number, a sender id and a JSON
payload.  Payload fields are plain lists, numbers and strings so that a
message survives a JSON round trip unchanged; floats are written with
``repr`` precision and come back bit-identical.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

HOST = "host"


class ProtocolError(RuntimeError):
    """A party received a message that breaks the protocol contract."""


# type -> required payload keys
SCHEMA: dict[str, tuple[str, ...]] = {
    "Hello": ("config_hash", "role"),
    "HelloAck": ("config_hash",),
    "Reject": ("reason",),
    "BatchSync": ("indices", "measure_indices", "phase"),
    "SubOutput": ("z",),
    "OutputGrad": ("grad",),
    "Commit": (),
    "Finalize": (),
    "Shutdown": (),
    "PlainMeasurement": ("u", "mask"),
    "IpCiphertext": ("ct", "mask"),
    "IpQuery": ("theta", "z"),
    "IpFunctionalKey": ("theta", "z"),
    "IpRefusal": ("reason",),
}

CONTROL_TYPES = frozenset({"Hello", "HelloAck", "Reject", "BatchSync", "Commit", "Finalize", "Shutdown"})
FEDTSE_TYPES = CONTROL_TYPES | {"SubOutput", "OutputGrad"}
SECURE_TYPES = frozenset({"IpCiphertext", "IpQuery", "IpFunctionalKey", "IpRefusal"})
FEDTSE_PI_TYPES = FEDTSE_TYPES | SECURE_TYPES


@dataclass
class Message:
    type: str
    round: int
    sender: str
    payload: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> dict[str, Any]:
        return {"type": self.type, "round": self.round, "sender": self.sender, **self.payload}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Message":
        missing = [k for k in ("type", "round", "sender") if k not in data]
        if missing:
            raise ProtocolError(f"message lacks mandatory fields {missing}")
        payload = {k: v for k, v in data.items() if k not in ("type", "round", "sender")}
        return cls(data["type"], data["round"], data["sender"], payload)

    def encode(self) -> bytes:
        # messages are not mutated after construction, so the body is cached
        body = self.__dict__.get("_body")
        if body is None:
            body = json.dumps(self.to_dict(), separators=(",", ":")).encode("utf-8")
            self.__dict__["_body"] = body
        return body

    @classmethod
    def decode(cls, body: bytes) -> "Message":
        try:
            data = json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ProtocolError(f"malformed message body: {exc}") from None
        if not isinstance(data, dict):
            raise ProtocolError("message body is not a JSON object")
        msg = cls.from_dict(data)
        msg.__dict__["_body"] = bytes(body)
        return msg

    def digest(self) -> str:
        return hashlib.sha256(self.encode()).hexdigest()


def validate(msg: Message) -> None:
    if msg.type not in SCHEMA:
        raise ProtocolError(f"unknown message type {msg.type!r}")
    if not isinstance(msg.round, int) or isinstance(msg.round, bool) or msg.round < 0:
        raise ProtocolError(f"round must be a non-negative integer, got {msg.round!r}")
    if not isinstance(msg.sender, str) or not msg.sender:
        raise ProtocolError("sender must be a non-empty string")
    missing = [k for k in SCHEMA[msg.type] if k not in msg.payload]
    if missing:
        raise ProtocolError(f"{msg.type} lacks payload fields {missing}")


def make(type_: str, round_: int, sender: str, **payload: Any) -> Message:
    return Message(type_, round_, sender, payload)
