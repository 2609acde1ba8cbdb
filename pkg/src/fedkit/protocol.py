"""Length-prefixed JSON wire protocol for the distributed deployment.

Frame layout, the bit-exact external contract any compliant peer must
speak:

    [4-byte big-endian unsigned payload length][payload]

where the payload is UTF-8 JSON ``{"kind", "round", "client_id", "body"}``
with object keys sorted. Parameter values travel as JSON number arrays
printed with full round-trip precision, so a decoded vector is bit-identical
to the encoded one. Frames larger than 256 MiB are rejected on both sides,
which bounds memory against malformed length prefixes.

SECURITY: frames are neither encrypted nor authenticated, deliberately.
Insufficient transport encryption and authentication are known gaps of this
proof of concept; run it only on trusted networks.

Decoders are stateful: use one ``FrameDecoder`` per connection, never
shared.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Union

from .aggregation import ALGORITHM_KINDS, WEIGHTINGS, AlgorithmConfig
from .errors import EncodeError, FedkitError, NeedMoreBytes, ProtocolError
from .params import ModelUpdate, ParameterVector

MAX_FRAME_BYTES = 256 * 1024 * 1024
_LENGTH_BYTES = 4

MESSAGE_KINDS = (
    "join_request",
    "join_ack",
    "task_assignment",
    "update_submission",
    "heartbeat",
    "experiment_done",
    "abort",
)


@dataclass(frozen=True)
class JoinAck:
    accepted: bool
    current_round: int
    reason: str = ""


@dataclass(frozen=True)
class TaskAssignment:
    params: ParameterVector
    algorithm: AlgorithmConfig


@dataclass(frozen=True)
class Abort:
    reason: str = ""


Body = Union[None, JoinAck, TaskAssignment, ModelUpdate, Abort]

_BODY_TYPES = {
    "join_request": type(None),
    "join_ack": JoinAck,
    "task_assignment": TaskAssignment,
    "update_submission": ModelUpdate,
    "heartbeat": type(None),
    "experiment_done": type(None),
    "abort": Abort,
}


@dataclass(frozen=True)
class Message:
    """Wire envelope; the kind determines the body type exhaustively."""

    kind: str
    round: int
    client_id: str
    body: Body = None

    def __post_init__(self):
        if self.kind not in MESSAGE_KINDS:
            raise ProtocolError(f"unknown message kind {self.kind!r}")
        if not isinstance(self.round, int) or isinstance(self.round, bool) or self.round < 0:
            raise ProtocolError(f"round must be a non-negative integer, got {self.round!r}")
        if not isinstance(self.client_id, str):
            raise ProtocolError("client_id must be a string")
        want = _BODY_TYPES[self.kind]
        if not isinstance(self.body, want):
            raise ProtocolError(
                f"kind {self.kind!r} requires body {want.__name__}, got {type(self.body).__name__}"
            )
        if self.kind == "update_submission":
            if self.body.round != self.round:
                raise ProtocolError(
                    f"update round {self.body.round} does not match envelope round {self.round}"
                )
            if self.body.client_id != self.client_id:
                raise ProtocolError(
                    f"update client {self.body.client_id!r} does not match envelope {self.client_id!r}"
                )


def _params_to_json(params: ParameterVector) -> list:
    return [float(v) for v in params.values]


def _body_to_json(msg: Message) -> dict:
    body = msg.body
    if body is None:
        return {}
    if isinstance(body, JoinAck):
        return {
            "accepted": body.accepted,
            "current_round": body.current_round,
            "reason": body.reason,
        }
    if isinstance(body, TaskAssignment):
        algo = body.algorithm
        return {
            "params": _params_to_json(body.params),
            "algorithm": {
                "kind": algo.kind,
                "prox_mu": algo.prox_mu,
                "ditto_lambda": algo.ditto_lambda,
                "weighting": algo.weighting,
            },
        }
    if isinstance(body, ModelUpdate):
        return {
            "params": _params_to_json(body.params),
            "sample_count": body.sample_count,
            "train_seconds": body.train_seconds,
        }
    return {"reason": body.reason}


def encode(msg: Message) -> bytes:
    """Serialize a message into one frame."""
    document = {
        "kind": msg.kind,
        "round": msg.round,
        "client_id": msg.client_id,
        "body": _body_to_json(msg),
    }
    try:
        payload = json.dumps(
            document, sort_keys=True, separators=(",", ":"), allow_nan=False
        ).encode("utf-8")
    except ValueError as exc:
        raise EncodeError(f"message contains non-finite values: {exc}") from exc
    if len(payload) > MAX_FRAME_BYTES:
        raise EncodeError(f"payload of {len(payload)} bytes exceeds the {MAX_FRAME_BYTES}-byte cap")
    return len(payload).to_bytes(_LENGTH_BYTES, "big") + payload


def _expect_keys(obj: dict, keys: set, where: str) -> None:
    got = set(obj)
    if got != keys:
        missing = keys - got
        extra = got - keys
        detail = []
        if missing:
            detail.append(f"missing {sorted(missing)}")
        if extra:
            detail.append(f"unexpected {sorted(extra)}")
        raise ProtocolError(f"{where}: {'; '.join(detail)}")


def _as_int(value, where: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise ProtocolError(f"{where} must be an integer, got {value!r}")
    return value


def _as_finite_float(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ProtocolError(f"{where} must be a number, got {value!r}")
    out = float(value)
    if not math.isfinite(out):
        raise ProtocolError(f"{where} must be finite, got {out!r}")
    return out


def _params_from_json(values, where: str) -> ParameterVector:
    if not isinstance(values, list) or not values:
        raise ProtocolError(f"{where} must be a non-empty array of numbers")
    try:
        return ParameterVector([_as_finite_float(v, where) for v in values])
    except FedkitError as exc:
        raise ProtocolError(f"{where}: {exc}") from exc


def _body_from_json(kind: str, round_index: int, client_id: str, body) -> Body:
    if not isinstance(body, dict):
        raise ProtocolError("body must be a JSON object")
    if kind in ("join_request", "heartbeat", "experiment_done"):
        _expect_keys(body, set(), f"{kind} body")
        return None
    if kind == "join_ack":
        _expect_keys(body, {"accepted", "current_round", "reason"}, "join_ack body")
        if not isinstance(body["accepted"], bool):
            raise ProtocolError("join_ack accepted must be a boolean")
        if not isinstance(body["reason"], str):
            raise ProtocolError("join_ack reason must be a string")
        return JoinAck(
            accepted=body["accepted"],
            current_round=_as_int(body["current_round"], "join_ack current_round"),
            reason=body["reason"],
        )
    if kind == "task_assignment":
        _expect_keys(body, {"params", "algorithm"}, "task_assignment body")
        algo = body["algorithm"]
        if not isinstance(algo, dict):
            raise ProtocolError("task_assignment algorithm must be a JSON object")
        _expect_keys(algo, {"kind", "prox_mu", "ditto_lambda", "weighting"}, "algorithm echo")
        if algo["kind"] not in ALGORITHM_KINDS or algo["weighting"] not in WEIGHTINGS:
            raise ProtocolError(
                f"algorithm echo has unknown kind/weighting: {algo['kind']!r}/{algo['weighting']!r}"
            )
        try:
            algorithm = AlgorithmConfig(
                kind=algo["kind"],
                prox_mu=_as_finite_float(algo["prox_mu"], "prox_mu"),
                ditto_lambda=_as_finite_float(algo["ditto_lambda"], "ditto_lambda"),
                weighting=algo["weighting"],
            )
        except FedkitError as exc:
            raise ProtocolError(f"algorithm echo invalid: {exc}") from exc
        return TaskAssignment(
            params=_params_from_json(body["params"], "task params"), algorithm=algorithm
        )
    if kind == "update_submission":
        _expect_keys(body, {"params", "sample_count", "train_seconds"}, "update body")
        try:
            return ModelUpdate(
                client_id=client_id,
                round=round_index,
                params=_params_from_json(body["params"], "update params"),
                sample_count=_as_int(body["sample_count"], "sample_count"),
                train_seconds=_as_finite_float(body["train_seconds"], "train_seconds"),
            )
        except FedkitError as exc:
            raise ProtocolError(f"update body invalid: {exc}") from exc
    _expect_keys(body, {"reason"}, "abort body")
    if not isinstance(body["reason"], str):
        raise ProtocolError("abort reason must be a string")
    return Abort(reason=body["reason"])


def _decode_payload(payload: bytes) -> Message:
    try:
        document = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed payload: {exc}") from exc
    if not isinstance(document, dict):
        raise ProtocolError("payload must be a JSON object")
    _expect_keys(document, {"kind", "round", "client_id", "body"}, "envelope")
    kind = document["kind"]
    if kind not in MESSAGE_KINDS:
        raise ProtocolError(f"unknown message kind {kind!r}")
    round_index = _as_int(document["round"], "round")
    if round_index < 0:
        raise ProtocolError(f"round must be non-negative, got {round_index}")
    client_id = document["client_id"]
    if not isinstance(client_id, str):
        raise ProtocolError("client_id must be a string")
    body = _body_from_json(kind, round_index, client_id, document["body"])
    try:
        return Message(kind=kind, round=round_index, client_id=client_id, body=body)
    except FedkitError as exc:
        raise ProtocolError(str(exc)) from exc


def decode(frame: bytes) -> Message:
    """Decode exactly one complete frame; the inverse of :func:`encode`.

    Raises :class:`NeedMoreBytes` when the frame is truncated (recoverable)
    and :class:`ProtocolError` for anything malformed, including trailing
    bytes after the frame.
    """
    frame = bytes(frame)
    if len(frame) < _LENGTH_BYTES:
        raise NeedMoreBytes(f"have {len(frame)} of {_LENGTH_BYTES} prefix bytes")
    length = int.from_bytes(frame[:_LENGTH_BYTES], "big")
    if length > MAX_FRAME_BYTES:
        raise ProtocolError(f"frame of {length} bytes exceeds the {MAX_FRAME_BYTES}-byte cap")
    if len(frame) < _LENGTH_BYTES + length:
        raise NeedMoreBytes(f"have {len(frame)} of {_LENGTH_BYTES + length} frame bytes")
    if len(frame) > _LENGTH_BYTES + length:
        raise ProtocolError(f"{len(frame) - _LENGTH_BYTES - length} trailing bytes after frame")
    return _decode_payload(frame[_LENGTH_BYTES:])


class FrameDecoder:
    """Incremental decoder for a stream of concatenated frames.

    Chunk boundaries are irrelevant: feeding a byte stream one byte at a
    time yields the same message list as feeding it whole.
    """

    def __init__(self):
        self._buffer = bytearray()

    def feed(self, chunk: bytes) -> list[Message]:
        self._buffer.extend(chunk)
        messages = []
        while True:
            if len(self._buffer) < _LENGTH_BYTES:
                return messages
            length = int.from_bytes(self._buffer[:_LENGTH_BYTES], "big")
            if length > MAX_FRAME_BYTES:
                raise ProtocolError(
                    f"frame of {length} bytes exceeds the {MAX_FRAME_BYTES}-byte cap"
                )
            if len(self._buffer) < _LENGTH_BYTES + length:
                return messages
            payload = bytes(self._buffer[_LENGTH_BYTES : _LENGTH_BYTES + length])
            del self._buffer[: _LENGTH_BYTES + length]
            messages.append(_decode_payload(payload))

    @property
    def pending_bytes(self) -> int:
        return len(self._buffer)
