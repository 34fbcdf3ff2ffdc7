"""Length-prefixed binary frames exchanged with environment worker processes.

Frame: ``u32 length`` (little-endian, counts the tag byte plus body), then a
one-byte tag, then the body. Arrays travel as ``u8 rank``, ``u32 dims[rank]``
and row-major little-endian float32 data.

Bodies by tag:

========== ==== ==========================================================
RESET      0x01 ``u8 has_seed`` followed by ``u64 seed`` when has_seed is 1
STEP       0x02 action array
SPEC       0x03 empty
CLOSE      0x04 empty, no reply
OBS        0x81 observation array
STEPRESULT 0x82 observation array, ``f32 reward``, ``u8 done``
SPECRESULT 0x83 ``u8 protocol version``, ``u32 obs_dim``, ``u32 act_dim``,
                ``u32 max_episode_steps``, low array, high array
EXCEPTION  0xFF UTF-8 error message
========== ==== ==========================================================
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import BinaryIO, Union

import numpy as np

PROTOCOL_VERSION = 1
HEADER = struct.Struct("<I")
MAX_FRAME = 64 * 1024 * 1024


class Tag(IntEnum):
    RESET = 0x01
    STEP = 0x02
    SPEC = 0x03
    CLOSE = 0x04
    OBS = 0x81
    STEPRESULT = 0x82
    SPECRESULT = 0x83
    EXCEPTION = 0xFF


class ProtocolError(ValueError):
    """A frame could not be decoded."""


@dataclass(frozen=True)
class Reset:
    seed: int | None = None


@dataclass(frozen=True)
class Step:
    action: np.ndarray

    def __eq__(self, other):
        return isinstance(other, Step) and _same_array(self.action, other.action)


@dataclass(frozen=True)
class SpecRequest:
    pass


@dataclass(frozen=True)
class Close:
    pass


@dataclass(frozen=True)
class Obs:
    obs: np.ndarray

    def __eq__(self, other):
        return isinstance(other, Obs) and _same_array(self.obs, other.obs)


@dataclass(frozen=True)
class StepReply:
    obs: np.ndarray
    reward: np.float32
    done: bool

    def __eq__(self, other):
        return (isinstance(other, StepReply) and _same_array(self.obs, other.obs)
                and np.float32(self.reward).tobytes() == np.float32(other.reward).tobytes()
                and self.done == other.done)


@dataclass(frozen=True)
class SpecReply:
    obs_dim: int
    act_dim: int
    max_episode_steps: int
    action_low: np.ndarray
    action_high: np.ndarray
    version: int = PROTOCOL_VERSION

    def __eq__(self, other):
        return (isinstance(other, SpecReply)
                and (self.obs_dim, self.act_dim, self.max_episode_steps, self.version)
                == (other.obs_dim, other.act_dim, other.max_episode_steps, other.version)
                and _same_array(self.action_low, other.action_low)
                and _same_array(self.action_high, other.action_high))


@dataclass(frozen=True)
class RemoteException:
    message: str


Message = Union[Reset, Step, SpecRequest, Close, Obs, StepReply, SpecReply, RemoteException]


def _same_array(a, b) -> bool:
    a = np.asarray(a, dtype="<f4")
    b = np.asarray(b, dtype="<f4")
    return a.shape == b.shape and a.tobytes() == b.tobytes()


def encode_array(arr) -> bytes:
    arr = np.asarray(arr, dtype="<f4")
    if arr.ndim > 255:
        raise ProtocolError("array rank exceeds 255")
    return struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape) + arr.tobytes(order="C")


def decode_array(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    try:
        (rank,) = struct.unpack_from("<B", buf, offset)
        dims = struct.unpack_from(f"<{rank}I", buf, offset + 1)
    except struct.error as exc:
        raise ProtocolError(f"truncated array header: {exc}") from exc
    offset += 1 + 4 * rank
    size = 1
    for d in dims:
        size *= d
    end = offset + 4 * size
    if end > len(buf):
        raise ProtocolError(f"array of {size} floats runs past end of frame")
    arr = np.frombuffer(buf, dtype="<f4", count=size, offset=offset).reshape(dims)
    return arr.astype(np.float32), end


def encode_payload(msg: Message) -> bytes:
    if isinstance(msg, Reset):
        body = b"\x00" if msg.seed is None else struct.pack("<BQ", 1, msg.seed)
        return bytes([Tag.RESET]) + body
    if isinstance(msg, Step):
        return bytes([Tag.STEP]) + encode_array(msg.action)
    if isinstance(msg, SpecRequest):
        return bytes([Tag.SPEC])
    if isinstance(msg, Close):
        return bytes([Tag.CLOSE])
    if isinstance(msg, Obs):
        return bytes([Tag.OBS]) + encode_array(msg.obs)
    if isinstance(msg, StepReply):
        return (bytes([Tag.STEPRESULT]) + encode_array(msg.obs)
                + struct.pack("<fB", msg.reward, 1 if msg.done else 0))
    if isinstance(msg, SpecReply):
        return (bytes([Tag.SPECRESULT])
                + struct.pack("<BIII", msg.version, msg.obs_dim, msg.act_dim, msg.max_episode_steps)
                + encode_array(msg.action_low) + encode_array(msg.action_high))
    if isinstance(msg, RemoteException):
        return bytes([Tag.EXCEPTION]) + msg.message.encode("utf-8")
    raise TypeError(f"cannot encode {type(msg).__name__}")


def encode(msg: Message) -> bytes:
    payload = encode_payload(msg)
    return HEADER.pack(len(payload)) + payload


def decode_payload(payload: bytes) -> Message:
    if not payload:
        raise ProtocolError("empty payload")
    try:
        tag = Tag(payload[0])
    except ValueError:
        raise ProtocolError(f"unknown tag 0x{payload[0]:02x}") from None
    body = payload[1:]
    end = len(body)
    try:
        if tag is Tag.RESET:
            if body == b"\x00":
                return Reset()
            has_seed, seed = struct.unpack("<BQ", body)
            if has_seed != 1:
                raise ProtocolError("bad RESET seed flag")
            return Reset(seed)
        if tag is Tag.STEP:
            arr, end = decode_array(body)
            msg = Step(arr)
        elif tag is Tag.SPEC:
            end, msg = 0, SpecRequest()
        elif tag is Tag.CLOSE:
            end, msg = 0, Close()
        elif tag is Tag.OBS:
            arr, end = decode_array(body)
            msg = Obs(arr)
        elif tag is Tag.STEPRESULT:
            arr, off = decode_array(body)
            reward, done = struct.unpack_from("<fB", body, off)
            end = off + 5
            msg = StepReply(arr, np.float32(reward), bool(done))
        elif tag is Tag.SPECRESULT:
            version, obs_dim, act_dim, horizon = struct.unpack_from("<BIII", body)
            low, off = decode_array(body, 13)
            high, end = decode_array(body, off)
            msg = SpecReply(obs_dim, act_dim, horizon, low, high, version)
        else:
            return RemoteException(body.decode("utf-8", errors="replace"))
    except struct.error as exc:
        raise ProtocolError(f"truncated {tag.name} frame: {exc}") from exc
    if end != len(body):
        raise ProtocolError(f"{len(body) - end} trailing bytes in {tag.name} frame")
    return msg


def decode(frame: bytes) -> Message:
    """Decode one complete frame (header included)."""
    if len(frame) < HEADER.size:
        raise ProtocolError("frame shorter than its header")
    (length,) = HEADER.unpack_from(frame)
    if length != len(frame) - HEADER.size:
        raise ProtocolError(f"header says {length} bytes, frame carries {len(frame) - HEADER.size}")
    return decode_payload(frame[HEADER.size:])


def read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks = []
    while n:
        chunk = stream.read(n)
        if not chunk:
            raise EOFError("stream closed mid-frame" if chunks else "stream closed")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(stream: BinaryIO) -> bytes:
    """Blocking read of one frame's payload from a byte stream."""
    (length,) = HEADER.unpack(read_exact(stream, HEADER.size))
    if length == 0 or length > MAX_FRAME:
        raise ProtocolError(f"bad frame length {length}")
    return read_exact(stream, length)


def write_message(stream: BinaryIO, msg: Message) -> None:
    stream.write(encode(msg))
    stream.flush()
