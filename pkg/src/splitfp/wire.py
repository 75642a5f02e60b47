"""Binary framing for split-learning messages.

Frame layout (integers little-endian)::

    b"SPLT" | version u8 | msg_type u8 | payload_len u32 | payload

Tensor payloads are ``ndim u8 | dims u32 * ndim | float32 data``. An
END_EPOCH frame has an empty payload.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

MAGIC = b"SPLT"
VERSION = 1
HEADER = struct.Struct("<4sBBI")


class MsgType(IntEnum):
    SMASHED = 1
    LABELS = 2
    GRAD = 3
    LOSS = 4
    END_EPOCH = 5


class WireError(ValueError):
    pass


@dataclass
class WireMessage:
    msg_type: MsgType
    tensor: np.ndarray | None = None

    def __post_init__(self):
        self.msg_type = MsgType(self.msg_type)
        if self.tensor is not None:
            self.tensor = np.asarray(self.tensor, dtype="<f4")

    def __eq__(self, other):
        if not isinstance(other, WireMessage) or self.msg_type != other.msg_type:
            return False
        if self.tensor is None or other.tensor is None:
            return self.tensor is None and other.tensor is None
        return self.tensor.shape == other.tensor.shape and self.tensor.tobytes() == other.tensor.tobytes()

    def __repr__(self):
        shape = None if self.tensor is None else self.tensor.shape
        return f"WireMessage({self.msg_type.name}, shape={shape})"


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f4")
    if arr.ndim > 255:
        raise WireError("tensor has more than 255 dimensions")
    head = struct.pack("<B" + "I" * arr.ndim, arr.ndim, *arr.shape)
    return head + arr.tobytes(order="C")


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor at ``offset``; returns it and the offset just past it."""
    if len(buf) < offset + 1:
        raise WireError("truncated tensor header")
    ndim = buf[offset]
    end_dims = offset + 1 + 4 * ndim
    if len(buf) < end_dims:
        raise WireError("truncated tensor dims")
    dims = struct.unpack_from("<" + "I" * ndim, buf, offset + 1)
    count = int(np.prod(dims, dtype=np.int64))
    end = end_dims + 4 * count
    if len(buf) < end:
        raise WireError(f"truncated tensor data: need {4 * count} bytes, have {len(buf) - end_dims}")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=end_dims).reshape(dims).astype(np.float32)
    return arr, end


def encode(msg: WireMessage) -> bytes:
    payload = b"" if msg.tensor is None else encode_tensor(msg.tensor)
    return HEADER.pack(MAGIC, VERSION, int(msg.msg_type), len(payload)) + payload


def _parse_header(head: bytes) -> tuple[int, int]:
    magic, version, msg_type, length = HEADER.unpack(head)
    if magic != MAGIC:
        raise WireError(f"bad magic {magic!r}")
    if version != VERSION:
        raise WireError(f"unsupported version {version}")
    if msg_type not in MsgType._value2member_map_:
        raise WireError(f"unknown msg_type {msg_type}")
    return msg_type, length


def _parse_payload(msg_type: int, payload: bytes) -> WireMessage:
    if not payload:
        return WireMessage(msg_type)
    tensor, end = decode_tensor(payload)
    if end != len(payload):
        raise WireError(f"payload_len {len(payload)} but tensor occupies {end} bytes")
    return WireMessage(msg_type, tensor)


def decode(frame: bytes) -> WireMessage:
    """Decode exactly one frame."""
    if len(frame) < HEADER.size:
        raise WireError("truncated frame header")
    msg_type, length = _parse_header(frame[:HEADER.size])
    if len(frame) != HEADER.size + length:
        raise WireError(f"frame is {len(frame)} bytes, header announces {HEADER.size + length}")
    return _parse_payload(msg_type, frame[HEADER.size:])


def read_frame(read_exact) -> WireMessage | None:
    """Read one frame with ``read_exact(n)``; ``None`` on clean end of stream."""
    head = read_exact(HEADER.size)
    if not head:
        return None
    if len(head) < HEADER.size:
        raise WireError("truncated frame header")
    msg_type, length = _parse_header(head)
    payload = read_exact(length) if length else b""
    if len(payload) < length:
        raise WireError("truncated frame payload")
    return _parse_payload(msg_type, payload)


def iter_frames(stream):
    """Iterate over the frames of a binary file object."""
    while True:
        msg = read_frame(stream.read)
        if msg is None:
            return
        yield msg


def write_transcript(path, messages) -> None:
    with open(path, "wb") as f:
        for m in messages:
            f.write(encode(m))


def read_transcript(path) -> list[WireMessage]:
    with open(path, "rb") as f:
        return list(iter_frames(f))


def save_tensors(path, tensors) -> None:
    """Concatenate tensors in the wire tensor layout (used for blobs on disk)."""
    with open(path, "wb") as f:
        for t in tensors:
            f.write(encode_tensor(t))


def load_tensors(path) -> list[np.ndarray]:
    buf = Path(path).read_bytes()
    out, off = [], 0
    while off < len(buf):
        t, off = decode_tensor(buf, off)
        out.append(t)
    return out


def frames_bytes(messages) -> bytes:
    b = io.BytesIO()
    for m in messages:
        b.write(encode(m))
    return b.getvalue()
