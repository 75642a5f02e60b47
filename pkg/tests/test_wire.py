import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays, array_shapes

from splitfp import wire
from splitfp.wire import MsgType, WireError, WireMessage

finite32 = st.floats(allow_nan=False, allow_infinity=False, width=32)

messages = st.one_of(
    st.builds(WireMessage, st.sampled_from([MsgType.SMASHED, MsgType.LABELS, MsgType.GRAD, MsgType.LOSS]),
              arrays(np.float32, array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5), elements=finite32)),
    st.just(WireMessage(MsgType.END_EPOCH)),
)


@settings(max_examples=1000)
@given(messages)
def test_round_trip(msg):
    frame = wire.encode(msg)
    assert struct.unpack("<I", frame[6:10])[0] == len(frame) - 10
    assert wire.decode(frame) == msg


def test_frame_layout_is_exact():
    msg = WireMessage(MsgType.GRAD, np.array([[1.0, -2.0]], np.float32))
    frame = wire.encode(msg)
    expect = (b"SPLT" + bytes([1, 3]) + struct.pack("<I", 1 + 8 + 8)
              + bytes([2]) + struct.pack("<II", 1, 2) + struct.pack("<ff", 1.0, -2.0))
    assert frame == expect
    assert wire.encode(WireMessage(MsgType.END_EPOCH)) == b"SPLT\x01\x05\x00\x00\x00\x00"


def test_scalar_tensor():
    frame = wire.encode(WireMessage(MsgType.LOSS, np.float32(0.25)))
    assert frame[10:] == b"\x00" + struct.pack("<f", 0.25)


@pytest.mark.parametrize("mutate,match", [
    (lambda f: b"XXXX" + f[4:], "bad magic"),
    (lambda f: f[:4] + b"\x02" + f[5:], "version"),
    (lambda f: f[:5] + b"\x09" + f[6:], "msg_type"),
    (lambda f: f[:-1], "frame is"),
    (lambda f: f[:6] + struct.pack("<I", 5) + f[10:15], "truncated tensor"),
])
def test_malformed_frames(mutate, match):
    frame = wire.encode(WireMessage(MsgType.SMASHED, np.ones((2, 2), np.float32)))
    with pytest.raises(WireError, match=match):
        wire.decode(mutate(frame))


def test_payload_length_must_match_tensor():
    frame = wire.encode(WireMessage(MsgType.SMASHED, np.ones(2, np.float32)))
    padded = frame[:6] + struct.pack("<I", len(frame) - 10 + 4) + frame[10:] + b"\0" * 4
    with pytest.raises(WireError, match="payload_len"):
        wire.decode(padded)


def test_transcript_file_round_trip(tmp_path):
    msgs = [WireMessage(MsgType.SMASHED, np.arange(6, dtype=np.float32).reshape(2, 3)),
            WireMessage(MsgType.GRAD, np.ones((2, 3), np.float32)),
            WireMessage(MsgType.END_EPOCH)]
    wire.write_transcript(tmp_path / "t.bin", msgs)
    assert wire.read_transcript(tmp_path / "t.bin") == msgs
    assert (tmp_path / "t.bin").read_bytes() == wire.frames_bytes(msgs)


def test_tensor_blob_round_trip(tmp_path):
    ts = [np.zeros((2, 3), np.float32), np.arange(4, dtype=np.float32), np.float32(3.5).reshape(())]
    wire.save_tensors(tmp_path / "b", ts)
    back = wire.load_tensors(tmp_path / "b")
    assert [t.shape for t in back] == [(2, 3), (4,), ()]
    for a, b in zip(ts, back):
        np.testing.assert_array_equal(a, b)
