import uuid
import zlib

import pytest
from hypothesis import given, strategies as st

from aigcflow.message import (
    HEADER_SIZE, MalformedMessage, WorkflowMessage, checksum, decode, encode, frame_entry, unframe_entry,
)

messages = st.builds(
    WorkflowMessage,
    uid=st.uuids(),
    accepted_at=st.integers(0, 2**64 - 1),
    app_id=st.integers(0, 2**32 - 1),
    stage=st.integers(0, 2**16 - 1),
    payload=st.binary(max_size=512),
)


def _msg(payload=b""):
    return WorkflowMessage(uuid.UUID(int=12345), 7, 3, 1, payload)


def test_header_only():
    assert HEADER_SIZE == 40
    assert len(encode(_msg())) == 40


@given(messages)
def test_roundtrip(msg):
    assert decode(encode(msg)) == msg
    assert unframe_entry(frame_entry(msg)) == msg


@given(messages)
def test_encode_deterministic(msg):
    assert encode(msg) == encode(msg)


@given(messages, st.data())
def test_truncation_is_malformed(msg, data):
    buf = encode(msg)
    cut = data.draw(st.integers(0, len(buf) - 1))
    with pytest.raises(MalformedMessage):
        decode(buf[:cut])


def test_length_field_beyond_buffer():
    buf = bytearray(encode(_msg(b"abcd")))
    buf[30:34] = (1000).to_bytes(4, "little")
    with pytest.raises(MalformedMessage):
        decode(bytes(buf))


def test_trailing_bytes_malformed():
    with pytest.raises(MalformedMessage):
        decode(encode(_msg(b"ab")) + b"x")


def test_field_ranges():
    with pytest.raises(ValueError):
        encode(WorkflowMessage(uuid.uuid4(), 0, 2**32, 0))
    with pytest.raises(ValueError):
        encode(WorkflowMessage(uuid.uuid4(), 0, 0, 2**16))


def test_layout_offsets():
    msg = WorkflowMessage(uuid.UUID(bytes=bytes(range(16))), 0x0102030405060708, 0xAABBCCDD, 0x1234, b"zz")
    buf = encode(msg)
    assert buf[:16] == bytes(range(16))
    assert int.from_bytes(buf[16:24], "little") == 0x0102030405060708
    assert int.from_bytes(buf[24:28], "little") == 0xAABBCCDD
    assert int.from_bytes(buf[28:30], "little") == 0x1234
    assert int.from_bytes(buf[30:34], "little") == 2
    assert buf[34:40] == bytes(6)


def _crc32_bitwise(data: bytes) -> int:
    # reflected CRC-32, polynomial 0xEDB88320
    crc = 0xFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (crc >> 1) ^ (0xEDB88320 if crc & 1 else 0)
    return crc ^ 0xFFFFFFFF


def test_crc_empty():
    assert checksum(b"") == 0 == _crc32_bitwise(b"")


def test_crc_check_value():
    assert checksum(b"123456789") == 0xCBF43926 == _crc32_bitwise(b"123456789")


@given(st.binary(max_size=200))
def test_crc_matches_reference(data):
    assert checksum(data) == _crc32_bitwise(data) == zlib.crc32(data)


def test_crc_every_single_bit_flip():
    sample = bytes((i * 37 + 11) & 0xFF for i in range(64))
    base = checksum(sample)
    for bit in range(64 * 8):
        flipped = bytearray(sample)
        flipped[bit // 8] ^= 1 << (bit % 8)
        assert checksum(bytes(flipped)) != base


def test_corrupted_entry_detected():
    entry = bytearray(frame_entry(_msg(b"payload")))
    entry[-1] ^= 0x01
    with pytest.raises(MalformedMessage):
        unframe_entry(bytes(entry))


def test_next_stage_preserves_identity():
    m = _msg(b"in")
    out = m.next_stage(b"out")
    assert (out.uid, out.accepted_at, out.app_id, out.stage, out.payload) == (m.uid, 7, 3, 2, b"out")
