"""Workflow message framing.

A message is a fixed 40-byte header followed by an opaque payload::

    offset  size  field
    0       16    uid          (UUID bytes, big-endian as in uuid.UUID.bytes)
    16      8     accepted_at  (u64, little-endian, simulator ticks)
    24      4     app_id       (u32, little-endian)
    28      2     stage        (u16, little-endian)
    30      4     payload_len  (u32, little-endian)
    34      6     reserved     (zero)

The ring buffer prepends a 4-byte CRC-32 of header+payload when it frames
an entry; see :func:`frame_entry`.
"""
from __future__ import annotations

import struct
import uuid
import zlib
from dataclasses import dataclass

HEADER = struct.Struct("<16sQIHI6x")
HEADER_SIZE = HEADER.size
CHECKSUM = struct.Struct("<I")
CHECKSUM_SIZE = CHECKSUM.size
ENTRY_OVERHEAD = CHECKSUM_SIZE + HEADER_SIZE
MAX_PAYLOAD = (1 << 32) - 1

assert HEADER_SIZE == 40


class MalformedMessage(ValueError):
    pass


@dataclass(frozen=True)
class WorkflowMessage:
    uid: uuid.UUID
    accepted_at: int
    app_id: int
    stage: int
    payload: bytes = b""

    def next_stage(self, payload: bytes) -> "WorkflowMessage":
        """Same request one stage further along, carrying ``payload``."""
        return WorkflowMessage(self.uid, self.accepted_at, self.app_id, self.stage + 1, payload)


def encode(msg: WorkflowMessage) -> bytes:
    if len(msg.payload) > MAX_PAYLOAD:
        raise ValueError(f"payload of {len(msg.payload)} bytes exceeds u32 length field")
    if not 0 <= msg.stage < 1 << 16:
        raise ValueError(f"stage {msg.stage} does not fit in 16 bits")
    if not 0 <= msg.app_id < 1 << 32:
        raise ValueError(f"app_id {msg.app_id} does not fit in 32 bits")
    header = HEADER.pack(msg.uid.bytes, msg.accepted_at, msg.app_id, msg.stage, len(msg.payload))
    return header + bytes(msg.payload)


def decode(buf: bytes) -> WorkflowMessage:
    if len(buf) < HEADER_SIZE:
        raise MalformedMessage(f"need {HEADER_SIZE} header bytes, got {len(buf)}")
    uid, accepted_at, app_id, stage, length = HEADER.unpack_from(buf, 0)
    if HEADER_SIZE + length != len(buf):
        raise MalformedMessage(
            f"payload_len field says {length} bytes but {len(buf) - HEADER_SIZE} follow the header"
        )
    return WorkflowMessage(uuid.UUID(bytes=uid), accepted_at, app_id, stage, bytes(buf[HEADER_SIZE:]))


def checksum(data: bytes) -> int:
    """Standard CRC-32 (IEEE 802.3, reflected, init/xorout 0xFFFFFFFF)."""
    return zlib.crc32(data) & 0xFFFFFFFF


def frame_entry(msg: WorkflowMessage) -> bytes:
    """Ring-buffer entry bytes: ``[crc32][header][payload]``."""
    body = encode(msg)
    return CHECKSUM.pack(checksum(body)) + body


def unframe_entry(entry: bytes) -> WorkflowMessage:
    """Verify the checksum of an entry and decode it.

    Raises :class:`MalformedMessage` on a checksum mismatch or a bad header.
    """
    if len(entry) < ENTRY_OVERHEAD:
        raise MalformedMessage(f"entry of {len(entry)} bytes is shorter than the framing")
    (stored,) = CHECKSUM.unpack_from(entry, 0)
    body = bytes(entry[CHECKSUM_SIZE:])
    if checksum(body) != stored:
        raise MalformedMessage("checksum mismatch")
    return decode(body)
