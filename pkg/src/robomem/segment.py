"""Binary record codec and segment file I/O.

Segment files are append-only sequences of framed records:

    u8 tag | u16 payload_len | payload | u32 crc32(tag + len + payload)

Little-endian throughout. A torn tail (partial or checksum-failing record at
the end of the *last* segment) is tolerated on open and truncated away; the
same condition in any earlier segment means real corruption.

The six-field frame record encodes in 51 bytes. Pose x/y keep full double
precision (they feed location fusion); z/roll/pitch/yaw are stored as f32,
which is ample for meters and degrees.
"""

from __future__ import annotations

import struct
import zlib
from typing import Iterator, Optional

from .errors import CorruptSegment
from .model import (
    ActivityEvent,
    Detection,
    FeedRecord,
    FrameMeta,
    LocationEstimate,
    Pose,
    ts_from_micros,
    ts_to_micros,
)

TAG_FRAME = 1
TAG_DETECTION = 2
TAG_ACTIVITY = 3

_HEADER = struct.Struct("<BH")
_CRC = struct.Struct("<I")
_FRAME_BODY = struct.Struct("<Iq2d4f")
_DET_BODY = struct.Struct("<IBd")
_ACT_HEAD = struct.Struct("<qqdBBH")
_LOC_BODY = struct.Struct("<5d")  # mean x, mean y, cov a, b, d (symmetric)


def _frame(tag: int, payload: bytes) -> bytes:
    head = _HEADER.pack(tag, len(payload))
    body = head + payload
    return body + _CRC.pack(zlib.crc32(body))


def encode_record(record: FeedRecord) -> bytes:
    if isinstance(record, FrameMeta):
        p = record.pose
        payload = _FRAME_BODY.pack(
            record.frame_id, ts_to_micros(record.ts),
            p.x, p.y, p.z, p.roll, p.pitch, p.yaw,
        )
        return _frame(TAG_FRAME, payload)
    if isinstance(record, Detection):
        kind = 0 if record.kind == "object" else 1
        payload = _DET_BODY.pack(record.frame_id, kind, record.confidence)
        payload += record.label.encode("utf-8")
        return _frame(TAG_DETECTION, payload)
    if isinstance(record, ActivityEvent):
        subject = record.subject.encode("utf-8")
        name = record.name.encode("utf-8")
        prov = 1 if record.provenance == "reprocessed" else 0
        has_loc = 1 if record.loc is not None else 0
        payload = _ACT_HEAD.pack(
            ts_to_micros(record.start), ts_to_micros(record.end),
            record.prob, prov, has_loc, len(subject),
        )
        if record.loc is not None:
            m, c = record.loc.mean, record.loc.cov
            payload += _LOC_BODY.pack(m[0], m[1], c[0][0], c[0][1], c[1][1])
        payload += subject + name
        return _frame(TAG_ACTIVITY, payload)
    raise TypeError(f"cannot encode {type(record).__name__}")


def decode_payload(tag: int, payload: bytes) -> FeedRecord:
    if tag == TAG_FRAME:
        f, ts_us, x, y, z, roll, pitch, yaw = _FRAME_BODY.unpack(payload)
        return FrameMeta(frame_id=f, ts=ts_from_micros(ts_us),
                         pose=Pose(x=x, y=y, z=z, roll=roll, pitch=pitch, yaw=yaw))
    if tag == TAG_DETECTION:
        f, kind, conf = _DET_BODY.unpack(payload[:_DET_BODY.size])
        label = payload[_DET_BODY.size:].decode("utf-8")
        return Detection(frame_id=f, label=label,
                         kind="object" if kind == 0 else "person", confidence=conf)
    if tag == TAG_ACTIVITY:
        start_us, end_us, prob, prov, has_loc, subj_len = _ACT_HEAD.unpack(payload[:_ACT_HEAD.size])
        off = _ACT_HEAD.size
        loc: Optional[LocationEstimate] = None
        if has_loc:
            mx, my, ca, cb, cd = _LOC_BODY.unpack(payload[off:off + _LOC_BODY.size])
            loc = LocationEstimate(mean=(mx, my), cov=((ca, cb), (cb, cd)))
            off += _LOC_BODY.size
        subject = payload[off:off + subj_len].decode("utf-8")
        name = payload[off + subj_len:].decode("utf-8")
        return ActivityEvent(subject=subject, name=name,
                             start=ts_from_micros(start_us), end=ts_from_micros(end_us),
                             loc=loc, prob=prob,
                             provenance="reprocessed" if prov else "ingested")
    raise CorruptSegment(f"unknown record tag {tag}")


def scan_segment(data: bytes) -> tuple[list[FeedRecord], int]:
    """Decode records from raw segment bytes.

    Returns (records, good_bytes) where good_bytes is the offset of the first
    incomplete or checksum-failing record; everything before it decoded clean.
    """
    records: list[FeedRecord] = []
    off = 0
    n = len(data)
    while off + _HEADER.size + _CRC.size <= n:
        tag, plen = _HEADER.unpack_from(data, off)
        end = off + _HEADER.size + plen + _CRC.size
        if end > n:
            break
        body = data[off:off + _HEADER.size + plen]
        (crc,) = _CRC.unpack_from(data, off + _HEADER.size + plen)
        if zlib.crc32(body) != crc:
            break
        try:
            records.append(decode_payload(tag, body[_HEADER.size:]))
        except (CorruptSegment, struct.error, UnicodeDecodeError):
            break
        off = end
    return records, off


def read_segment(path, tolerate_tail: bool) -> tuple[list[FeedRecord], int]:
    """Read one segment file; raise CorruptSegment on a torn tail unless tolerated."""
    with open(path, "rb") as fh:
        data = fh.read()
    records, good = scan_segment(data)
    if good != len(data) and not tolerate_tail:
        raise CorruptSegment(f"{path}: bad record at offset {good}")
    return records, good


def iter_records(data: bytes) -> Iterator[FeedRecord]:
    records, _ = scan_segment(data)
    return iter(records)
