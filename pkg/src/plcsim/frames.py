"""Wire codec for the seven MAC frame types.

Layout: common header (type 1B, src 2B, dst 2B, seq 2B, big-endian), a
type-specific body, and a CRC-32 trailer over everything before it. Usable-
timeslot masks travel as 8 bytes with wire bit 63 carrying slot 0.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum

from .slotmap import mask_from_bytes, mask_to_bytes

BROADCAST = 0xFFFF
NULL_ADDRESS = 0x0000

HEADER = struct.Struct(">BHHH")
CRC = struct.Struct(">I")


class FrameType(IntEnum):
    RTS = 1
    CTS = 2
    DATA = 3
    ACK = 4
    NACK = 5
    ANNOUNCE = 6
    TSINFO = 7


class CodecError(ValueError):
    pass


class BadCrc(CodecError):
    pass


class UnknownType(CodecError):
    pass


class Truncated(CodecError):
    pass


@dataclass(frozen=True)
class Rts:
    src: int
    dst: int
    seq: int
    sender_mask: int
    duration_slots: int
    retx: int = 0

    type = FrameType.RTS

    def body(self) -> bytes:
        return mask_to_bytes(self.sender_mask) + bytes([self.duration_slots, self.retx])


@dataclass(frozen=True)
class Cts:
    src: int
    dst: int
    seq: int
    # Reserved slots in transmission order: D data, 1 ack, 2 contingency.
    reserved: tuple[tuple[int, int], ...]  # (cycle_offset, slot)
    duration_slots: int

    type = FrameType.CTS

    def body(self) -> bytes:
        out = bytearray([len(self.reserved)])
        for cycle_offset, slot in self.reserved:
            out += bytes([cycle_offset, slot])
        out.append(self.duration_slots)
        return bytes(out)


@dataclass(frozen=True)
class Data:
    src: int
    dst: int
    seq: int
    payload: bytes
    retx: int = 0
    original_src: int = NULL_ADDRESS

    type = FrameType.DATA

    def body(self) -> bytes:
        return (struct.pack(">H", len(self.payload)) + self.payload
                + bytes([self.retx]) + struct.pack(">H", self.original_src))


@dataclass(frozen=True)
class Ack:
    src: int
    dst: int
    seq: int
    echoed_crc: int
    original_src: int

    type = FrameType.ACK

    def body(self) -> bytes:
        return CRC.pack(self.echoed_crc) + struct.pack(">H", self.original_src)


@dataclass(frozen=True)
class Nack:
    src: int
    dst: int
    seq: int
    echoed_crc: int
    original_src: int
    pa1: int
    pa2: int  # NULL_ADDRESS when absent
    receiver_mask: int
    duration_slots: int

    type = FrameType.NACK

    def body(self) -> bytes:
        return (CRC.pack(self.echoed_crc)
                + struct.pack(">HHH", self.original_src, self.pa1, self.pa2)
                + mask_to_bytes(self.receiver_mask)
                + bytes([self.duration_slots]))


@dataclass(frozen=True)
class Announce:
    src: int
    dst: int
    seq: int
    reserved: tuple[tuple[int, int], ...]
    original_src: int
    echoed_seq: int

    type = FrameType.ANNOUNCE

    def body(self) -> bytes:
        out = bytearray([len(self.reserved)])
        for cycle_offset, slot in self.reserved:
            out += bytes([cycle_offset, slot])
        out += struct.pack(">HH", self.original_src, self.echoed_seq)
        return bytes(out)


@dataclass(frozen=True)
class Tsinfo:
    src: int
    dst: int
    seq: int
    mask: int

    type = FrameType.TSINFO

    def body(self) -> bytes:
        return mask_to_bytes(self.mask)


Frame = Rts | Cts | Data | Ack | Nack | Announce | Tsinfo


def _check_range(name: str, value: int, hi: int) -> None:
    if not 0 <= value <= hi:
        raise CodecError(f"{name} out of range: {value}")


def encode(frame: Frame) -> bytes:
    _check_range("src", frame.src, 0xFFFF)
    _check_range("dst", frame.dst, 0xFFFF)
    _check_range("seq", frame.seq, 0xFFFF)
    if isinstance(frame, (Rts, Cts, Nack)):
        _check_range("duration_slots", frame.duration_slots, 0xFF)
    if isinstance(frame, (Cts, Announce)):
        if len(frame.reserved) > 0xFF:
            raise CodecError(f"too many reserved slots: {len(frame.reserved)}")
        for cycle_offset, slot in frame.reserved:
            _check_range("cycle_offset", cycle_offset, 0xFF)
            _check_range("slot", slot, 63)
    if isinstance(frame, Data) and len(frame.payload) > 0xFFFF:
        raise CodecError(f"payload too long: {len(frame.payload)}")
    head = HEADER.pack(frame.type, frame.src, frame.dst, frame.seq) + frame.body()
    return head + CRC.pack(zlib.crc32(head))


def frame_crc(frame: Frame) -> int:
    """CRC-32 carried in the frame's trailer."""
    head = HEADER.pack(frame.type, frame.src, frame.dst, frame.seq) + frame.body()
    return zlib.crc32(head)


def _read_reserved(body: bytes, offset: int) -> tuple[tuple[tuple[int, int], ...], int]:
    if offset >= len(body):
        raise Truncated("missing reserved-slot count")
    count = body[offset]
    offset += 1
    end = offset + 2 * count
    if end > len(body):
        raise Truncated("reserved-slot list cut short")
    reserved = tuple((body[i], body[i + 1]) for i in range(offset, end, 2))
    for _, slot in reserved:
        if slot > 63:
            raise CodecError(f"reserved slot out of range: {slot}")
    return reserved, end


def decode(raw: bytes) -> Frame:
    if len(raw) < HEADER.size + CRC.size:
        raise Truncated(f"frame shorter than header+crc: {len(raw)} bytes")
    (stored_crc,) = CRC.unpack(raw[-CRC.size:])
    if zlib.crc32(raw[:-CRC.size]) != stored_crc:
        raise BadCrc("crc mismatch")
    ftype, src, dst, seq = HEADER.unpack(raw[:HEADER.size])
    body = raw[HEADER.size:-CRC.size]
    try:
        kind = FrameType(ftype)
    except ValueError:
        raise UnknownType(f"unknown frame type {ftype}") from None

    if kind is FrameType.RTS:
        if len(body) != 10:
            raise Truncated(f"rts body must be 10 bytes, got {len(body)}")
        return Rts(src, dst, seq, mask_from_bytes(body[:8]), body[8], body[9])
    if kind is FrameType.CTS:
        reserved, offset = _read_reserved(body, 0)
        if len(body) != offset + 1:
            raise Truncated("cts body length mismatch")
        return Cts(src, dst, seq, reserved, body[offset])
    if kind is FrameType.DATA:
        if len(body) < 2:
            raise Truncated("data body missing payload length")
        (plen,) = struct.unpack(">H", body[:2])
        if len(body) != 2 + plen + 3:
            raise Truncated("data body length mismatch")
        payload = body[2:2 + plen]
        retx = body[2 + plen]
        (original_src,) = struct.unpack(">H", body[3 + plen:5 + plen])
        return Data(src, dst, seq, payload, retx, original_src)
    if kind is FrameType.ACK:
        if len(body) != 6:
            raise Truncated(f"ack body must be 6 bytes, got {len(body)}")
        (echoed,) = CRC.unpack(body[:4])
        (original_src,) = struct.unpack(">H", body[4:6])
        return Ack(src, dst, seq, echoed, original_src)
    if kind is FrameType.NACK:
        if len(body) != 19:
            raise Truncated(f"nack body must be 19 bytes, got {len(body)}")
        (echoed,) = CRC.unpack(body[:4])
        original_src, pa1, pa2 = struct.unpack(">HHH", body[4:10])
        mask = mask_from_bytes(body[10:18])
        return Nack(src, dst, seq, echoed, original_src, pa1, pa2, mask, body[18])
    if kind is FrameType.ANNOUNCE:
        reserved, offset = _read_reserved(body, 0)
        if len(body) != offset + 4:
            raise Truncated("announce body length mismatch")
        original_src, echoed_seq = struct.unpack(">HH", body[offset:offset + 4])
        return Announce(src, dst, seq, reserved, original_src, echoed_seq)
    # TSINFO
    if len(body) != 8:
        raise Truncated(f"tsinfo body must be 8 bytes, got {len(body)}")
    return Tsinfo(src, dst, seq, mask_from_bytes(body))
