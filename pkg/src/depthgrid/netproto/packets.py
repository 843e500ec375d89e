"""Binary sensor packet framing and the skeleton wire format.

One packet carries one camera's frame tick: up to four sections (RGB, depth,
labels, skeletons), each independently coded. The layout is little-endian
throughout and contains explicit payload lengths so a reader can frame
packets off a byte stream without lookahead.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

from ..model import InputSkeleton, Joint, JointKind, JOINT_COUNT

PACKET_MAGIC = 0x4B33  # "K3" little-endian
PACKET_VERSION = 0x01
MAX_SECTIONS = 4

_HEADER = struct.Struct("<HBHIQB")  # magic, version, camera_id, seq, timestamp_us, count
_SECTION_HEADER = struct.Struct("<BBHHI")  # kind, codec, width, height, payload length
HEADER_SIZE = _HEADER.size
SECTION_HEADER_SIZE = _SECTION_HEADER.size


class SectionKind(IntEnum):
    RGB = 1
    DEPTH = 2
    LABELS = 3
    SKELETONS = 4


class SectionCodec(IntEnum):
    RAW = 0
    QDELTA = 1
    DEPTH3C_QDELTA = 2


class PacketError(ValueError):
    """Base for all packet decode failures."""


class BadMagicError(PacketError):
    pass


class BadVersionError(PacketError):
    pass


class TruncatedPacketError(PacketError):
    pass


class DuplicateSectionError(PacketError):
    pass


class UnknownKindError(PacketError):
    pass


class UnknownCodecError(PacketError):
    pass


class TooManySectionsError(PacketError):
    pass


@dataclass(frozen=True)
class Section:
    kind: SectionKind
    codec: SectionCodec
    width: int
    height: int
    payload: bytes

    def __post_init__(self):
        if self.kind == SectionKind.SKELETONS and self.codec != SectionCodec.RAW:
            raise ValueError("skeleton sections must use the RAW codec")


@dataclass(frozen=True)
class SensorPacket:
    camera_id: int
    seq: int
    timestamp_us: int
    sections: tuple[Section, ...] = ()

    def __post_init__(self):
        if len(self.sections) > MAX_SECTIONS:
            raise ValueError(f"more than {MAX_SECTIONS} sections")
        kinds = [s.kind for s in self.sections]
        if len(set(kinds)) != len(kinds):
            raise ValueError("duplicate section kinds")

    def section(self, kind: SectionKind) -> Section | None:
        for s in self.sections:
            if s.kind == kind:
                return s
        return None


def encode_packet(packet: SensorPacket) -> bytes:
    buf = bytearray(
        _HEADER.pack(
            PACKET_MAGIC,
            PACKET_VERSION,
            packet.camera_id,
            packet.seq,
            packet.timestamp_us,
            len(packet.sections),
        )
    )
    for s in packet.sections:
        buf += _SECTION_HEADER.pack(s.kind, s.codec, s.width, s.height, len(s.payload))
        buf += s.payload
    return bytes(buf)


def _decode_sections(data: bytes, pos: int, count: int) -> tuple[tuple[Section, ...], int]:
    sections = []
    seen = set()
    for _ in range(count):
        if pos + SECTION_HEADER_SIZE > len(data):
            raise TruncatedPacketError("truncated section header")
        kind, codec, width, height, length = _SECTION_HEADER.unpack_from(data, pos)
        pos += SECTION_HEADER_SIZE
        try:
            kind = SectionKind(kind)
        except ValueError:
            raise UnknownKindError(f"unknown section kind {kind}") from None
        try:
            codec = SectionCodec(codec)
        except ValueError:
            raise UnknownCodecError(f"unknown codec {codec}") from None
        if kind in seen:
            raise DuplicateSectionError(f"duplicate section kind {kind.name}")
        seen.add(kind)
        if pos + length > len(data):
            raise TruncatedPacketError(
                f"section payload needs {length} bytes, {len(data) - pos} available"
            )
        if kind == SectionKind.SKELETONS and codec != SectionCodec.RAW:
            raise UnknownCodecError("skeleton section with non-RAW codec")
        sections.append(Section(kind, codec, width, height, data[pos:pos + length]))
        pos += length
    return tuple(sections), pos


def decode_packet(data: bytes) -> SensorPacket:
    """Strict decode of one packet occupying the whole buffer."""
    if len(data) < HEADER_SIZE:
        raise TruncatedPacketError(f"{len(data)} bytes, header needs {HEADER_SIZE}")
    magic, version, camera_id, seq, timestamp_us, count = _HEADER.unpack_from(data, 0)
    if magic != PACKET_MAGIC:
        raise BadMagicError(f"bad magic 0x{magic:04X}")
    if version != PACKET_VERSION:
        raise BadVersionError(f"unsupported version {version}")
    if count > MAX_SECTIONS:
        raise TooManySectionsError(f"{count} sections")
    sections, pos = _decode_sections(data, HEADER_SIZE, count)
    if pos != len(data):
        raise TruncatedPacketError(f"{len(data) - pos} trailing bytes")
    return SensorPacket(camera_id, seq, timestamp_us, sections)


class PacketAssembler:
    """Incremental packet framer for a TCP byte stream.

    Feed arbitrary chunks; complete packets come out. Raises PacketError on
    corrupt framing, at which point the stream is unrecoverable and the
    caller should drop the connection.
    """

    def __init__(self):
        self._buf = bytearray()

    def feed(self, chunk: bytes):
        self._buf += chunk
        while True:
            packet, consumed = self._try_parse()
            if packet is None:
                return
            del self._buf[:consumed]
            yield packet

    def pending_bytes(self) -> int:
        return len(self._buf)

    def _try_parse(self) -> tuple[SensorPacket | None, int]:
        buf = self._buf
        if len(buf) < HEADER_SIZE:
            return None, 0
        magic, version, camera_id, seq, timestamp_us, count = _HEADER.unpack_from(buf, 0)
        if magic != PACKET_MAGIC:
            raise BadMagicError(f"bad magic 0x{magic:04X}")
        if version != PACKET_VERSION:
            raise BadVersionError(f"unsupported version {version}")
        if count > MAX_SECTIONS:
            raise TooManySectionsError(f"{count} sections")
        pos = HEADER_SIZE
        lengths = []
        for _ in range(count):
            if pos + SECTION_HEADER_SIZE > len(buf):
                return None, 0
            _, _, _, _, length = _SECTION_HEADER.unpack_from(buf, pos)
            pos += SECTION_HEADER_SIZE + length
            lengths.append(length)
        if pos > len(buf):
            return None, 0
        sections, _ = _decode_sections(bytes(buf[:pos]), HEADER_SIZE, count)
        return SensorPacket(camera_id, seq, timestamp_us, sections), pos


_SKEL_HEADER = struct.Struct("<HB3f")
_JOINT_FIXED = struct.Struct("<B4fB")
_QUAT = struct.Struct("<4f")


def encode_skeletons(skeletons) -> bytes:
    buf = bytearray()
    buf.append(len(skeletons))
    for skel in skeletons:
        buf += _SKEL_HEADER.pack(skel.camera_id, skel.local_user_id, *skel.center_of_mass)
        if len(skel.joints) != JOINT_COUNT:
            raise ValueError(f"skeleton must have {JOINT_COUNT} joints")
        for j in skel.joints:
            flags = 0 if j.orientation is None else 1
            buf += _JOINT_FIXED.pack(j.kind, *j.position, j.confidence, flags)
            if j.orientation is not None:
                buf += _QUAT.pack(*j.orientation)
    return bytes(buf)


def decode_skeletons(payload: bytes) -> list[InputSkeleton]:
    if not payload:
        raise TruncatedPacketError("empty skeleton payload")
    count = payload[0]
    pos = 1
    out = []
    for _ in range(count):
        if pos + _SKEL_HEADER.size > len(payload):
            raise TruncatedPacketError("truncated skeleton header")
        camera_id, local_user_id, cx, cy, cz = _SKEL_HEADER.unpack_from(payload, pos)
        pos += _SKEL_HEADER.size
        joints = []
        for _ in range(JOINT_COUNT):
            if pos + _JOINT_FIXED.size > len(payload):
                raise TruncatedPacketError("truncated joint record")
            kind, x, y, z, conf, flags = _JOINT_FIXED.unpack_from(payload, pos)
            pos += _JOINT_FIXED.size
            try:
                kind = JointKind(kind)
            except ValueError:
                raise UnknownKindError(f"unknown joint kind {kind}") from None
            if flags not in (0, 1):
                raise PacketError(f"bad joint flags {flags}")
            orientation = None
            if flags:
                if pos + _QUAT.size > len(payload):
                    raise TruncatedPacketError("truncated joint orientation")
                orientation = _QUAT.unpack_from(payload, pos)
                pos += _QUAT.size
            joints.append(Joint(kind, (x, y, z), conf, orientation))
        out.append(
            InputSkeleton(camera_id, local_user_id, tuple(joints), (cx, cy, cz))
        )
    if pos != len(payload):
        raise PacketError(f"{len(payload) - pos} trailing skeleton bytes")
    return out
