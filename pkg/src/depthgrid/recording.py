"""Raw trajectory recording: fused skeletons to and from a compact binary file.

Layout, little-endian throughout. Header: magic "SK3D", version u8, fps u16,
start timestamp u64 (microseconds). Then frame records: frame_index u32,
skeleton count u8, and per skeleton: output_id u32, label as u8 length plus
UTF-8 bytes, then exactly 15 joints of (kind u8, x f32, y f32, z f32,
confidence f32). Frame indices must be strictly increasing.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

from .model import JOINT_COUNT, Joint, JointKind

RECORDING_MAGIC = b"SK3D"
RECORDING_VERSION = 1

_HEADER = struct.Struct("<4sBHQ")
_FRAME_HEADER = struct.Struct("<IB")
_SKELETON_HEADER = struct.Struct("<I")
_JOINT = struct.Struct("<Bffff")


class RecordingError(ValueError):
    """Malformed recording; message carries byte offset and frame context."""


@dataclass(frozen=True)
class RecordedSkeleton:
    output_id: int
    label: str
    joints: tuple[Joint, ...]


class RecordingWriter:
    """Appends fused skeleton frames to a recording file."""

    def __init__(self, path, fps: int, start_timestamp_us: int = 0):
        if not 0 < fps <= 0xFFFF:
            raise ValueError("fps must fit in uint16 and be positive")
        self._fh = open(path, "wb")
        self._last_frame = -1
        self.fps = fps
        self.start_timestamp_us = start_timestamp_us
        self._fh.write(
            _HEADER.pack(RECORDING_MAGIC, RECORDING_VERSION, fps, start_timestamp_us)
        )

    def write_frame(self, frame_index: int, skeletons) -> None:
        """skeletons: anything carrying output_id, label, and 15 joints."""
        if frame_index <= self._last_frame:
            raise RecordingError(
                f"frame index {frame_index} not after {self._last_frame}"
            )
        if len(skeletons) > 0xFF:
            raise RecordingError("more than 255 skeletons in one frame")
        parts = [_FRAME_HEADER.pack(frame_index, len(skeletons))]
        for skel in skeletons:
            if len(skel.joints) != JOINT_COUNT:
                raise RecordingError(
                    f"skeleton {skel.output_id} has {len(skel.joints)} joints, "
                    f"need exactly {JOINT_COUNT}"
                )
            label = skel.label.encode("utf-8")
            if len(label) > 0xFF:
                raise RecordingError(f"label longer than 255 bytes: {skel.label!r}")
            parts.append(_SKELETON_HEADER.pack(skel.output_id))
            parts.append(bytes([len(label)]))
            parts.append(label)
            for joint in skel.joints:
                x, y, z = joint.position
                parts.append(_JOINT.pack(int(joint.kind), x, y, z, joint.confidence))
        self._fh.write(b"".join(parts))
        self._last_frame = frame_index

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class RecordingReader:
    """Streams frames back out of a recording file, validating as it goes."""

    def __init__(self, path):
        self._fh = open(path, "rb")
        header = self._fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise RecordingError(f"truncated header at offset {len(header)}")
        magic, version, fps, start = _HEADER.unpack(header)
        if magic != RECORDING_MAGIC:
            raise RecordingError(f"bad magic {magic!r} at offset 0")
        if version != RECORDING_VERSION:
            raise RecordingError(f"unsupported version {version} at offset 4")
        self.version = version
        self.fps = fps
        self.start_timestamp_us = start

    def _take(self, n: int, frame_index, what: str) -> bytes:
        offset = self._fh.tell()
        data = self._fh.read(n)
        if len(data) < n:
            where = f"frame {frame_index}" if frame_index is not None else "frame header"
            raise RecordingError(f"truncated {what} in {where} at offset {offset}")
        return data

    def frames(self):
        """Yield (frame_index, [RecordedSkeleton, ...]) until end of file."""
        last = -1
        while True:
            offset = self._fh.tell()
            head = self._fh.read(_FRAME_HEADER.size)
            if not head:
                return
            if len(head) < _FRAME_HEADER.size:
                raise RecordingError(f"truncated frame header at offset {offset}")
            frame_index, count = _FRAME_HEADER.unpack(head)
            if frame_index <= last:
                raise RecordingError(
                    f"frame index {frame_index} at offset {offset} not after {last}"
                )
            skeletons = []
            for _ in range(count):
                (output_id,) = _SKELETON_HEADER.unpack(
                    self._take(_SKELETON_HEADER.size, frame_index, "skeleton id")
                )
                (label_len,) = self._take(1, frame_index, "label length")
                raw_label = self._take(label_len, frame_index, "label")
                try:
                    label = raw_label.decode("utf-8")
                except UnicodeDecodeError as exc:
                    raise RecordingError(
                        f"bad label bytes in frame {frame_index} at offset "
                        f"{self._fh.tell() - label_len}"
                    ) from exc
                joints = []
                for _ in range(JOINT_COUNT):
                    kind, x, y, z, conf = _JOINT.unpack(
                        self._take(_JOINT.size, frame_index, "joint")
                    )
                    try:
                        joint_kind = JointKind(kind)
                    except ValueError as exc:
                        raise RecordingError(
                            f"invalid joint kind {kind} in frame {frame_index} at "
                            f"offset {self._fh.tell() - _JOINT.size}"
                        ) from exc
                    joints.append(Joint(joint_kind, (x, y, z), conf))
                skeletons.append(RecordedSkeleton(output_id, label, tuple(joints)))
            last = frame_index
            yield frame_index, skeletons

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
