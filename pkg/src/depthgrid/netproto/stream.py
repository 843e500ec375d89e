"""Stream publishing and subscribing with freshness-over-completeness buffering.

The publisher encodes each camera tick into one packet and pushes it to every
subscriber. Depth, color, and label channels are delta-coded against the
previous frame with a periodic intra (self-contained) refresh, so the client
keeps the undecoded packet run since the last intra and can decode just the
newest frame on demand. The per-camera mailbox hands the consumer the newest
frame and counts the ones it skipped.
"""
from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from ..depthcodec import (
    CodecQuality,
    DepthPackingParams,
    PackedDepthFrame,
    decode_labels,
    encode_labels,
    lossy_decode,
    lossy_encode_reconstructed,
    lossy_header,
    pack_depth,
    unpack_depth,
)
from ..model import ColorFrame, DepthFrame, InputSkeleton, LabelFrame
from .packets import (
    PacketAssembler,
    PacketError,
    Section,
    SectionCodec,
    SectionKind,
    SensorPacket,
    decode_packet,
    decode_skeletons,
    encode_packet,
    encode_skeletons,
)

log = logging.getLogger(__name__)

SUBSCRIBE_LINE = b"SUB\n"
DEFAULT_INTRA_INTERVAL = 30


@dataclass
class FrameBundle:
    """Everything one camera produced for one tick."""

    depth: DepthFrame | None = None
    color: ColorFrame | None = None
    labels: LabelFrame | None = None
    skeletons: list[InputSkeleton] = field(default_factory=list)
    timestamp_us: int = 0


def _encode_channels(channels, prevs, quality: CodecQuality, intra: bool):
    """Encode a list of planes; returns (payload, decoded refs for next frame)."""
    blobs = []
    refs = []
    for i, plane in enumerate(channels):
        prev = None if (intra or prevs is None) else prevs[i]
        blob, ref = lossy_encode_reconstructed(plane, prev, quality)
        blobs.append(blob)
        refs.append(ref)
    payload = bytearray()
    payload.append(len(blobs))
    for blob in blobs:
        payload += len(blob).to_bytes(4, "little")
        payload += blob
    return bytes(payload), refs


def _split_channels(payload: bytes) -> list[bytes]:
    if not payload:
        raise PacketError("empty channel payload")
    count = payload[0]
    pos = 1
    out = []
    for _ in range(count):
        if pos + 4 > len(payload):
            raise PacketError("truncated channel length")
        n = int.from_bytes(payload[pos:pos + 4], "little")
        pos += 4
        if pos + n > len(payload):
            raise PacketError("truncated channel payload")
        out.append(payload[pos:pos + n])
        pos += n
    if pos != len(payload):
        raise PacketError("trailing channel bytes")
    return out


class FrameEncoder:
    """Per-camera encoder holding the closed-loop prediction references.

    Prediction references are the *decoded* previous channels, so encoder and
    decoder stay in lockstep and the deadzone error bound holds per frame.
    """

    def __init__(self, camera_id: int, packing: DepthPackingParams | None = None,
                 depth_quality: CodecQuality = CodecQuality(0),
                 color_quality: CodecQuality = CodecQuality(2),
                 label_quality: CodecQuality = CodecQuality(4),
                 intra_interval: int = DEFAULT_INTRA_INTERVAL):
        if intra_interval < 1:
            raise ValueError("intra_interval must be >= 1")
        self.camera_id = camera_id
        self.packing = packing or DepthPackingParams()
        self.depth_quality = depth_quality
        self.color_quality = color_quality
        self.label_quality = label_quality
        self.intra_interval = intra_interval
        self._seq = 0
        self._refs: dict[SectionKind, list[np.ndarray]] = {}

    def encode(self, bundle: FrameBundle, force_intra: bool = False) -> SensorPacket:
        intra = force_intra or self._seq % self.intra_interval == 0 or not self._refs
        sections = []
        if bundle.color is not None:
            planes = [np.ascontiguousarray(bundle.color.data[:, :, i]) for i in range(3)]
            payload, refs = _encode_channels(
                planes, self._refs.get(SectionKind.RGB), self.color_quality, intra
            )
            self._refs[SectionKind.RGB] = refs
            sections.append(Section(SectionKind.RGB, SectionCodec.QDELTA,
                                    bundle.color.width, bundle.color.height, payload))
        if bundle.depth is not None:
            packed = pack_depth(bundle.depth, self.packing)
            planes = [packed.coarse, packed.fine_a, packed.fine_b]
            payload, refs = _encode_channels(
                planes, self._refs.get(SectionKind.DEPTH), self.depth_quality, intra
            )
            self._refs[SectionKind.DEPTH] = refs
            sections.append(Section(SectionKind.DEPTH, SectionCodec.DEPTH3C_QDELTA,
                                    bundle.depth.width, bundle.depth.height, payload))
        if bundle.labels is not None:
            payload, refs = _encode_channels(
                [encode_labels(bundle.labels)], self._refs.get(SectionKind.LABELS),
                self.label_quality, intra,
            )
            self._refs[SectionKind.LABELS] = refs
            sections.append(Section(SectionKind.LABELS, SectionCodec.QDELTA,
                                    bundle.labels.width, bundle.labels.height, payload))
        sections.append(Section(SectionKind.SKELETONS, SectionCodec.RAW, 0, 0,
                                encode_skeletons(bundle.skeletons)))
        packet = SensorPacket(self.camera_id, self._seq, bundle.timestamp_us,
                              tuple(sections))
        self._seq += 1
        return packet


def packet_is_intra(packet: SensorPacket) -> bool:
    """True when every delta-coded section is self-contained.

    The publisher aligns intra refreshes across channels, so inspecting the
    first delta-coded channel is enough. Packets with only RAW sections are
    trivially self-contained.
    """
    for s in packet.sections:
        if s.codec == SectionCodec.RAW:
            continue
        first = _split_channels(s.payload)[0]
        _, _, _, uses_prev = lossy_header(first)
        return not uses_prev
    return True


@dataclass
class MailboxStats:
    received: int = 0
    taken: int = 0
    skipped: int = 0
    dropped_gap: int = 0
    last_seq: int = -1


class CameraMailbox:
    """Latest-frame slot plus the undecoded packet run since the last intra.

    put() keeps the newest packet and the chain needed to decode it; take()
    hands both to the consumer and counts every packet that was superseded
    without being taken.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._chain: list[SensorPacket] = []
        self._newest_taken = True
        self.stats = MailboxStats()

    def put(self, packet: SensorPacket) -> None:
        with self._lock:
            st = self.stats
            st.received += 1
            # Deltas decode as long as the stream is contiguous with what the
            # consumer already took; only a real gap forces an intra wait.
            if packet_is_intra(packet):
                self._chain = [packet]
            elif st.last_seq >= 0 and packet.seq == st.last_seq + 1:
                self._chain.append(packet)
            else:
                st.dropped_gap += 1
                return
            if not self._newest_taken:
                st.skipped += 1
            self._newest_taken = False
            st.last_seq = packet.seq

    def take(self) -> list[SensorPacket] | None:
        """Return the pending chain ending at the newest packet, or None."""
        with self._lock:
            if self._newest_taken or not self._chain:
                return None
            chain = list(self._chain)
            # The consumer will decode through the newest packet; later
            # deltas continue from it, so the chain restarts empty.
            self._chain = []
            self._newest_taken = True
            self.stats.taken += 1
            return chain


class FrameDecoderBank:
    """Per-camera lazy decoder: decodes a section kind only when asked.

    Holds the undecoded packet backlog (bounded by the intra interval) and
    per-kind decoded channel references. Decoding a kind walks the backlog
    once and snaps the reference forward.
    """

    def __init__(self, packing: DepthPackingParams | None = None):
        self.packing = packing or DepthPackingParams()
        # Undecoded packets since the last intra refresh; bounded by the
        # publisher's intra interval, reset whenever an intra arrives.
        self._backlog: list[SensorPacket] = []
        self._refs: dict[SectionKind, list[np.ndarray]] = {}
        self._dims: dict[SectionKind, tuple[int, int]] = {}
        self._decoded_seq: dict[SectionKind, int] = {}
        self.newest: SensorPacket | None = None

    def feed(self, chain: list[SensorPacket]) -> None:
        for packet in chain:
            if packet_is_intra(packet):
                self._backlog = [packet]
                self._refs.clear()
                self._dims.clear()
                self._decoded_seq.clear()
            else:
                self._backlog.append(packet)
            self.newest = packet

    def _decode_kind(self, kind: SectionKind):
        done = self._decoded_seq.get(kind, -1)
        refs = self._refs.get(kind)
        for packet in self._backlog:
            if packet.seq <= done:
                continue
            section = packet.section(kind)
            if section is None:
                continue
            blobs = _split_channels(section.payload)
            new_refs = []
            for i, blob in enumerate(blobs):
                _, _, _, uses_prev = lossy_header(blob)
                prev = refs[i] if (uses_prev and refs) else None
                new_refs.append(lossy_decode(blob, prev))
            refs = new_refs
            done = packet.seq
            self._dims[kind] = (section.width, section.height)
        if refs is None:
            return None, (0, 0)
        self._refs[kind] = refs
        self._decoded_seq[kind] = done
        return refs, self._dims[kind]

    def depth_frame(self) -> DepthFrame | None:
        refs, (w, h) = self._decode_kind(SectionKind.DEPTH)
        if refs is None:
            return None
        packed = PackedDepthFrame(w, h, *refs)
        ts = self.newest.timestamp_us if self.newest else 0
        return unpack_depth(packed, self.packing, ts)

    def color_frame(self) -> ColorFrame | None:
        refs, (w, h) = self._decode_kind(SectionKind.RGB)
        if refs is None:
            return None
        data = np.stack(refs, axis=-1)
        ts = self.newest.timestamp_us if self.newest else 0
        return ColorFrame(w, h, data, ts)

    def label_frame(self) -> LabelFrame | None:
        refs, _ = self._decode_kind(SectionKind.LABELS)
        if refs is None:
            return None
        ts = self.newest.timestamp_us if self.newest else 0
        return decode_labels(refs[0], ts)

    def skeletons(self) -> list[InputSkeleton]:
        if self.newest is None:
            return []
        section = self.newest.section(SectionKind.SKELETONS)
        if section is None:
            return []
        return decode_skeletons(section.payload)


@dataclass
class FrameView:
    """Consumer handle for one taken frame; sections decode on access."""

    camera_id: int
    seq: int
    timestamp_us: int
    _bank: FrameDecoderBank

    def skeletons(self) -> list[InputSkeleton]:
        return self._bank.skeletons()

    def depth_frame(self) -> DepthFrame | None:
        return self._bank.depth_frame()

    def color_frame(self) -> ColorFrame | None:
        return self._bank.color_frame()

    def label_frame(self) -> LabelFrame | None:
        return self._bank.label_frame()


class StreamServer:
    """Broadcasts encoded packets to subscribers; drops the ones that lag."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0, queue_bound: int = 128):
        self.host = host
        self.port = port
        self.queue_bound = queue_bound
        self._listener: socket.socket | None = None
        self._subscribers: list[queue.Queue] = []
        self._lock = threading.Lock()
        self._stopping = threading.Event()
        self.subscriber_joined = threading.Event()

    def start(self) -> None:
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((self.host, self.port))
        listener.listen()
        self.port = listener.getsockname()[1]
        self._listener = listener
        threading.Thread(target=self._accept_loop, name="stream-accept", daemon=True).start()

    def subscriber_count(self) -> int:
        with self._lock:
            return len(self._subscribers)

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                conn, addr = self._listener.accept()
            except OSError:
                return
            threading.Thread(
                target=self._handshake, args=(conn,), daemon=True,
                name=f"stream-sub-{addr[1]}",
            ).start()

    def _handshake(self, conn: socket.socket) -> None:
        try:
            conn.settimeout(5.0)
            line = b""
            while not line.endswith(b"\n") and len(line) < 16:
                chunk = conn.recv(1)
                if not chunk:
                    conn.close()
                    return
                line += chunk
            if line != SUBSCRIBE_LINE:
                log.warning("stream: bad handshake %r", line)
                conn.close()
                return
            conn.settimeout(None)
        except OSError:
            conn.close()
            return
        q: queue.Queue = queue.Queue(maxsize=self.queue_bound)
        with self._lock:
            self._subscribers.append(q)
        self.subscriber_joined.set()
        threading.Thread(
            target=self._writer, args=(conn, q), daemon=True, name="stream-writer"
        ).start()

    def _writer(self, conn: socket.socket, q: queue.Queue) -> None:
        try:
            while not self._stopping.is_set():
                data = q.get()
                if data is None:
                    break
                conn.sendall(data)
        except OSError:
            pass
        finally:
            with self._lock:
                if q in self._subscribers:
                    self._subscribers.remove(q)
            conn.close()

    def broadcast(self, data: bytes) -> None:
        with self._lock:
            subs = list(self._subscribers)
        for q in subs:
            try:
                q.put_nowait(data)
            except queue.Full:
                log.warning("stream: dropping slow subscriber")
                with self._lock:
                    if q in self._subscribers:
                        self._subscribers.remove(q)
                try:
                    q.put_nowait(None)
                except queue.Full:
                    pass

    def stop(self) -> None:
        self._stopping.set()
        if self._listener is not None:
            self._listener.close()
        with self._lock:
            for q in self._subscribers:
                try:
                    q.put_nowait(None)
                except queue.Full:
                    pass
            self._subscribers.clear()


class SensorPublisher:
    """Clock-paced render/encode/broadcast loop over a set of cameras.

    frame_sources maps camera_id to a callable(frame_index) -> FrameBundle.
    A new subscriber forces the next tick to be an intra refresh so it can
    start decoding without waiting out the interval.
    """

    def __init__(self, server: StreamServer, frame_sources: dict, fps: float = 30.0,
                 intra_interval: int = DEFAULT_INTRA_INTERVAL,
                 depth_quality: CodecQuality = CodecQuality(0),
                 color_quality: CodecQuality = CodecQuality(2),
                 label_quality: CodecQuality = CodecQuality(4)):
        self.server = server
        self.frame_sources = frame_sources
        self.fps = fps
        self.encoders = {
            camera_id: FrameEncoder(
                camera_id, intra_interval=intra_interval,
                depth_quality=depth_quality, color_quality=color_quality,
                label_quality=label_quality,
            )
            for camera_id in frame_sources
        }
        self.ticks = 0
        self.bytes_sent = 0
        self._stop = threading.Event()

    def stop(self) -> None:
        self._stop.set()

    def run(self, duration: float | None = None) -> None:
        period = 1.0 / self.fps
        start = time.monotonic()
        next_tick = start
        while not self._stop.is_set():
            now = time.monotonic()
            if duration is not None and now - start >= duration:
                return
            if now < next_tick:
                time.sleep(min(next_tick - now, period))
                continue
            force_intra = self.server.subscriber_joined.is_set()
            if force_intra:
                self.server.subscriber_joined.clear()
            for camera_id, source in self.frame_sources.items():
                bundle = source(self.ticks)
                packet = self.encoders[camera_id].encode(bundle, force_intra=force_intra)
                data = encode_packet(packet)
                self.server.broadcast(data)
                self.bytes_sent += len(data)
            self.ticks += 1
            next_tick += period
            if now - next_tick > 1.0:
                # Hopelessly behind the clock; rebase instead of spiraling.
                next_tick = now


@dataclass
class ConnectionStats:
    endpoint: tuple[str, int]
    bytes_received: int = 0
    packets: int = 0
    reconnects: int = 0
    connected: bool = False
    ended: bool = False


class StreamClient:
    """Subscribes to stream servers and feeds per-camera mailboxes."""

    def __init__(self, reconnect_backoff: float = 0.5, max_backoff: float = 5.0):
        self.reconnect_backoff = reconnect_backoff
        self.max_backoff = max_backoff
        self.mailboxes: dict[int, CameraMailbox] = {}
        self.banks: dict[int, FrameDecoderBank] = {}
        self.connections: list[ConnectionStats] = []
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def connect(self, endpoint: tuple[str, int]) -> ConnectionStats:
        stats = ConnectionStats(endpoint)
        self.connections.append(stats)
        t = threading.Thread(
            target=self._reader_loop, args=(endpoint, stats), daemon=True,
            name=f"stream-reader-{endpoint[1]}",
        )
        t.start()
        self._threads.append(t)
        return stats

    def stop(self) -> None:
        self._stop.set()

    def _mailbox(self, camera_id: int) -> CameraMailbox:
        with self._lock:
            box = self.mailboxes.get(camera_id)
            if box is None:
                box = CameraMailbox()
                self.mailboxes[camera_id] = box
                self.banks[camera_id] = FrameDecoderBank()
            return box

    def _reader_loop(self, endpoint, stats: ConnectionStats) -> None:
        backoff = self.reconnect_backoff
        while not self._stop.is_set():
            try:
                sock = socket.create_connection(endpoint, timeout=5.0)
            except OSError:
                stats.connected = False
                if self._stop.wait(backoff):
                    break
                backoff = min(backoff * 2, self.max_backoff)
                stats.reconnects += 1
                continue
            try:
                sock.sendall(SUBSCRIBE_LINE)
                sock.settimeout(1.0)
                stats.connected = True
                backoff = self.reconnect_backoff
                assembler = PacketAssembler()
                while not self._stop.is_set():
                    try:
                        chunk = sock.recv(65536)
                    except socket.timeout:
                        continue
                    if not chunk:
                        break
                    stats.bytes_received += len(chunk)
                    for packet in assembler.feed(chunk):
                        stats.packets += 1
                        self._mailbox(packet.camera_id).put(packet)
            except PacketError as exc:
                log.warning("stream: corrupt packet from %s: %s", endpoint, exc)
            except OSError as exc:
                log.debug("stream: connection error %s: %s", endpoint, exc)
            finally:
                stats.connected = False
                sock.close()
            stats.ended = True
            if self._stop.wait(backoff):
                break
            backoff = min(backoff * 2, self.max_backoff)
            stats.reconnects += 1

    def take_fresh(self) -> dict[int, FrameView]:
        """Newest undecoded frame per camera that has one; decode on access."""
        views: dict[int, FrameView] = {}
        with self._lock:
            cameras = list(self.mailboxes.items())
        for camera_id, box in cameras:
            chain = box.take()
            if chain is None:
                continue
            bank = self.banks[camera_id]
            bank.feed(chain)
            newest = chain[-1]
            views[camera_id] = FrameView(
                camera_id, newest.seq, newest.timestamp_us, bank
            )
        return views

    def total_bytes(self) -> int:
        return sum(c.bytes_received for c in self.connections)

    def total_packets(self) -> int:
        return sum(c.packets for c in self.connections)
