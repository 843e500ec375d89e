"""Wire protocol: sensor packets, the registry naming service, and streaming."""
from .packets import (
    MAX_SECTIONS,
    PACKET_MAGIC,
    PACKET_VERSION,
    BadMagicError,
    BadVersionError,
    DuplicateSectionError,
    PacketAssembler,
    PacketError,
    Section,
    SectionCodec,
    SectionKind,
    SensorPacket,
    TooManySectionsError,
    TruncatedPacketError,
    UnknownCodecError,
    UnknownKindError,
    decode_packet,
    decode_skeletons,
    encode_packet,
    encode_skeletons,
)
from .registry import (
    DEFAULT_REGISTRY_PORT,
    DEFAULT_STREAM_PORT,
    REGISTRY_ENV_VAR,
    DuplicateServerNameError,
    HeartbeatLoop,
    RegistryClient,
    RegistryEntry,
    RegistryError,
    RegistryServer,
    resolve_registry_endpoint,
)
from .stream import (
    CameraMailbox,
    FrameBundle,
    FrameDecoderBank,
    FrameEncoder,
    FrameView,
    SensorPublisher,
    StreamClient,
    StreamServer,
)

__all__ = [name for name in dir() if not name.startswith("_")]
