"""On-disk bitstream framing.

Fixed little-endian header followed by four range-coded sub-streams::

    magic "AIFC" | version u8 | model hash 8B | width u16 | height u16 |
    lambda index u8 | 4 x u32 sub-stream lengths | crc32 u32 | payload

Sub-streams, in order: hyper-latent and latent residuals of the auxiliary
network, then hyper-latent and latent residuals of the main network. The
CRC covers every header byte before it plus the payload.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

MAGIC = b"AIFC"
VERSION = 1
_HEADER = struct.Struct("<4sB8sHHB4I")
_CRC = struct.Struct("<I")
HEADER_SIZE = _HEADER.size + _CRC.size


class ContainerError(Exception):
    """Base class for every container decoding failure."""


class BadMagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncatedStreamError(ContainerError):
    pass


class ContainerFormatError(ContainerError):
    """Structurally invalid header (trailing bytes, zero-size image)."""


class ChecksumError(ContainerError):
    pass


class ConfigMismatchError(ContainerError):
    """The stream was produced by a different config or weight set."""


@dataclass(frozen=True)
class ContainerHeader:
    model_hash: bytes
    width: int
    height: int
    lambda_index: int
    lengths: tuple
    version: int = VERSION

    @property
    def payload_size(self) -> int:
        return sum(self.lengths)

    def pack_fields(self) -> bytes:
        return _HEADER.pack(MAGIC, self.version, self.model_hash, self.width,
                            self.height, self.lambda_index, *self.lengths)


def pack(header: ContainerHeader, streams) -> bytes:
    streams = [bytes(s) for s in streams]
    if len(streams) != 4:
        raise ValueError("a container holds exactly four sub-streams")
    if tuple(len(s) for s in streams) != tuple(header.lengths):
        raise ValueError("header lengths disagree with sub-streams")
    if not (0 < header.width < 1 << 16 and 0 < header.height < 1 << 16):
        raise ValueError(f"image size {header.width}x{header.height} not representable")
    head = header.pack_fields()
    payload = b"".join(streams)
    crc = zlib.crc32(payload, zlib.crc32(head)) & 0xFFFFFFFF
    return head + _CRC.pack(crc) + payload


def read_header(data: bytes, verify: bool = True) -> ContainerHeader:
    """Parse and validate the header; checks the CRC when ``verify``."""
    data = bytes(data)
    if not data.startswith(MAGIC) and not (len(data) < 4 and MAGIC.startswith(data)):
        raise BadMagicError("not an AIFC container (bad magic)")
    if len(data) < HEADER_SIZE:
        raise TruncatedStreamError(f"{len(data)} bytes is shorter than the header")
    magic, version, model_hash, width, height, lam, *lengths = _HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionError(f"container version {version}, this decoder reads {VERSION}")
    header = ContainerHeader(model_hash, width, height, lam, tuple(lengths), version)
    have = len(data) - HEADER_SIZE
    if have < header.payload_size:
        raise TruncatedStreamError(
            f"payload has {have} bytes, header declares {header.payload_size}"
        )
    if have > header.payload_size:
        raise ContainerFormatError(
            f"{have - header.payload_size} trailing bytes after declared payload"
        )
    if verify:
        (crc,) = _CRC.unpack_from(data, _HEADER.size)
        actual = zlib.crc32(data[HEADER_SIZE:], zlib.crc32(data[: _HEADER.size])) & 0xFFFFFFFF
        if crc != actual:
            raise ChecksumError(f"checksum {crc:08x} != computed {actual:08x}")
    if width == 0 or height == 0:
        raise ContainerFormatError("zero-size image")
    return header


def unpack(data: bytes) -> tuple[ContainerHeader, list[bytes]]:
    header = read_header(data)
    streams, pos = [], HEADER_SIZE
    for n in header.lengths:
        streams.append(bytes(data[pos : pos + n]))
        pos += n
    return header, streams
