"""Versioned container for one compressed image.

Layout (little-endian)::

    "GSLS" | version u8 | width u16 | height u16 | lambda_idx u8 |
    rho_f_idx u8 | rho_h_idx u8 | side_len u32 | side | main_len u32 | main
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

MAGIC = b"GSLS"
VERSION = 2
STEP_COUNT = 8
_HEADER = struct.Struct("<4sBHHBBB")
_LEN = struct.Struct("<I")
HEADER_BYTES = _HEADER.size + 2 * _LEN.size


class FormatError(ValueError):
    """Malformed or unsupported bitstream."""


@dataclass(frozen=True)
class Bitstream:
    width: int
    height: int
    lambda_index: int
    rho_f_index: int
    rho_h_index: int
    side_payload: bytes
    main_payload: bytes

    def __post_init__(self):
        for name in ("rho_f_index", "rho_h_index"):
            value = getattr(self, name)
            if not 0 <= value < STEP_COUNT:
                raise FormatError(f"{name} {value} outside 0..{STEP_COUNT - 1}")
        if not (0 < self.width < 1 << 16 and 0 < self.height < 1 << 16):
            raise FormatError(f"image size {self.width}x{self.height} not representable")
        if not 0 <= self.lambda_index < 256:
            raise FormatError(f"lambda index {self.lambda_index} not representable")

    def to_bytes(self) -> bytes:
        return b"".join(
            [
                _HEADER.pack(
                    MAGIC,
                    VERSION,
                    self.width,
                    self.height,
                    self.lambda_index,
                    self.rho_f_index,
                    self.rho_h_index,
                ),
                _LEN.pack(len(self.side_payload)),
                self.side_payload,
                _LEN.pack(len(self.main_payload)),
                self.main_payload,
            ]
        )

    def __len__(self) -> int:
        return HEADER_BYTES + len(self.side_payload) + len(self.main_payload)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < _HEADER.size + _LEN.size:
            raise FormatError(f"stream of {len(data)} bytes is shorter than the header")
        magic, version, width, height, lam, rho_f, rho_h = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"unsupported version {version}")
        pos = _HEADER.size
        (side_len,) = _LEN.unpack_from(data, pos)
        pos += _LEN.size
        if pos + side_len + _LEN.size > len(data):
            raise FormatError("side payload length exceeds stream")
        side = data[pos : pos + side_len]
        pos += side_len
        (main_len,) = _LEN.unpack_from(data, pos)
        pos += _LEN.size
        if pos + main_len != len(data):
            raise FormatError(f"main payload length {main_len} does not match remaining {len(data) - pos} bytes")
        return cls(width, height, lam, rho_f, rho_h, side, data[pos:])
