"""Little-endian helpers shared by the GMIL, GMIP and GMIC binary formats."""

from __future__ import annotations

import struct

import numpy as np

from numpy.typing import NDArray

from graph_mil._errors import FormatErrorCode
from graph_mil._errors import GraphMilFormatError


U16 = struct.Struct("<H")
U32 = struct.Struct("<I")
MAGIC_VERSION = struct.Struct("<4sH")


def pack_header(magic: bytes, version: int) -> bytes:
    return MAGIC_VERSION.pack(magic, version)


def pack_text(text: str, length: struct.Struct = U16) -> bytes:
    raw = text.encode("utf-8")
    return length.pack(len(raw)) + raw


def pack_matrix(matrix: NDArray[np.float64], dtype: str = "<f8") -> bytes:
    """u32 rows, u32 cols, then the row-major payload."""
    data = np.atleast_2d(np.asarray(matrix))
    rows, cols = data.shape
    return U32.pack(rows) + U32.pack(cols) + data.astype(dtype).tobytes()


class ByteReader:
    """Sequential reader that turns short reads into ``TRUNCATED`` errors."""

    def __init__(self, buffer: bytes, source: str = "<buffer>") -> None:
        self.buffer = buffer
        self.source = source
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.buffer):
            raise GraphMilFormatError(
                FormatErrorCode.TRUNCATED,
                f"{self.source} ends inside {what} (need {end} bytes, "
                f"have {len(self.buffer)}).",
            )
        chunk = self.buffer[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, layout: struct.Struct, what: str) -> tuple[int, ...]:
        return layout.unpack(self.take(layout.size, what))

    def u16(self, what: str) -> int:
        return int(self.unpack(U16, what)[0])

    def u32(self, what: str) -> int:
        return int(self.unpack(U32, what)[0])

    def text(self, what: str, length: struct.Struct = U16) -> str:
        size = int(self.unpack(length, f"{what} length")[0])
        try:
            return self.take(size, what).decode("utf-8")
        except UnicodeDecodeError as e:
            raise GraphMilFormatError(
                FormatErrorCode.CORRUPT, f"{self.source}: {what} is not UTF-8."
            ) from e

    def array(
        self, shape: tuple[int, ...], dtype: str, what: str
    ) -> NDArray[np.float64]:
        count = int(np.prod(shape))
        raw = self.take(count * np.dtype(dtype).itemsize, what)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.float64)

    def matrix(self, what: str, dtype: str = "<f8") -> NDArray[np.float64]:
        rows = self.u32(f"{what} rows")
        cols = self.u32(f"{what} cols")
        return self.array((rows, cols), dtype, what)

    def header(self, magic: bytes, version: int) -> None:
        found, found_version = self.unpack(MAGIC_VERSION, "header")
        if found != magic:
            raise GraphMilFormatError(
                FormatErrorCode.BAD_MAGIC,
                f"{self.source}: expected magic {magic!r}, got {found!r}.",
            )
        if found_version != version:
            raise GraphMilFormatError(
                FormatErrorCode.VERSION_MISMATCH,
                f"{self.source}: format version {found_version} is not supported "
                f"(expected {version}).",
            )

    def finish(self) -> None:
        extra = len(self.buffer) - self.offset
        if extra:
            raise GraphMilFormatError(
                FormatErrorCode.CORRUPT, f"{self.source}: {extra} trailing bytes."
            )
