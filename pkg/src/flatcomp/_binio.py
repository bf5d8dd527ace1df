"""Little-endian record helpers shared by the .fcpt / .fmsk / .fqnt formats."""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path


class FormatError(ValueError):
    """File is not in the expected format (bad magic, bad CRC, garbage)."""


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def seal(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def open_sealed(raw: bytes, magic: bytes, version: bytes, what: str) -> "Reader":
    """Check magic, version byte and CRC32 trailer; return a reader past the header."""
    head = len(magic) + len(version)
    if len(raw) < head:
        raise TruncatedError(f"{what}: file too short ({len(raw)} bytes)")
    if raw[: len(magic)] != magic:
        raise FormatError(f"{what}: bad magic {raw[:len(magic)]!r}")
    got = raw[len(magic): head]
    if got != version:
        raise VersionError(f"{what}: unsupported version byte {got!r} (expected {version!r})")
    if len(raw) < head + 4:
        raise TruncatedError(f"{what}: missing CRC trailer")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        # a short read usually shows up as a CRC mismatch; report it as truncation
        raise TruncatedError(f"{what}: CRC mismatch (truncated or corrupted file)")
    return Reader(body, head, what)


class Writer:
    def __init__(self, header: bytes) -> None:
        self.parts: list[bytes] = [header]

    def u8(self, x: int) -> None:
        self.parts.append(struct.pack("<B", x))

    def u16(self, x: int) -> None:
        self.parts.append(struct.pack("<H", x))

    def u32(self, x: int) -> None:
        self.parts.append(struct.pack("<I", x))

    def u64(self, x: int) -> None:
        self.parts.append(struct.pack("<Q", x))

    def i32(self, x: int) -> None:
        self.parts.append(struct.pack("<i", x))

    def f64(self, x: float) -> None:
        self.parts.append(struct.pack("<d", x))

    def string(self, s: str) -> None:
        b = s.encode("utf-8")
        self.u32(len(b))
        self.parts.append(b)

    def shape(self, shape) -> None:
        self.u8(len(shape))
        for d in shape:
            self.u32(int(d))

    def raw(self, b: bytes) -> None:
        self.parts.append(b)

    def sealed(self) -> bytes:
        return seal(b"".join(self.parts))


class Reader:
    def __init__(self, body: bytes, pos: int, what: str) -> None:
        self.body = body
        self.pos = pos
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.body):
            raise TruncatedError(f"{self.what}: unexpected end of data")
        out = self.body[self.pos: self.pos + n]
        self.pos += n
        return out

    def _unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]

    def u8(self) -> int:
        return self._unpack("<B")

    def u16(self) -> int:
        return self._unpack("<H")

    def u32(self) -> int:
        return self._unpack("<I")

    def u64(self) -> int:
        return self._unpack("<Q")

    def i32(self) -> int:
        return self._unpack("<i")

    def f64(self) -> float:
        return self._unpack("<d")

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def shape(self) -> tuple[int, ...]:
        return tuple(self.u32() for _ in range(self.u8()))

    def done(self) -> bool:
        return self.pos == len(self.body)
