"""PTNS tensor files and named-tensor containers.

A single tensor ("blob")::

    b"PTNS"  u8 version (=1)  u8 rank  rank x u32 dims  float32 data

all little-endian, data row-major.

A container holds metadata and several named blobs::

    PTNC 1\\n
    meta <m>\\n
    <key>=<value>\\n            (m lines)
    blobs <n>\\n
    <name>\\t<nbytes>\\n         (n lines)
    <blob bytes, concatenated in manifest order>
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"PTNS"
VERSION = 1
CONTAINER_MAGIC = b"PTNC 1"


class FormatError(ValueError):
    """Malformed PTNS data; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} at offset {offset}")


def encode(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.ndim > 255:
        raise ValueError("rank too large for PTNS")
    header = MAGIC + struct.pack("<BB", VERSION, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype="<f4").tobytes()


def decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one blob starting at ``offset``; returns (array, end offset)."""

    def need(n: int, pos: int) -> None:
        if pos + n > len(buf):
            raise FormatError("unexpected end of file", len(buf))

    need(6, offset)
    if buf[offset : offset + 4] != MAGIC:
        raise FormatError("bad magic", offset)
    version, rank = struct.unpack_from("<BB", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset + 4)
    pos = offset + 6
    need(4 * rank, pos)
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    need(4 * count, pos)
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims)
    return data.astype(np.float32), pos + 4 * count


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def load_tensor(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    array, end = decode(buf)
    if end != len(buf):
        raise FormatError("trailing bytes", end)
    return array


def encode_container(tensors: Mapping[str, np.ndarray], meta: Mapping[str, str] | None = None) -> bytes:
    meta = dict(meta or {})
    blobs = {name: encode(arr) for name, arr in tensors.items()}
    lines = [CONTAINER_MAGIC.decode(), f"meta {len(meta)}"]
    for key, value in meta.items():
        if "\n" in f"{key}{value}" or "=" in key:
            raise ValueError(f"metadata entry {key!r} cannot be stored")
        lines.append(f"{key}={value}")
    lines.append(f"blobs {len(blobs)}")
    for name, blob in blobs.items():
        if any(c in name for c in "\t\n"):
            raise ValueError(f"tensor name {name!r} cannot be stored")
        lines.append(f"{name}\t{len(blob)}")
    head = ("\n".join(lines) + "\n").encode()
    return head + b"".join(blobs.values())


def decode_container(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    pos = 0

    def line() -> tuple[str, int]:
        nonlocal pos
        end = buf.find(b"\n", pos)
        if end < 0:
            raise FormatError("unexpected end of file", len(buf))
        text = buf[pos:end].decode("utf-8", errors="replace")
        start, pos = pos, end + 1
        return text, start

    magic, at = line()
    if magic.encode() != CONTAINER_MAGIC:
        raise FormatError("not a PTNS container", at)

    def counted(label: str) -> int:
        text, at = line()
        parts = text.split(" ")
        if len(parts) != 2 or parts[0] != label or not parts[1].isdigit():
            raise FormatError(f"expected '{label} <count>'", at)
        return int(parts[1])

    meta = {}
    for _ in range(counted("meta")):
        text, at = line()
        key, sep, value = text.partition("=")
        if not sep:
            raise FormatError("malformed metadata line", at)
        meta[key] = value
    manifest = []
    for _ in range(counted("blobs")):
        text, at = line()
        name, sep, size = text.rpartition("\t")
        if not sep or not size.isdigit():
            raise FormatError("malformed manifest line", at)
        manifest.append((name, int(size)))
    tensors = {}
    for name, size in manifest:
        array, end = decode(buf, pos)
        if end - pos != size:
            raise FormatError(f"blob {name!r} size disagrees with manifest", pos)
        tensors[name] = array
        pos = end
    if pos != len(buf):
        raise FormatError("trailing bytes", pos)
    return tensors, meta


def save_container(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, str] | None = None) -> None:
    Path(path).write_bytes(encode_container(tensors, meta))


def load_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return decode_container(Path(path).read_bytes())
