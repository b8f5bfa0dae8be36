"""Binary PPM (P6) and PGM (P5) files with 8-bit samples."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    def __init__(self, path, message: str):
        self.path = str(path)
        super().__init__(f"{path}: {message}")


def _header_tokens(buf: bytes, count: int, path) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise NetpbmError(path, "truncated header")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read(path) -> np.ndarray:
    """Return uint8 [H, W] for P5 or [H, W, 3] for P6."""
    buf = Path(path).read_bytes()
    tokens, pos = _header_tokens(buf, 4, path)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(path, f"unsupported format {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise NetpbmError(path, "malformed header") from None
    if maxval != 255:
        raise NetpbmError(path, f"only 8-bit files are supported (maxval {maxval})")
    channels = 3 if magic == b"P6" else 1
    size = width * height * channels
    raster = buf[pos : pos + size]
    if len(raster) != size:
        raise NetpbmError(path, "truncated raster")
    arr = np.frombuffer(raster, dtype=np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape).copy()


def encode(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("netpbm arrays must be uint8")
    if array.ndim == 2:
        magic = b"P5"
    elif array.ndim == 3 and array.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode array of shape {array.shape}")
    height, width = array.shape[:2]
    return magic + f"\n{width} {height}\n255\n".encode() + np.ascontiguousarray(array).tobytes()


def write(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def image_to_chw(rgb: np.ndarray) -> np.ndarray:
    """uint8 [H, W, 3] -> float32 [3, H, W] in [0, 1]."""
    return (np.asarray(rgb, dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()


def chw_to_image(chw: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(chw).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
