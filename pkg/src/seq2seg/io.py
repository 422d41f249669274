"""On-disk formats: STTN tensor containers, named-tensor archives, PPM/PGM rasters.

STTN container layout (all integers little-endian)::

    b"STTN" | version u8 (=1) | dtype u8 (0 float32, 1 uint16) | rank u8
    | rank x u32 dims | row-major payload

A named-tensor archive is ``u32 count`` followed by ``count`` records of
``u16 name length | UTF-8 name | STTN container``.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Mapping, Union

import numpy as np

PathLike = Union[str, Path]

MAGIC = b"STTN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<u2")}
_CODES = {np.dtype("float32"): 0, np.dtype("uint16"): 1}


class CorruptFileError(ValueError):
    """A file is truncated or its header does not parse."""


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CorruptFileError(f"truncated {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def write_sttn(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise TypeError(f"STTN stores float32 or uint16, not {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("rank too large for STTN")
    fh.write(MAGIC + bytes([VERSION, code, arr.ndim]))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def read_sttn(fh: BinaryIO) -> np.ndarray:
    head = _read_exact(fh, 7, "STTN header")
    if head[:4] != MAGIC:
        raise CorruptFileError(f"bad magic {head[:4]!r}")
    version, code, rank = head[4], head[5], head[6]
    if version != VERSION:
        raise CorruptFileError(f"unsupported STTN version {version}")
    if code not in _DTYPES:
        raise CorruptFileError(f"unknown STTN dtype byte {code}")
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "STTN dims"))
    dtype = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64))
    payload = _read_exact(fh, count * dtype.itemsize, "STTN payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def save_tensor(path: PathLike, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_sttn(fh, arr)


def load_tensor(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read_sttn(fh)
        if fh.read(1):
            raise CorruptFileError(f"{path}: trailing bytes after STTN payload")
    return arr


def save_archive(path: PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        write_sttn(buf, arr)
    Path(path).write_bytes(buf.getvalue())


def load_archive(path: PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "archive count"))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            try:
                name = _read_exact(fh, n, "tensor name").decode("utf-8")
            except UnicodeDecodeError as exc:
                raise CorruptFileError(f"{path}: tensor name is not UTF-8") from exc
            out[name] = read_sttn(fh)
        if fh.read(1):
            raise CorruptFileError(f"{path}: trailing bytes after archive")
    return out


# ---------------------------------------------------------------------------
# Netpbm


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise CorruptFileError("truncated netpbm header")
        if data[pos : pos + 1] == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise CorruptFileError("truncated netpbm comment")
            pos = end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if pos >= len(data):
        raise CorruptFileError("netpbm header not terminated")
    return tokens, pos + 1


def _read_netpbm(path: PathLike, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, offset = _header_tokens(data, 4)
    if tokens[0] != magic:
        raise CorruptFileError(f"{path}: expected {magic.decode()} header, got {tokens[0][:8]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise CorruptFileError(f"{path}: non-numeric netpbm header") from exc
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise CorruptFileError(f"{path}: invalid netpbm header {w}x{h} maxval {maxval}")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = w * h * channels * dtype.itemsize
    body = data[offset : offset + need]
    if len(body) != need:
        raise CorruptFileError(f"{path}: truncated pixel data ({len(body)} of {need} bytes)")
    arr = np.frombuffer(body, dtype=dtype).reshape((h, w, channels) if channels > 1 else (h, w))
    return arr.astype(np.uint8 if maxval < 256 else np.uint16)


def read_ppm(path: PathLike) -> np.ndarray:
    """Binary P6 to an ``(H, W, 3)`` uint8 array."""
    return _read_netpbm(path, b"P6", 3)


def read_pgm(path: PathLike) -> np.ndarray:
    """Binary P5 to an ``(H, W)`` uint8 (or uint16 when maxval > 255) array."""
    return _read_netpbm(path, b"P5", 1)


def write_ppm(path: PathLike, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"P6 needs an (H, W, 3) uint8 array, got {rgb.shape} {rgb.dtype}")
    h, w, _ = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(rgb).tobytes())


def write_pgm(path: PathLike, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError(f"P5 needs a 2-D array, got shape {gray.shape}")
    h, w = gray.shape
    if gray.dtype == np.uint8:
        body, maxval = gray.tobytes(), 255
    elif gray.dtype == np.uint16:
        body, maxval = gray.astype(">u2").tobytes(), 65535
    else:
        raise ValueError(f"P5 needs uint8 or uint16 data, got {gray.dtype}")
    Path(path).write_bytes(b"P5\n%d %d\n%d\n" % (w, h, maxval) + body)
