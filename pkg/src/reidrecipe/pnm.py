"""Binary PPM (P6) / PGM (P5) codecs and atomic file writes."""

import os
import tempfile

import numpy as np

from .errors import FormatError, StorageError, TruncationError


def atomic_write_bytes(path, payload: bytes):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def quantize(values):
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_ppm(pixels) -> bytes:
    """``pixels`` is ``[3,H,W]`` in [0,1]."""
    arr = quantize(pixels)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise FormatError(f"PPM needs [3,H,W] pixels, got {arr.shape}")
    _, h, w = arr.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(arr.transpose(1, 2, 0)).tobytes()


def encode_pgm(values) -> bytes:
    arr = quantize(values)
    if arr.ndim != 2:
        raise FormatError(f"PGM needs [H,W] values, got {arr.shape}")
    h, w = arr.shape
    return b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(arr).tobytes()


def _parse_header(data, path):
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncationError(f"{path}: truncated header")
        fields.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return fields, pos + 1


def decode_pnm(data: bytes, path="<bytes>"):
    """Returns float32 ``[3,H,W]`` (P6) or ``[H,W]`` (P5) in [0,1]."""
    fields, offset = _parse_header(data, path)
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported magic {magic!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: bad header {fields!r}") from exc
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad dimensions or maxval")
    channels = 3 if magic == b"P6" else 1
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    count = w * h * channels
    need = count * np.dtype(dtype).itemsize
    raster = data[offset:offset + need]
    if len(raster) < need:
        raise TruncationError(f"{path}: raster has {len(raster)} of {need} bytes")
    arr = np.frombuffer(raster, dtype=dtype).astype(np.float32) / np.float32(maxval)
    if channels == 3:
        return np.ascontiguousarray(arr.reshape(h, w, 3).transpose(2, 0, 1))
    return arr.reshape(h, w)


def read_pnm(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise StorageError(f"cannot read image {path}: {exc}") from exc
    return decode_pnm(data, path)


def write_ppm(path, pixels):
    atomic_write_bytes(path, encode_ppm(pixels))


def write_pgm(path, values):
    atomic_write_bytes(path, encode_pgm(values))
