"""Binary tensor blobs and key=value manifests.

Blob layout (little endian): ``b"I2IT"``, u32 version (=1), u32 ndims,
ndims x u32 dims, then prod(dims) x f64 values in row-major order.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"I2IT"
VERSION = 1
BLOB_SUFFIX = ".i2it"


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d
    head = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("bad magic bytes", field="magic", offset=0)
    if len(buf) < 12:
        raise FormatError("truncated header", field="version", offset=len(buf))
    version, ndims = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", field="version", offset=4)
    dims_end = 12 + 4 * ndims
    if len(buf) < dims_end:
        raise FormatError(f"truncated dims (ndims={ndims})", field="dims", offset=len(buf))
    dims = struct.unpack_from(f"<{ndims}I", buf, 12)
    if any(d == 0 for d in dims):
        raise FormatError(f"zero-sized dimension in {dims}", field="dims", offset=12)
    count = int(np.prod(dims, dtype=np.int64)) if ndims else 1
    expected = dims_end + 8 * count
    if len(buf) < expected:
        raise FormatError(f"truncated data: need {expected} bytes, have {len(buf)}",
                          field="data", offset=len(buf))
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes", field="data",
                          offset=expected)
    flat = np.frombuffer(buf, dtype="<f8", count=count, offset=dims_end)
    return np.reshape(flat, dims).astype(np.float64)


def write_tensor(path: str | os.PathLike, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(format_value(x) for x in v)
    return str(v)


def write_manifest(path: str | os.PathLike, entries: dict) -> None:
    lines = [f"{k}={format_value(v)}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | os.PathLike) -> dict[str, str]:
    out: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("manifest is not UTF-8", field="manifest", offset=exc.start) from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno} is not key=value", field=f"line{lineno}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def to_rgb8(img: np.ndarray) -> np.ndarray:
    """Map a ``[C,H,W]`` image in [-1, 1] to ``[H,W,3]`` uint8 (grayscale is replicated)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected [1|3,H,W] image, got {img.shape}")
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    return np.round((np.clip(img, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(path: str | os.PathLike, panels: list[np.ndarray], gap: int = 2) -> None:
    """Binary PPM (P6) of ``[C,H,W]`` panels laid out left to right."""
    rgb = [to_rgb8(p) for p in panels]
    h = rgb[0].shape[0]
    if any(r.shape[0] != h for r in rgb):
        raise ValueError("panels must share a height")
    spacer = np.full((h, gap, 3), 255, dtype=np.uint8)
    parts = []
    for i, r in enumerate(rgb):
        if i:
            parts.append(spacer)
        parts.append(r)
    canvas = np.concatenate(parts, axis=1)
    header = f"P6\n{canvas.shape[1]} {canvas.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + canvas.tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header", field="header", offset=pos)
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise FormatError("not a binary 8-bit PPM", field="header", offset=0)
    w, h = int(tokens[1]), int(tokens[2])
    pixels = data[pos:]
    if len(pixels) != w * h * 3:
        raise FormatError(f"expected {w * h * 3} pixel bytes, got {len(pixels)}",
                          field="data", offset=pos)
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)
