"""Binary per-pixel field files (FPFD) and 8-bit PGM/PPM helpers.

FPFD layout, little-endian::

    b"FPFD" | version u32 = 1 | width u32 | height u32 | channels u32
    | float32[height][width][channels]
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError

FPFD_MAGIC = b"FPFD"
FPFD_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


def read_header(data: bytes, magic: bytes, header: struct.Struct, version: int):
    if len(data) < header.size:
        raise FormatError(f"truncated header: {len(data)} of {header.size} bytes", offset=len(data))
    fields = header.unpack_from(data, 0)
    if fields[0] != magic:
        raise FormatError(f"bad magic {fields[0]!r}, expected {magic!r}", offset=0)
    if fields[1] != version:
        raise FormatError(f"unsupported version {fields[1]}", offset=4)
    return fields[2:]


def take(data: bytes, offset: int, nbytes: int, what: str) -> bytes:
    if offset + nbytes > len(data):
        raise FormatError(f"truncated {what}: need {nbytes} bytes, have {len(data) - offset}",
                          offset=len(data))
    return data[offset:offset + nbytes]


def save_field(array, path) -> None:
    """Write an (H, W) or (H, W, C) array as float32 FPFD."""
    a = np.asarray(array, dtype=np.float32)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ValueError(f"field must be 2-D or 3-D, got shape {a.shape}")
    h, w, c = a.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FPFD_MAGIC, FPFD_VERSION, w, h, c))
        fh.write(a.astype("<f4").tobytes())


def load_field(path) -> np.ndarray:
    """Read an FPFD file; always returns shape (H, W, C) float32."""
    data = Path(path).read_bytes()
    w, h, c = read_header(data, FPFD_MAGIC, _HEADER, FPFD_VERSION)
    n = w * h * c * 4
    payload = take(data, _HEADER.size, n, "FPFD payload")
    if len(data) != _HEADER.size + n:
        raise FormatError("trailing bytes after FPFD payload", offset=_HEADER.size + n)
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float32)


def save_pgm(ids, path) -> None:
    a = np.asarray(ids)
    if a.ndim != 2 or a.min(initial=0) < 0 or a.max(initial=0) > 255:
        raise ValueError("PGM payload must be a 2-D array of values in [0, 255]")
    Image.fromarray(a.astype(np.uint8), mode="L").save(path, format="PPM")


def load_pgm(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode != "L":
                raise FormatError(f"{path}: expected 8-bit grayscale PGM, got mode {img.mode}")
            return np.array(img, dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise FormatError(f"{path}: {exc}") from None


def save_visualization(raster_channels, path, sidecar=None) -> list[tuple[float, float]]:
    """Min-max scale each channel to 8 bits and write PGM (1 channel) or PPM.

    The per-channel (min, max) scaling is written to ``sidecar`` (defaults to
    ``path`` + ".scale.txt") and returned.
    """
    a = np.asarray(raster_channels, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    scales = []
    out = np.zeros(a.shape[:2] + (a.shape[2],), dtype=np.uint8)
    for c in range(a.shape[2]):
        lo, hi = float(a[..., c].min()), float(a[..., c].max())
        span = hi - lo
        if span > 0:
            out[..., c] = np.round((a[..., c] - lo) / span * 255.0).astype(np.uint8)
        scales.append((lo, hi))
    if out.shape[2] == 1:
        Image.fromarray(out[..., 0], mode="L").save(path, format="PPM")
    else:
        rgb = np.zeros(out.shape[:2] + (3,), dtype=np.uint8)
        rgb[..., :min(3, out.shape[2])] = out[..., :3]
        Image.fromarray(rgb, mode="RGB").save(path, format="PPM")
    sidecar = Path(sidecar) if sidecar is not None else Path(str(path) + ".scale.txt")
    sidecar.write_text("channel,min,max\n" + "".join(
        f"{c},{lo!r},{hi!r}\n" for c, (lo, hi) in enumerate(scales)))
    return scales
