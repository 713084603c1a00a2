"""Per-pixel unit-ray lookup tables.

FLUT layout, little-endian::

    b"FLUT" | version u32 = 1 | width u32 | height u32 | stride u32
    | float32[height][width][3] directions
    | ceil(width*height/8) validity bytes (LSB-first bit order, row-major)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import FisheyeIntrinsics, unproject_pixels
from .errors import DomainError, FormatError
from .formats import read_header, take
from .parallel import ordered_map

FLUT_MAGIC = b"FLUT"
FLUT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


@dataclass(frozen=True, eq=False)
class RayLut:
    width: int
    height: int
    stride: int
    directions: np.ndarray  # (height, width, 3) float32
    valid: np.ndarray  # (height, width) bool

    def __post_init__(self):
        if self.directions.shape != (self.height, self.width, 3):
            raise DomainError(f"directions shape {self.directions.shape} != ({self.height}, {self.width}, 3)")
        if self.valid.shape != (self.height, self.width):
            raise DomainError("valid mask shape mismatch")

    def __eq__(self, other):
        if not isinstance(other, RayLut):
            return NotImplemented
        return (self.width, self.height, self.stride) == (other.width, other.height, other.stride) \
            and np.array_equal(self.valid, other.valid) \
            and self.directions.tobytes() == other.directions.tobytes()

    def pixel_centers(self) -> np.ndarray:
        """(height, width, 2) source-image coordinates sampled by each entry."""
        return lut_pixel_centers(self.width, self.height, self.stride)

    @property
    def num_valid(self) -> int:
        return int(self.valid.sum())


def lut_pixel_centers(width, height, stride) -> np.ndarray:
    j = (np.arange(width) + 0.5) * stride
    i = (np.arange(height) + 0.5) * stride
    jj, ii = np.meshgrid(j, i)
    return np.stack([jj, ii], axis=-1)


def build_lut(intr: FisheyeIntrinsics, stride: int = 1, threads=None) -> RayLut:
    """Unproject the centre of every ``stride`` x ``stride`` block of the image.

    Rows are solved independently and written to fixed slots, so the result is
    byte-identical for any ``threads``.
    """
    if int(stride) != stride or stride < 1:
        raise DomainError(f"stride must be a positive integer, got {stride}")
    stride = int(stride)
    width = -(-intr.width // stride)
    height = -(-intr.height // stride)
    us = (np.arange(width) + 0.5) * stride

    def row(i):
        uv = np.stack([us, np.full(width, (i + 0.5) * stride)], axis=1)
        dirs, valid = unproject_pixels(uv, intr)
        dirs = dirs / np.where(valid, np.linalg.norm(dirs, axis=1), 1.0)[:, None]
        return dirs.astype(np.float32), valid

    rows = ordered_map(row, range(height), threads)
    directions = np.zeros((height, width, 3), dtype=np.float32)
    valid = np.zeros((height, width), dtype=bool)
    for i, (d, v) in enumerate(rows):
        directions[i] = d
        valid[i] = v
    return RayLut(width, height, stride, directions, valid)


def lut_bytes(lut: RayLut) -> bytes:
    header = _HEADER.pack(FLUT_MAGIC, FLUT_VERSION, lut.width, lut.height, lut.stride)
    bits = np.packbits(lut.valid.ravel(), bitorder="little")
    return header + lut.directions.astype("<f4").tobytes() + bits.tobytes()


def save_lut(lut: RayLut, path) -> None:
    Path(path).write_bytes(lut_bytes(lut))


def load_lut(path) -> RayLut:
    return parse_lut(Path(path).read_bytes())


def parse_lut(data: bytes) -> RayLut:
    width, height, stride = read_header(data, FLUT_MAGIC, _HEADER, FLUT_VERSION)
    offset = _HEADER.size
    n = width * height
    dirs = take(data, offset, n * 12, "direction payload")
    offset += n * 12
    nbits = (n + 7) // 8
    bits = take(data, offset, nbits, "validity bitmap")
    offset += nbits
    if offset != len(data):
        raise FormatError("trailing bytes after validity bitmap", offset=offset)
    directions = np.frombuffer(dirs, dtype="<f4").reshape(height, width, 3).astype(np.float32)
    valid = np.unpackbits(np.frombuffer(bits, dtype=np.uint8), count=n, bitorder="little")
    return RayLut(width, height, stride, directions, valid.reshape(height, width).astype(bool))
