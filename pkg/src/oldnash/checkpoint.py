"""Binary field checkpoints (``.oldn``).

Layout, all little-endian::

    b"OLDN" | version u32 | nx u32 | ny u32 | levels u32 | components u32
    | float64 data: per level, interior x-faces then interior y-faces

``levels`` is the number of stored time levels (``nt + 1`` for a
trajectory, ``nt`` for a control history, ``1`` for a single field).
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError

MAGIC = b"OLDN"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")
COMPONENTS = 2


class BadMagic(CheckpointError):
    pass


class UnsupportedVersion(CheckpointError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


class GridMismatch(CheckpointError):
    pass


@dataclass
class FieldCheckpoint:
    nx: int
    ny: int
    data: np.ndarray  # (levels, n_faces)
    version: int = VERSION

    @property
    def levels(self):
        return self.data.shape[0]


def encode(grid, fields):
    fields = np.asarray(fields, dtype=float)
    if fields.ndim == 1:
        fields = fields[None]
    if fields.ndim != 2 or fields.shape[1] != grid.n_faces:
        raise CheckpointError(f"expected (levels, {grid.n_faces}) data, got {fields.shape}")
    head = _HEADER.pack(MAGIC, VERSION, grid.nx, grid.ny, fields.shape[0], COMPONENTS)
    return head + np.ascontiguousarray(fields, dtype="<f8").tobytes()


def decode(blob, grid=None):
    if len(blob) < _HEADER.size:
        raise TruncatedCheckpoint("truncated checkpoint: header incomplete")
    magic, version, nx, ny, levels, comps = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}: not an .oldn checkpoint")
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported version {version} (expected {VERSION})")
    if comps != COMPONENTS:
        raise CheckpointError(f"unsupported component count {comps}")
    n_faces = (nx - 1) * ny + nx * (ny - 1)
    need = _HEADER.size + 8 * levels * n_faces
    if len(blob) < need:
        raise TruncatedCheckpoint(f"truncated checkpoint: {len(blob)} bytes, expected {need}")
    if len(blob) > need:
        raise CheckpointError(f"trailing bytes in checkpoint: {len(blob) - need}")
    if grid is not None and (grid.nx, grid.ny) != (nx, ny):
        raise GridMismatch(f"checkpoint grid {nx}x{ny} does not match {grid.nx}x{grid.ny}")
    data = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size, count=levels * n_faces)
    return FieldCheckpoint(nx, ny, data.reshape(levels, n_faces).astype(float), version)


def write_checkpoint(path, grid, fields):
    with open(path, "wb") as fh:
        fh.write(encode(grid, fields))


def read_checkpoint(path, grid=None):
    with open(path, "rb") as fh:
        return decode(fh.read(), grid)
