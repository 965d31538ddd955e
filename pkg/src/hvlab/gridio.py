"""Binary grid-dump format shared by all artifacts.

Layout: 16-byte magic ``HVLAB-GRID`` padded with NULs, u32 version, u32 rank,
rank x u64 extents, then a float64 little-endian payload.  Complex arrays are
stored with a trailing extent of 2 (interleaved re, im) and a version flag.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"HVLAB-GRID" + b"\x00" * 6
VERSION_REAL = 1
VERSION_COMPLEX = 2

__all__ = ["save_grid_array", "load_grid_array", "write_sidecar", "read_sidecar"]


def save_grid_array(path, arr: np.ndarray) -> None:
    """Write a real or complex ndarray in the repo's binary dump format."""
    arr = np.asarray(arr)
    path = Path(path)
    if np.iscomplexobj(arr):
        version = VERSION_COMPLEX
        payload = np.empty(arr.shape + (2,), dtype="<f8")
        payload[..., 0] = arr.real
        payload[..., 1] = arr.imag
    else:
        version = VERSION_REAL
        payload = arr.astype("<f8", copy=False)
    extents = payload.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", version, len(extents)))
        fh.write(struct.pack(f"<{len(extents)}Q", *extents))
        fh.write(np.ascontiguousarray(payload).tobytes())


def load_grid_array(path) -> np.ndarray:
    """Read an array written by :func:`save_grid_array`."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(16)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, rank = struct.unpack("<II", fh.read(8))
        if version not in (VERSION_REAL, VERSION_COMPLEX):
            raise ValueError(f"{path}: unsupported version {version}")
        extents = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
        count = int(np.prod(extents)) if rank else 1
        payload = np.frombuffer(fh.read(8 * count), dtype="<f8", count=count)
    payload = payload.reshape(extents)
    if version == VERSION_COMPLEX:
        if extents[-1] != 2:
            raise ValueError(f"{path}: complex dump must have trailing extent 2")
        return payload[..., 0] + 1j * payload[..., 1]
    return payload.copy()


def write_sidecar(path, meta: dict) -> None:
    """Write the JSON sidecar next to a binary dump (sorted keys, stable bytes)."""
    Path(path).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def read_sidecar(path) -> dict:
    return json.loads(Path(path).read_text())
