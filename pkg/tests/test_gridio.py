"""Binary grid-dump format: layout and round trips."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hvlab.gridio import MAGIC, load_grid_array, read_sidecar, save_grid_array, write_sidecar


def test_header_layout(tmp_path):
    path = tmp_path / "a.grid"
    save_grid_array(path, np.arange(6.0).reshape(2, 3))
    raw = path.read_bytes()
    assert raw[:16] == b"HVLAB-GRID" + b"\x00" * 6
    version, rank = struct.unpack("<II", raw[16:24])
    assert version == 1 and rank == 2
    extents = struct.unpack("<2Q", raw[24:40])
    assert extents == (2, 3)
    assert len(raw) == 40 + 6 * 8


def test_complex_roundtrip(tmp_path):
    arr = np.array([[1 + 2j, 3 - 4j], [0j, 1j]])
    path = tmp_path / "c.grid"
    save_grid_array(path, arr)
    back = load_grid_array(path)
    assert back.dtype.kind == "c"
    assert np.array_equal(back, arr)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.grid"
    path.write_bytes(b"NOT-A-DUMP" + b"\x00" * 30)
    with pytest.raises(ValueError):
        load_grid_array(path)


@settings(max_examples=25, deadline=None)
@given(
    shape=st.lists(st.integers(1, 5), min_size=1, max_size=3),
    complex_=st.booleans(),
    seed=st.integers(0, 2**16),
)
def test_roundtrip_property(tmp_path_factory, shape, complex_, seed):
    rng = np.random.default_rng(seed)
    arr = rng.normal(size=shape)
    if complex_:
        arr = arr + 1j * rng.normal(size=shape)
    path = tmp_path_factory.mktemp("gio") / "x.grid"
    save_grid_array(path, arr)
    assert np.array_equal(load_grid_array(path), arr)


def test_sidecar_roundtrip(tmp_path):
    meta = {"N": 3, "d": 1, "backend": "dense", "hbar": 1 / 3, "grid": {"Mq": 32}}
    p = tmp_path / "x.json"
    write_sidecar(p, meta)
    assert read_sidecar(p) == meta
    # stable bytes: same content writes identical files
    p2 = tmp_path / "y.json"
    write_sidecar(p2, dict(reversed(list(meta.items()))))
    assert p.read_bytes() == p2.read_bytes()
