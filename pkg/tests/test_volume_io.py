import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segan.volume_io import SegvError, Volume, load_volume, read_record, save_volume, write_record


def encode(voxels, meta=None):
    buf = io.BytesIO()
    write_record(buf, voxels, meta or {})
    return buf.getvalue()


dims = st.lists(st.integers(1, 5), min_size=4, max_size=4).map(tuple)


@settings(max_examples=60, deadline=None)
@given(dims, st.sampled_from(["f32", "u8"]), st.integers(0, 2**31 - 1),
       st.dictionaries(st.text("abcxyz_", min_size=1, max_size=5), st.text("0123 ,.-é", max_size=8), max_size=3))
def test_round_trip_is_bitwise(tmp_path_factory, shape, dtype, seed, meta):
    r = np.random.default_rng(seed)
    if dtype == "f32":
        # Raw bit patterns, so NaN payloads and signed zeros must survive too.
        vox = r.integers(0, 2**32, size=shape, dtype=np.uint64).astype(np.uint32).view(np.float32)
    else:
        vox = r.integers(0, 256, size=shape).astype(np.uint8)
    v = Volume(vox, meta)
    path = tmp_path_factory.mktemp("rt") / "v.segv"
    save_volume(v, path)
    back = load_volume(path)
    assert back == v and back.voxels.tobytes() == vox.tobytes() and back.dtype == dtype


def test_header_layout():
    raw = encode(np.zeros((1, 2, 1, 1), np.uint8), {"a": "b"})
    assert raw[:4] == bytes([0x53, 0x45, 0x47, 0x56])
    version, code, ndim = struct.unpack_from("<HBB", raw, 4)
    assert (version, code, ndim) == (1, 1, 4)
    assert struct.unpack_from("<4I", raw, 8) == (1, 2, 1, 1)
    assert struct.unpack_from("<I", raw, 24)[0] == 3 and raw[28:31] == b"a=b"
    assert len(raw) == 31 + 2


def test_bad_magic():
    raw = b"XEGV" + encode(np.zeros((1, 1, 1, 1), np.float32))[4:]
    with pytest.raises(SegvError, match="bad magic at offset 0"):
        read_record(raw)


def test_truncated_payload_reports_expected_count():
    raw = encode(np.zeros((3, 4, 4, 2), np.float32))
    with pytest.raises(SegvError, match="expected 96") as err:
        read_record(raw[:-4])
    assert err.value.offset > 0


def test_unknown_dtype_code():
    raw = bytearray(encode(np.zeros((1, 1, 1, 1), np.float32)))
    raw[6] = 7
    with pytest.raises(SegvError, match="unknown dtype code 7 at offset 6"):
        read_record(bytes(raw))


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "v.segv"
    path.write_bytes(encode(np.zeros((1, 1, 1, 1), np.uint8)) + b"\0")
    with pytest.raises(SegvError, match="trailing"):
        load_volume(path)


def test_records_concatenate():
    raw = encode(np.ones((1, 1, 1, 2), np.uint8), {"i": "0"}) + encode(np.zeros((1, 1, 1, 1), np.float32), {"i": "1"})
    a, ma, off = read_record(raw)
    b, mb, end = read_record(raw, off)
    assert ma == {"i": "0"} and mb == {"i": "1"} and end == len(raw)


def test_unsupported_dtype_rejected():
    with pytest.raises(ValueError):
        Volume(np.zeros((1, 1, 1, 1), np.float64))
