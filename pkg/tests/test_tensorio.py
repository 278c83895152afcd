import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from fsvad.tensorio import (
    BadMagicError,
    DatasetManifest,
    ManifestEntry,
    ManifestError,
    TruncatedPayloadError,
    UnsupportedDtypeError,
    VersionMismatchError,
    decode_tensor,
    encode_tensor,
    load_manifest,
    manifest_from_json,
    read_tensor,
    save_manifest,
    validate_manifest,
    write_tensor,
)


def test_zero_float_scalar_layout(tmp_path):
    path = tmp_path / "z.actf"
    write_tensor(path, np.zeros((1, 1), np.float32))
    blob = path.read_bytes()
    # magic + version + dtype + ndim + two u32 dims
    assert blob[:4] == b"ACTF"
    assert blob[4:7] == bytes([1, 1, 2])
    assert struct.unpack("<2I", blob[7:15]) == (1, 1)
    assert len(blob) == 15 + 4
    assert blob[15:] == b"\x00" * 4


def test_uint8_payload_bytes(tmp_path):
    path = tmp_path / "u.actf"
    write_tensor(path, np.arange(6, dtype=np.uint8).reshape(2, 3))
    blob = path.read_bytes()
    assert blob[-6:] == bytes([0, 1, 2, 3, 4, 5])
    back = read_tensor(path)
    assert back.shape == (2, 3)
    assert back.dtype == np.uint8
    np.testing.assert_array_equal(back.ravel(), np.arange(6))


def test_float64_little_endian():
    blob = encode_tensor(np.array([1.5], dtype=np.float64))
    assert blob[-8:] == struct.pack("<d", 1.5)


_dtypes = st.sampled_from([np.uint8, np.float32, np.float64])


@st.composite
def tensors(draw):
    dtype = draw(_dtypes)
    shape = draw(hnp.array_shapes(min_dims=1, max_dims=5, min_side=1, max_side=4))
    elements = None
    if dtype is not np.uint8:
        elements = st.floats(allow_nan=True, allow_infinity=True, width=np.dtype(dtype).itemsize * 8)
    return draw(hnp.arrays(dtype, shape, elements=elements))


@settings(max_examples=60, deadline=None)
@given(tensors())
def test_round_trip_bit_exact(arr):
    back = decode_tensor(encode_tensor(arr))
    assert back.dtype == arr.dtype
    assert back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


@settings(max_examples=30, deadline=None)
@given(tensors())
def test_payload_length_matches_dims(arr):
    blob = encode_tensor(arr)
    header = 7 + 4 * arr.ndim
    assert len(blob) - header == arr.size * arr.dtype.itemsize


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.actf"
    blob = bytearray(encode_tensor(np.zeros(3, np.float32)))
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(BadMagicError):
        read_tensor(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "short.actf"
    path.write_bytes(encode_tensor(np.zeros(3, np.float32))[:-1])
    with pytest.raises(TruncatedPayloadError):
        read_tensor(path)


def test_version_mismatch():
    blob = bytearray(encode_tensor(np.zeros(2, np.uint8)))
    blob[4] = 2
    with pytest.raises(VersionMismatchError):
        decode_tensor(bytes(blob))


def test_unsupported_dtype():
    with pytest.raises(UnsupportedDtypeError):
        encode_tensor(np.zeros(2, np.int64))
    blob = bytearray(encode_tensor(np.zeros(2, np.uint8)))
    blob[5] = 9
    with pytest.raises(UnsupportedDtypeError):
        decode_tensor(bytes(blob))


def test_trailing_bytes_rejected():
    with pytest.raises(ValueError):
        decode_tensor(encode_tensor(np.zeros(2, np.uint8)) + b"\x00")


# ---------------------------------------------------------------------------
# manifests


def _video(tmp_path, name, T=5):
    write_tensor(tmp_path / name, np.zeros((T, 4, 4, 3), np.uint8))
    return name


def _valid_doc(tmp_path):
    return {
        "domain_tag": "target_abnormal",
        "entries": [
            {"video_path": _video(tmp_path, "a.actf"), "label": 1, "anomaly_type": "stop", "n_frames": 5},
            {"video_path": _video(tmp_path, "b.actf", 7), "label": 1, "anomaly_type": "jitter", "n_frames": 7},
        ],
        "seed": 3,
        "generator_config": {"height": 4},
    }


def test_empty_manifest_is_valid():
    m = manifest_from_json({"domain_tag": "source", "entries": [], "seed": 0, "generator_config": {}})
    assert len(m) == 0


def test_normal_entry_with_label_one_rejected():
    m = DatasetManifest("target_normal", [ManifestEntry("x.actf", 1, "", 5)])
    with pytest.raises(ManifestError):
        validate_manifest(m, check_files=False)


def test_save_load_round_trip(tmp_path):
    m = manifest_from_json(_valid_doc(tmp_path), root=tmp_path)
    save_manifest(tmp_path / "m.json", m)
    back = load_manifest(tmp_path / "m.json")
    assert back.to_json() == m.to_json()
    assert all(back.resolve(e).is_file() for e in back.entries)


_CORRUPTIONS = [
    ("domain_tag", "weird"),
    ("domain_tag", 3),
    ("seed", "zero"),
    ("seed", True),
    ("generator_config", []),
    ("entries", {}),
    ("entries.0.video_path", "missing.actf"),
    ("entries.0.video_path", 7),
    ("entries.0.label", 0),
    ("entries.0.label", "1"),
    ("entries.0.anomaly_type", ""),
    ("entries.0.anomaly_type", None),
    ("entries.0.n_frames", 6),
    ("entries.0.n_frames", 0),
    ("entries.0.n_frames", 5.0),
]


@pytest.mark.parametrize("field,value", _CORRUPTIONS)
def test_single_field_corruption_rejected(tmp_path, field, value):
    doc = _valid_doc(tmp_path)
    manifest_from_json(json.loads(json.dumps(doc)), root=tmp_path)
    node, parts = doc, field.split(".")
    for p in parts[:-1]:
        node = node[int(p)] if p.isdigit() else node[p]
    node[parts[-1]] = value
    with pytest.raises(ManifestError):
        manifest_from_json(doc, root=tmp_path)


@pytest.mark.parametrize("field", ["domain_tag", "entries", "seed", "generator_config",
                                   "entries.0.video_path", "entries.0.label",
                                   "entries.0.anomaly_type", "entries.0.n_frames"])
def test_missing_field_rejected(tmp_path, field):
    doc = _valid_doc(tmp_path)
    node, parts = doc, field.split(".")
    for p in parts[:-1]:
        node = node[int(p)] if p.isdigit() else node[p]
    del node[parts[-1]]
    with pytest.raises(ManifestError):
        manifest_from_json(doc, root=tmp_path)


def test_wrong_rank_video_rejected(tmp_path):
    write_tensor(tmp_path / "flat.actf", np.zeros((5, 4), np.uint8))
    doc = _valid_doc(tmp_path)
    doc["entries"][0]["video_path"] = "flat.actf"
    with pytest.raises(ManifestError):
        manifest_from_json(doc, root=tmp_path)
