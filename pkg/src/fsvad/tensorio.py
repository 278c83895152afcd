"""On-disk containers for tensors and dataset manifests.

TensorFile layout (little-endian throughout)::

    magic     4 bytes  b"ACTF"
    version   u8       1
    dtype     u8       0=uint8, 1=float32, 2=float64
    ndim      u8
    dims      ndim x u32
    payload   row-major raw values
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"ACTF"
VERSION = 1

_CODE_TO_DTYPE = {
    0: np.dtype("<u1"),
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
}
_KIND_TO_CODE = {("u", 1): 0, ("f", 4): 1, ("f", 8): 2}

DOMAIN_TAGS = ("source", "target_normal", "target_abnormal")


class TensorFileError(ValueError):
    """Base class for malformed tensor files."""


class BadMagicError(TensorFileError):
    pass


class VersionMismatchError(TensorFileError):
    pass


class TruncatedPayloadError(TensorFileError):
    pass


class UnsupportedDtypeError(TensorFileError):
    pass


class ManifestError(ValueError):
    """A manifest failed validation."""


def _dtype_code(dtype: np.dtype) -> int:
    try:
        return _KIND_TO_CODE[(dtype.kind, dtype.itemsize)]
    except KeyError:
        raise UnsupportedDtypeError(f"unsupported dtype {dtype}") from None


def encode_tensor(data) -> bytes:
    arr = np.asarray(data)
    code = _dtype_code(arr.dtype)
    if arr.ndim == 0 or arr.ndim > 255:
        raise ValueError(f"ndim must be in 1..255, got {arr.ndim}")
    if any(d <= 0 for d in arr.shape):
        raise ValueError(f"all dims must be > 0, got {arr.shape}")
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_CODE_TO_DTYPE[code]).tobytes()
    return header + payload


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    version, code, ndim = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise VersionMismatchError(f"version {version} != {VERSION}")
    if code not in _CODE_TO_DTYPE:
        raise UnsupportedDtypeError(f"unknown dtype code {code}")
    head = 7 + 4 * ndim
    if len(buf) < head:
        raise TruncatedPayloadError("header truncated")
    dims = struct.unpack_from(f"<{ndim}I", buf, 7)
    dtype = _CODE_TO_DTYPE[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - head < expected:
        raise TruncatedPayloadError(
            f"payload has {len(buf) - head} bytes, expected {expected}"
        )
    if len(buf) - head > expected:
        raise TensorFileError("trailing bytes after payload")
    arr = np.frombuffer(buf, dtype=dtype, count=expected // dtype.itemsize, offset=head)
    return arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True)


def write_tensor(path, data) -> None:
    """Write ``data`` to ``path`` in TensorFile format, replacing any existing file."""
    blob = encode_tensor(data)
    with open(path, "wb") as f:
        f.write(blob)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_tensor(f.read())


@dataclass
class ManifestEntry:
    video_path: str
    label: int
    anomaly_type: str
    n_frames: int


@dataclass
class DatasetManifest:
    domain_tag: str
    entries: list[ManifestEntry] = field(default_factory=list)
    seed: int = 0
    generator_config: dict[str, Any] = field(default_factory=dict)
    # directory that relative video paths resolve against
    root: Path | None = None

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.video_path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def to_json(self) -> dict:
        return {
            "domain_tag": self.domain_tag,
            "entries": [vars(e) for e in self.entries],
            "seed": self.seed,
            "generator_config": self.generator_config,
        }

    def __len__(self) -> int:
        return len(self.entries)


def save_manifest(path, manifest: DatasetManifest) -> None:
    with open(path, "w") as f:
        json.dump(manifest.to_json(), f, indent=2, sort_keys=True)


def _require(doc: dict, key: str, kind, where: str):
    if key not in doc:
        raise ManifestError(f"{where}: missing field {key!r}")
    val = doc[key]
    if kind is int and isinstance(val, bool) or not isinstance(val, kind):
        raise ManifestError(f"{where}: field {key!r} has wrong type {type(val).__name__}")
    return val


def _peek_dims(path: Path) -> tuple[int, ...]:
    with open(path, "rb") as f:
        head = f.read(7)
        if len(head) < 7 or head[:4] != MAGIC:
            raise BadMagicError(f"{path}: bad magic")
        ndim = head[6]
        raw = f.read(4 * ndim)
    if len(raw) < 4 * ndim:
        raise TruncatedPayloadError(f"{path}: header truncated")
    return struct.unpack(f"<{ndim}I", raw)


def validate_manifest(manifest: DatasetManifest, check_files: bool = True) -> None:
    if manifest.domain_tag not in DOMAIN_TAGS:
        raise ManifestError(f"unknown domain_tag {manifest.domain_tag!r}")
    for i, e in enumerate(manifest.entries):
        where = f"entry {i}"
        if manifest.domain_tag == "target_normal":
            if e.label != 0 or e.anomaly_type:
                raise ManifestError(f"{where}: target_normal entries need label 0 and empty anomaly_type")
        elif manifest.domain_tag == "target_abnormal":
            if e.label != 1 or not e.anomaly_type:
                raise ManifestError(f"{where}: target_abnormal entries need label 1 and an anomaly_type")
        elif e.label < 0:
            raise ManifestError(f"{where}: negative label")
        if e.n_frames <= 0:
            raise ManifestError(f"{where}: n_frames must be positive")
        if not check_files:
            continue
        p = manifest.resolve(e)
        if not p.is_file():
            raise ManifestError(f"{where}: dangling video_path {e.video_path!r}")
        try:
            dims = _peek_dims(p)
        except TensorFileError as exc:
            raise ManifestError(f"{where}: {exc}") from None
        if len(dims) != 4 or dims[0] != e.n_frames:
            raise ManifestError(f"{where}: tensor dims {dims} inconsistent with n_frames={e.n_frames}")


def manifest_from_json(doc: dict, root: Path | None = None, check_files: bool = True) -> DatasetManifest:
    if not isinstance(doc, dict):
        raise ManifestError("manifest must be a JSON object")
    tag = _require(doc, "domain_tag", str, "manifest")
    raw_entries = _require(doc, "entries", list, "manifest")
    seed = _require(doc, "seed", int, "manifest")
    gen_cfg = _require(doc, "generator_config", dict, "manifest")
    entries = []
    for i, raw in enumerate(raw_entries):
        if not isinstance(raw, dict):
            raise ManifestError(f"entry {i}: not an object")
        where = f"entry {i}"
        entries.append(ManifestEntry(
            video_path=_require(raw, "video_path", str, where),
            label=_require(raw, "label", int, where),
            anomaly_type=_require(raw, "anomaly_type", str, where),
            n_frames=_require(raw, "n_frames", int, where),
        ))
    m = DatasetManifest(tag, entries, seed, gen_cfg, root)
    validate_manifest(m, check_files=check_files)
    return m


def load_manifest(path) -> DatasetManifest:
    """Load and eagerly validate a manifest; video paths resolve relative to its directory."""
    path = Path(path)
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from None
    return manifest_from_json(doc, root=path.parent.resolve())


def file_checksum(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_checksum(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(str(p) for p in paths):
        h.update(os.path.basename(p).encode())
        h.update(file_checksum(p).encode())
    return h.hexdigest()
