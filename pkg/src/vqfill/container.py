"""On-disk container shared by datasets, checkpoints, masks and reports.

A container is a directory holding two files:

``meta.json``
    UTF-8 JSON (sorted keys, 2-space indent) with the format name, version,
    ``kind`` tag, free-form ``attrs`` and a table describing every array:
    name, dtype (numpy little-endian code such as ``<f4``), shape, byte offset
    and byte length, plus the payload's SHA-256.

``arrays.bin``
    16-byte header (8 magic bytes ``b"VQFILL\\x00\\x1a"``, little-endian uint32
    format version, 4 zero bytes) followed by the raw C-order array bytes
    at the offsets listed in ``meta.json``, each padded to 8-byte alignment.

The checksum covers the whole ``arrays.bin`` file, header included.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from vqfill.errors import ChecksumError, DataFormatError, MagicError, TruncatedError, VersionError

FORMAT_NAME = "vqfill-container"
FORMAT_VERSION = 1
MAGIC = b"VQFILL\x00\x1a"
HEADER_SIZE = 16
META_FILE = "meta.json"
PAYLOAD_FILE = "arrays.bin"

_ALLOWED_DTYPES = {"<f4", "<f8", "<i4", "<i8", "|i1", "|u1"}


def _align(n: int) -> int:
    return (n + 7) // 8 * 8


def dumps_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write(path: str | Path, kind: str, arrays: Mapping[str, np.ndarray], attrs: Mapping[str, Any] | None = None) -> Path:
    """Write ``arrays`` and ``attrs`` to a container directory at ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table = []
    offset = HEADER_SIZE
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|", "<") else arr.dtype
        arr = arr.astype(dt, copy=False)
        if dt.str not in _ALLOWED_DTYPES:
            raise DataFormatError(f"array {name!r}: unsupported dtype {arr.dtype}")
        raw = arr.tobytes(order="C")
        table.append({"name": name, "dtype": dt.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        pad = _align(len(raw)) - len(raw)
        blobs.append(raw + b"\x00" * pad)
        offset += len(raw) + pad

    payload_path = path / PAYLOAD_FILE
    with open(payload_path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", FORMAT_VERSION, 0))
        for blob in blobs:
            fh.write(blob)
    meta = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "kind": kind,
        "attrs": dict(attrs or {}),
        "arrays": table,
        "payload": {"file": PAYLOAD_FILE, "nbytes": offset, "sha256": sha256_file(payload_path)},
    }
    (path / META_FILE).write_text(dumps_json(meta), encoding="utf-8")
    return path


class Container:
    """Read-side handle; metadata is parsed eagerly, arrays on first access."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        meta_path = self.path / META_FILE
        if not meta_path.is_file():
            raise DataFormatError(f"{self.path}: not a container (missing {META_FILE})")
        try:
            self.meta = json.loads(meta_path.read_text(encoding="utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataFormatError(f"{meta_path}: unreadable metadata ({exc})") from exc
        if self.meta.get("format") != FORMAT_NAME:
            raise DataFormatError(f"{meta_path}: unknown format {self.meta.get('format')!r}")
        if self.meta.get("version") != FORMAT_VERSION:
            raise VersionError(f"{meta_path}: format version {self.meta.get('version')}, expected {FORMAT_VERSION}")
        self._table = {entry["name"]: entry for entry in self.meta["arrays"]}
        self._verified = False

    @property
    def kind(self) -> str:
        return self.meta["kind"]

    @property
    def attrs(self) -> dict:
        return self.meta["attrs"]

    def names(self) -> list[str]:
        return list(self._table)

    def _verify(self) -> None:
        if self._verified:
            return
        payload = self.path / self.meta["payload"]["file"]
        if not payload.is_file():
            raise TruncatedError(f"{payload}: payload file missing")
        with open(payload, "rb") as fh:
            header = fh.read(HEADER_SIZE)
        if len(header) < HEADER_SIZE or header[:8] != MAGIC:
            raise MagicError(f"{payload}: bad magic bytes")
        (version, _) = struct.unpack("<II", header[8:])
        if version != FORMAT_VERSION:
            raise VersionError(f"{payload}: payload version {version}, expected {FORMAT_VERSION}")
        size = payload.stat().st_size
        if size < self.meta["payload"]["nbytes"]:
            raise TruncatedError(f"{payload}: {size} bytes on disk, {self.meta['payload']['nbytes']} declared")
        if sha256_file(payload) != self.meta["payload"]["sha256"]:
            raise ChecksumError(f"{payload}: checksum mismatch")
        self._verified = True

    def array(self, name: str) -> np.ndarray:
        if name not in self._table:
            raise DataFormatError(f"{self.path}: no array named {name!r}")
        self._verify()
        entry = self._table[name]
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        with open(self.path / self.meta["payload"]["file"], "rb") as fh:
            fh.seek(entry["offset"])
            raw = fh.read(entry["nbytes"])
        if len(raw) != entry["nbytes"]:
            raise TruncatedError(f"{self.path}: array {name!r} truncated")
        return np.frombuffer(raw, dtype=dt, count=count).reshape(entry["shape"]).copy()

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: self.array(name) for name in self._table}


def read(path: str | Path) -> Container:
    return Container(path)
