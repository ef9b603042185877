"""On-disk formats: MSED binary tensors and JSON dataset manifests.

An MSED file is: magic b"MSED", version byte (1), dtype byte (1=float32 LE,
2=float64 LE), ndim byte, `ndim` little-endian uint32 dims, then the
row-major payload.  Anything else is rejected.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MSED"
VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
DTYPE_BYTES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class MsedError(Exception):
    pass


class BadMagic(MsedError):
    pass


class DimMismatch(MsedError):
    pass


class ManifestError(Exception):
    pass


def write_tensor(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype not in DTYPE_BYTES:
        array = array.astype(np.float64)
    if array.ndim > 255:
        raise MsedError("too many dimensions")
    header = MAGIC + struct.pack("<BBB", VERSION, DTYPE_BYTES[array.dtype], array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(array).tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 7 or blob[:4] != MAGIC:
        raise BadMagic(f"{path}: not an MSED file")
    version, dtype_code, ndim = struct.unpack("<BBB", blob[4:7])
    if version != VERSION:
        raise MsedError(f"{path}: unsupported version {version}")
    if dtype_code not in DTYPE_CODES:
        raise MsedError(f"{path}: unknown dtype code {dtype_code}")
    offset = 7 + 4 * ndim
    if len(blob) < offset:
        raise DimMismatch(f"{path}: truncated header")
    shape = struct.unpack(f"<{ndim}I", blob[7:offset])
    dtype = DTYPE_CODES[dtype_code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = blob[offset:]
    if len(payload) != expected:
        raise DimMismatch(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def write_ids(path, ids: list) -> None:
    with open(path, "w") as fh:
        json.dump(list(ids), fh)


def read_ids(path) -> list:
    with open(path) as fh:
        ids = json.load(fh)
    if len(set(ids)) != len(ids):
        raise ManifestError(f"{path}: duplicate stimulus ids")
    return ids


def write_labels_csv(path, stimulus_ids, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    with open(path, "w") as fh:
        cols = ",".join(f"class_{c}" for c in range(labels.shape[1]))
        fh.write(f"stimulus_id,{cols}\n")
        for sid, row in zip(stimulus_ids, labels):
            fh.write(f"{sid}," + ",".join(str(int(v)) for v in row) + "\n")


def read_labels_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header[0] != "stimulus_id":
            raise ManifestError(f"{path}: bad labels header")
        ids, rows = [], []
        for line in fh:
            parts = line.strip().split(",")
            if not parts or parts == [""]:
                continue
            ids.append(parts[0])
            rows.append([int(v) for v in parts[1:]])
    return ids, np.array(rows, dtype=np.float64)


def load_manifest(path) -> dict:
    path = Path(path)
    with open(path) as fh:
        manifest = json.load(fh)
    for key in ("experiment", "mode", "subjects", "features"):
        if key not in manifest:
            raise ManifestError(f"manifest missing field {key!r}")
    if manifest["mode"] not in ("same-stimuli", "disjoint-stimuli"):
        raise ManifestError(f"unknown mode {manifest['mode']!r}")
    base = path.parent
    for sub in manifest["subjects"]:
        for k in ("responses", "stimulus_ids", "labels"):
            if not (base / sub[k]).exists():
                raise ManifestError(f"subject {sub['id']}: missing file {sub[k]}")
    for k in ("llv", "hlv", "stimulus_ids"):
        if not (base / manifest["features"][k]).exists():
            raise ManifestError(f"features: missing file {manifest['features'][k]}")
    return manifest
