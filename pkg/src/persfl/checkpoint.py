"""Binary checkpoint format for model parameters.

Layout (little-endian)::

    b"PFLC"            magic
    u32                format version
    u32                layer count
    per layer:
      u32 rows, u32 cols, f64[rows*cols] weight (row-major)
      u32 n, f64[n] bias
    32 bytes           SHA-256 of every preceding byte
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import IntegrityError
from .nn import ModelParams

MAGIC = b"PFLC"
VERSION = 1
HASH_LEN = 32
MANIFEST_NAME = "manifest.json"


class BadMagicError(IntegrityError):
    pass


class VersionMismatchError(IntegrityError):
    pass


class HashMismatchError(IntegrityError):
    pass


class TruncatedError(IntegrityError):
    pass


def encode(params):
    parts = [MAGIC, struct.pack("<II", VERSION, params.num_layers)]
    for w, b in zip(params.weights, params.biases):
        rows, cols = w.shape
        parts.append(struct.pack("<II", rows, cols))
        parts.append(w.astype("<f8").tobytes())
        parts.append(struct.pack("<I", b.shape[0]))
        parts.append(b.astype("<f8").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode(blob, name="<bytes>"):
    if len(blob) < 12:
        raise TruncatedError(f"{name}: {len(blob)} bytes is too short for a checkpoint header")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"{name}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, layers = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise VersionMismatchError(f"{name}: format version {version}, this build reads {VERSION}")
    pos = 12
    weights, biases = [], []

    def need(nbytes, what):
        if pos + nbytes > len(blob) - HASH_LEN:
            raise TruncatedError(f"{name}: truncated while reading {what} at offset {pos}")

    for i in range(layers):
        need(8, f"layer {i} shape")
        rows, cols = struct.unpack_from("<II", blob, pos)
        pos += 8
        need(8 * rows * cols, f"layer {i} weights")
        weights.append(np.frombuffer(blob, "<f8", rows * cols, pos).reshape(rows, cols)
                       .astype(np.float64))
        pos += 8 * rows * cols
        need(4, f"layer {i} bias length")
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        need(8 * n, f"layer {i} bias")
        biases.append(np.frombuffer(blob, "<f8", n, pos).astype(np.float64))
        pos += 8 * n
    if len(blob) != pos + HASH_LEN:
        raise TruncatedError(f"{name}: expected {pos + HASH_LEN} bytes, file has {len(blob)}")
    if hashlib.sha256(blob[:pos]).digest() != blob[pos:]:
        raise HashMismatchError(f"{name}: content hash mismatch, file is corrupt")
    return ModelParams(tuple(weights), tuple(biases))


def save(path, params):
    path = Path(path)
    blob = encode(params)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()


def load(path):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError as exc:
        raise IntegrityError(f"checkpoint {path} is missing") from exc
    return decode(blob, name=str(path))


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_snapshots(directory, snapshots):
    """One checkpoint per round plus ``manifest.json`` (round -> file, hash)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for snap in snapshots:
        fname = f"round_{snap.round:04d}.pflc"
        digest = save(directory / fname, snap.params)
        entries.append({"round": snap.round, "file": fname, "sha256": digest})
    manifest = {"format": "persfl-snapshots", "version": 1, "snapshots": entries}
    with open(directory / MANIFEST_NAME, "w", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_snapshots(directory):
    """Read every snapshot listed in the manifest, verifying file hashes."""
    from .fedsim import TeacherSnapshot

    directory = Path(directory)
    try:
        with open(directory / MANIFEST_NAME) as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise IntegrityError(f"snapshot manifest {directory / MANIFEST_NAME} is missing") from exc
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"snapshot manifest {directory / MANIFEST_NAME} is corrupt: {exc}")
    snapshots = []
    for entry in manifest["snapshots"]:
        path = directory / entry["file"]
        if not path.exists():
            raise IntegrityError(f"checkpoint {path} listed in the manifest is missing")
        if file_sha256(path) != entry["sha256"]:
            raise HashMismatchError(f"checkpoint {path} does not match its manifest hash")
        snapshots.append(TeacherSnapshot(int(entry["round"]), load(path)))
    return snapshots
