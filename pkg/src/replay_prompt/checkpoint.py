"""Binary checkpoint container.

Layout::

    b"REPCKPT\\0"          8-byte magic
    uint32 little-endian    header length in bytes
    header                  UTF-8 JSON, keys sorted
    blobs                   raw little-endian C-order arrays, back to back

The header holds ``format_version``, a free-form ``config`` tree, ``meta``, and
a tensor table of ``{namespace, name, dtype, shape, offset, nbytes}`` entries
(offsets relative to the start of the blob section).  Identical inputs give
byte-identical files.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"REPCKPT\0"
FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    namespaces: dict
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode(ckpt: Checkpoint) -> bytes:
    table, blobs, offset = [], [], 0
    for ns in sorted(ckpt.namespaces):
        for name in sorted(ckpt.namespaces[ns]):
            arr = np.asarray(ckpt.namespaces[ns][name])
            key = arr.dtype.name
            if key not in _DTYPES:
                raise CheckpointError(f"unsupported dtype {key} for {ns}/{name}")
            raw = np.ascontiguousarray(arr, dtype=np.dtype(_DTYPES[key])).tobytes()
            table.append({"namespace": ns, "name": name, "dtype": key,
                          "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
    header = {"format_version": ckpt.format_version, "config": ckpt.config,
              "meta": ckpt.meta, "tensors": table}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(blobs)


def decode(data: bytes) -> Checkpoint:
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        (hlen,) = struct.unpack_from("<I", data, len(MAGIC))
        start = len(MAGIC) + 4
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version!r}")
    base = start + hlen
    namespaces: dict = {}
    for entry in header["tensors"]:
        lo = base + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(data):
            raise CheckpointError(f"truncated blob for {entry['namespace']}/{entry['name']}")
        arr = np.frombuffer(data[lo:hi], dtype=np.dtype(_DTYPES[entry["dtype"]]))
        arr = arr.astype(entry["dtype"]).reshape(entry["shape"])
        namespaces.setdefault(entry["namespace"], {})[entry["name"]] = arr
    return Checkpoint(namespaces, header.get("config", {}), header.get("meta", {}), version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write_bytes(path, encode(ckpt))


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(data)
