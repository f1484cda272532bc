"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"FAUG" | u32 format version | u32 header length | UTF-8 JSON header | payload

The header lists parameters in declaration order with their shapes; the
payload is their float32 values concatenated in that order. A CRC32 of the
payload is stored in the header.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointIOError, CorruptCheckpoint, VersionMismatch
from .models import Model, ModelConfig

MAGIC = b"FAUG"
FORMAT_VERSION = 1


def encode(model: Model) -> bytes:
    names = list(model.params)
    payload = b"".join(np.ascontiguousarray(model.params[n], dtype="<f4").tobytes() for n in names)
    header = {
        "architecture": model.config.architecture,
        "config": model.config.to_dict(),
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
        "metadata": model.metadata,
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(hbytes)) + hbytes + payload


def decode(blob: bytes) -> Model:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CorruptCheckpoint("missing FAUG magic")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format {version}, expected {FORMAT_VERSION}")
    if len(blob) < 12 + hlen:
        raise CorruptCheckpoint("truncated header")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpoint(f"unreadable header: {e}") from None
    payload = blob[12 + hlen :]
    if len(payload) != header.get("payload_bytes"):
        raise CorruptCheckpoint(f"payload is {len(payload)} bytes, header says {header.get('payload_bytes')}")
    if zlib.crc32(payload) != header.get("payload_crc32"):
        raise CorruptCheckpoint("payload checksum mismatch")
    params, offset = {}, 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        params[entry["name"]] = arr.astype(np.float32).reshape(shape)
        offset += 4 * count
    if offset != len(payload):
        raise CorruptCheckpoint("parameter shapes do not cover the payload")
    return Model(ModelConfig.from_dict(header["config"]), params, header.get("metadata", {}))


def save_checkpoint(model: Model, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode(model))
    except OSError as e:
        raise CheckpointIOError(f"cannot write {path}: {e}") from None
    return path


def load_checkpoint(path) -> Model:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointIOError(f"cannot read {path}: {e}") from None
    return decode(blob)
