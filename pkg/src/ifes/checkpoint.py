"""Checkpoint files.

Layout (all integers little-endian)::

    b"IFES"                 magic
    u32 version             currently 1
    u32 n, n bytes          network config as UTF-8 JSON (sorted keys)
    per layer, in Network.layers() order:
        f64[out*in*9]       weights, row-major (out, in, 3, 3)
        f64[out]            bias
    u32 crc32               of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import DataError, IntegrityError
from .network import NetConfig, build_network

MAGIC = b"IFES"
VERSION = 1


def encode_checkpoint(network):
    cfg = json.dumps(network.config.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg)), cfg]
    for layer in network.layers():
        parts.append(layer.weights.astype("<f8").tobytes())
        parts.append(layer.bias.astype("<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(data):
    if len(data) < 16 or data[:4] != MAGIC:
        raise IntegrityError("not a checkpoint: bad magic")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise IntegrityError("checkpoint CRC mismatch")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<I", body, 8)
    try:
        cfg = NetConfig.from_dict(json.loads(body[12 : 12 + n].decode("utf-8")))
    except (ValueError, TypeError) as e:
        raise IntegrityError(f"bad checkpoint config: {e}") from e
    network = build_network(cfg)
    pos = 12 + n
    for layer in network.layers():
        for arr in (layer.weights, layer.bias):
            size = arr.size * 8
            if pos + size > len(body):
                raise IntegrityError(f"checkpoint truncated in layer {layer.name}")
            arr[...] = np.frombuffer(body, dtype="<f8", count=arr.size, offset=pos).reshape(arr.shape)
            pos += size
    if pos != len(body):
        raise IntegrityError(f"checkpoint has {len(body) - pos} trailing bytes")
    return network


def save_checkpoint(network, path):
    path = Path(path)
    try:
        path.write_bytes(encode_checkpoint(network))
    except OSError as e:
        raise DataError(f"cannot write {path}: {e.strerror}") from e


def load_checkpoint(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror}") from e
    return decode_checkpoint(data)
