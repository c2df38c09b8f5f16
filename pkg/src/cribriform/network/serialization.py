"""Weight container: magic, little-endian header length, JSON header, raw tensor payloads."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..core import CribriformError
from .model import Network, NetworkConfig

MAGIC = b"CRBW"
FORMAT_VERSION = 1


class CorruptContainer(CribriformError):
    pass


class ArchitectureMismatch(CribriformError):
    pass


def save_weights(net: Network, meta: dict | None = None) -> bytes:
    tensors = net.state()
    directory = []
    payload = bytearray()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if not np.isfinite(arr).all():
            raise ValueError(f"tensor {name} is not finite")
        dtype = arr.dtype.newbyteorder("<")
        raw = arr.astype(dtype, copy=False).tobytes()
        directory.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape),
                          "offset": len(payload), "nbytes": len(raw)})
        payload += raw
    header = {
        "format_version": FORMAT_VERSION,
        "architecture_hash": net.architecture_hash(),
        "config": net.config.to_json(),
        "tensors": directory,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<Q", len(blob)) + blob + bytes(payload)


def read_container(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < 12 or data[:4] != MAGIC:
        raise CorruptContainer("not a weight container")
    (hlen,) = struct.unpack("<Q", data[4:12])
    if 12 + hlen > len(data):
        raise CorruptContainer("truncated header")
    try:
        header = json.loads(data[12 : 12 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CorruptContainer(f"unreadable header: {err}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CorruptContainer(f"unsupported format version {header.get('format_version')}")
    body = memoryview(data)[12 + hlen :]
    tensors = {}
    for entry in header["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(body):
            raise CorruptContainer(f"truncated payload for {entry['name']}")
        arr = np.frombuffer(body[start : start + n], dtype=np.dtype(entry["dtype"]))
        expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if arr.size != expected:
            raise CorruptContainer(f"size mismatch for {entry['name']}")
        arr = arr.reshape(entry["shape"]).copy()
        if not np.isfinite(arr).all():
            raise CorruptContainer(f"non-finite values in {entry['name']}")
        tensors[entry["name"]] = arr
    return header, tensors


def load_weights(data: bytes, into: Network | None = None) -> Network:
    """Rebuild a network from a container, or fill ``into`` after an architecture check."""
    header, tensors = read_container(data)
    if into is None:
        into = Network(NetworkConfig.from_json(header["config"]))
    if header["architecture_hash"] != into.architecture_hash():
        raise ArchitectureMismatch("container was written by a different architecture")
    into.set_state(tensors)
    return into


def container_meta(data: bytes) -> dict:
    return read_container(data)[0].get("meta", {})


def write_weights(net: Network, path: str | Path, meta: dict | None = None) -> None:
    Path(path).write_bytes(save_weights(net, meta))


def read_weights(path: str | Path, into: Network | None = None) -> Network:
    return load_weights(Path(path).read_bytes(), into)
