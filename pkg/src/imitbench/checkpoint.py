"""Versioned binary container for named networks plus a JSON manifest.

Layout: magic ``IBCK`` | u32 version | u64 header length | UTF-8 JSON header
| concatenated little-endian float64 payloads.  The header records, per
network and in payload order, the layer shapes and activation tag, so a file
is self-describing.  Round-trips are bit-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .nn import Mlp

MAGIC = b"IBCK"
VERSION = 1


class CheckpointError(IOError):
    """Corrupt, truncated, or unsupported checkpoint file."""


def save_checkpoint(path, nets: dict, manifest: dict | None = None) -> None:
    """Write named Mlps and an optional JSON-serializable manifest."""
    header = {
        "nets": [
            {
                "name": name,
                "activation": net.activation,
                "shapes": [list(w.shape) for w in net.weights],
            }
            for name, net in nets.items()
        ],
        "manifest": manifest or {},
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<IQ", VERSION, len(raw)), raw]
    for net in nets.values():
        for w, b in zip(net.weights, net.biases):
            chunks.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
            chunks.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path):
    """Read a checkpoint; returns (nets dict, manifest dict)."""
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[4:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(blob) < 16 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc

    offset = 16 + hlen
    nets = {}
    for entry in header["nets"]:
        weights, biases = [], []
        for out_dim, in_dim in entry["shapes"]:
            wn = out_dim * in_dim * 8
            bn = out_dim * 8
            if offset + wn + bn > len(blob):
                raise CheckpointError(f"{path}: truncated payload for net {entry['name']!r}")
            weights.append(
                np.frombuffer(blob, dtype="<f8", count=out_dim * in_dim, offset=offset)
                .reshape(out_dim, in_dim)
                .astype(np.float64)
            )
            offset += wn
            biases.append(
                np.frombuffer(blob, dtype="<f8", count=out_dim, offset=offset).astype(np.float64)
            )
            offset += bn
        nets[entry["name"]] = Mlp(weights=weights, biases=biases, activation=entry["activation"])
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return nets, header["manifest"]
