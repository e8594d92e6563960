"""Demonstration dataset container and its versioned binary file format.

Layout: magic ``IBDS`` | u32 version | u64 header length | UTF-8 JSON header
| per-trajectory float64 payloads (qs, qds, actions) in header order.  The
header carries the sample time, arm geometry, generator provenance, and
per-trajectory metadata, so files round-trip losslessly and bit-identically.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arm import ArmSpec, TrajMeta, Trajectory

MAGIC = b"IBDS"
VERSION = 1


class DatasetError(IOError):
    """Corrupt, truncated, or unsupported dataset file."""


@dataclass
class Dataset:
    arm: ArmSpec
    ts: float
    trajectories: list
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, traj in enumerate(self.trajectories):
            if abs(traj.ts - self.ts) > 1e-12:
                raise ValueError(f"trajectory {k} sample time {traj.ts} != dataset ts {self.ts}")
            if traj.d != self.arm.d:
                raise ValueError(f"trajectory {k} has {traj.d} joints, arm has {self.arm.d}")

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def d(self) -> int:
        return self.arm.d

    def subset(self, indices) -> "Dataset":
        return Dataset(
            arm=self.arm,
            ts=self.ts,
            trajectories=[self.trajectories[i] for i in indices],
            provenance=dict(self.provenance),
        )


def _serialize(dataset: Dataset) -> bytes:
    header = {
        "schema": VERSION,
        "ts": dataset.ts,
        "d": dataset.d,
        "link_lengths": [float(x) for x in dataset.arm.link_lengths],
        "provenance": dataset.provenance,
        "trajectories": [
            {
                "horizon": traj.horizon,
                "has_actions": traj.actions is not None,
                "n_features": int(traj.meta.features.size),
                "start_ee_pose": [float(x) for x in traj.meta.start_ee_pose],
                "goal_ee_pose": [float(x) for x in traj.meta.goal_ee_pose],
                "traj_id": traj.meta.traj_id,
                "source": traj.meta.source,
            }
            for traj in dataset.trajectories
        ],
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<IQ", VERSION, len(raw)), raw]
    for traj in dataset.trajectories:
        chunks.append(np.ascontiguousarray(traj.qs, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(traj.qds, dtype="<f8").tobytes())
        if traj.actions is not None:
            chunks.append(np.ascontiguousarray(traj.actions, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(traj.meta.features, dtype="<f8").tobytes())
    return b"".join(chunks)


def save_dataset(path, dataset: Dataset) -> None:
    Path(path).write_bytes(_serialize(dataset))


def dataset_digest(dataset: Dataset) -> str:
    """Stable content hash of the dataset (sha256 of its serialized form)."""
    return hashlib.sha256(_serialize(dataset)).hexdigest()


def load_dataset(path) -> Dataset:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise DatasetError(f"{path}: not a dataset file (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[4:16])
    if version != VERSION:
        raise DatasetError(f"{path}: unsupported dataset schema version {version}")
    if len(blob) < 16 + hlen:
        raise DatasetError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetError(f"{path}: corrupt header: {exc}") from exc

    d = header["d"]
    offset = 16 + hlen

    def take(count):
        nonlocal offset
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise DatasetError(f"{path}: truncated payload")
        out = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64)
        offset += nbytes
        return out

    trajectories = []
    for entry in header["trajectories"]:
        T = entry["horizon"]
        if T < 0:
            raise DatasetError(f"{path}: corrupt horizon {T}")
        qs = take((T + 1) * d).reshape(T + 1, d)
        qds = take((T + 1) * d).reshape(T + 1, d)
        actions = take(T * d).reshape(T, d) if entry["has_actions"] else None
        features = take(entry["n_features"])
        meta = TrajMeta(
            start_ee_pose=np.array(entry["start_ee_pose"]),
            goal_ee_pose=np.array(entry["goal_ee_pose"]),
            features=features,
            traj_id=entry["traj_id"],
            source=entry["source"],
        )
        trajectories.append(
            Trajectory(ts=header["ts"], qs=qs, qds=qds, actions=actions, meta=meta)
        )
    if offset != len(blob):
        raise DatasetError(f"{path}: {len(blob) - offset} trailing bytes")
    return Dataset(
        arm=ArmSpec(link_lengths=np.array(header["link_lengths"])),
        ts=header["ts"],
        trajectories=trajectories,
        provenance=header.get("provenance", {}),
    )


def to_text(dataset: Dataset, max_rows: int = 5) -> str:
    """Human-readable dump for debugging (head of each trajectory)."""
    lines = [
        f"dataset: {len(dataset)} trajectories, ts={dataset.ts}, d={dataset.d}, "
        f"links={list(dataset.arm.link_lengths)}",
        f"provenance: {json.dumps(dataset.provenance, sort_keys=True)}",
    ]
    for k, traj in enumerate(dataset.trajectories):
        m = traj.meta
        lines.append(
            f"[{k}] id={m.traj_id} source={m.source} T={traj.horizon} "
            f"start_ee={np.array2string(m.start_ee_pose, precision=4)} "
            f"goal_ee={np.array2string(m.goal_ee_pose, precision=4)}"
        )
        for t in range(min(max_rows, traj.horizon + 1)):
            row = f"    t={t} q={np.array2string(traj.qs[t], precision=5)} qd={np.array2string(traj.qds[t], precision=5)}"
            if traj.actions is not None and t < traj.horizon:
                row += f" a={np.array2string(traj.actions[t], precision=5)}"
            lines.append(row)
        if traj.horizon + 1 > max_rows:
            lines.append(f"    ... {traj.horizon + 1 - max_rows} more rows")
    return "\n".join(lines) + "\n"
