"""Binary checkpoints: named tensor table plus occupancy and config.

Layout (all integers little-endian):

    bytes 0..3    magic "RADF"
    bytes 4..7    format version, uint32
    bytes 8..15   header length, uint64
    header        canonical JSON (sorted keys, no whitespace) holding the
                  config snapshot, stage flags, the tensor table (name,
                  shape, in name order), and occupancy geometry
    payload       each tensor's float32 little-endian bytes, in table
                  order, then occupancy values (float32) and bitfield
                  (uint8 0/1)

Canonical ordering makes a save -> load -> save round trip byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .occupancy import OccupancyGrid

MAGIC = b"RADF"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict
    stages: dict = field(default_factory=dict)
    occupancy: OccupancyGrid | None = None


def save_checkpoint(path: str, tensors: dict[str, np.ndarray], config: dict,
                    stages: dict, occupancy: OccupancyGrid | None) -> None:
    names = sorted(tensors)
    table = [{"name": n, "shape": list(tensors[n].shape)} for n in names]
    header = {
        "config": config,
        "stages": stages,
        "tensors": table,
        "occupancy": None if occupancy is None else {
            "resolution": occupancy.resolution, "tau": occupancy.tau},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(tensors[n], dtype="<f4").tobytes())
        if occupancy is not None:
            f.write(np.ascontiguousarray(occupancy.values, dtype="<f4").tobytes())
            f.write(occupancy.bitfield.astype(np.uint8).tobytes())


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"not a checkpoint: magic {raw[:4]!r}")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    hlen = struct.unpack("<Q", raw[8:16])[0]
    header = json.loads(raw[16:16 + hlen].decode())
    off = 16 + hlen

    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
        tensors[entry["name"]] = arr.reshape(shape).copy()
        off += count * 4

    occ = None
    if header["occupancy"] is not None:
        r = header["occupancy"]["resolution"]
        occ = OccupancyGrid(resolution=r, tau=header["occupancy"]["tau"])
        n = r ** 3
        occ.values = np.frombuffer(raw, dtype="<f4", count=n,
                                   offset=off).reshape((r,) * 3).copy()
        off += n * 4
        occ.bitfield = np.frombuffer(raw, dtype=np.uint8, count=n,
                                     offset=off).reshape((r,) * 3).astype(bool)
        off += n
    if off != len(raw):
        raise ValueError(f"trailing bytes: file {len(raw)}, parsed {off}")
    return Checkpoint(tensors=tensors, config=header["config"],
                      stages=header["stages"], occupancy=occ)
