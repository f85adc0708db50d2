"""Binary checkpoint container.

Layout (little-endian):

    magic   8 bytes  b"MP4SRCK1"
    u32     version (1)
    u32     header length in bytes
    header  UTF-8 JSON: {"config": {...}, "epoch": int,
            "best_metric": float|null, "rng": {stream: state, ...},
            "extra": {...}, "tensors": [{"name": str, "shape": [int,...]}]}
    payload float32 tensor data, concatenated in manifest order

Tensors are stored as float32 regardless of the kernel's precision mode, so
a save/load round trip in training mode is bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

MAGIC = b"MP4SRCK1"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict
    epoch: int
    best_metric: float | None
    rng: dict[str, dict]
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    manifest = []
    payloads = []
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape)})
        payloads.append(arr.tobytes())
    header = json.dumps(
        {
            "config": ckpt.config,
            "epoch": ckpt.epoch,
            "best_metric": ckpt.best_metric,
            "rng": ckpt.rng,
            "extra": ckpt.extra,
            "tensors": manifest,
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for blob in payloads:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (magic {blob[:8]!r})")
    version, header_len = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise DataError(f"{path}: unknown checkpoint version {version}")
    pos = 16
    try:
        header = json.loads(blob[pos:pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt checkpoint header: {exc}") from None
    pos += header_len
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        need = 4 * n
        if pos + need > len(blob):
            raise DataError(f"{path}: truncated tensor {entry['name']!r}")
        tensors[entry["name"]] = (
            np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(entry["shape"]).copy()
        )
        pos += need
    if pos != len(blob):
        raise DataError(f"{path}: {len(blob) - pos} trailing bytes")
    return Checkpoint(
        tensors=tensors,
        config=header["config"],
        epoch=header["epoch"],
        best_metric=header["best_metric"],
        rng=header["rng"],
        extra=header.get("extra", {}),
    )
