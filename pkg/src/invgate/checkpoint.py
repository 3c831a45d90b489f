"""Versioned binary checkpoint container.

Layout: magic, u32 version, u64 header length, canonical-JSON header, then
raw little-endian float64 array data in the header's order. Arrays are
listed sorted by name, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import CheckpointError

MAGIC = b"IGCK"
FORMAT_NAME = "invgate-checkpoint"
FORMAT_VERSION = 1


def write_checkpoint(
    path: str,
    config: dict,
    epoch: int,
    optimizer: dict,
    arrays: dict[str, np.ndarray],
) -> None:
    names = sorted(arrays)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": config,
        "epoch": int(epoch),
        "optimizer": optimizer,
        "arrays": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(FORMAT_VERSION).tobytes())
        fh.write(np.uint64(len(blob)).tobytes())
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def read_checkpoint(path: str) -> tuple[dict, int, dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a {FORMAT_NAME} file")
        version_raw = fh.read(4)
        if len(version_raw) < 4:
            raise CheckpointError(f"{path}: truncated before version")
        version = int(np.frombuffer(version_raw, dtype="<u4")[0])
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        len_raw = fh.read(8)
        if len(len_raw) < 8:
            raise CheckpointError(f"{path}: truncated before header")
        header_len = int(np.frombuffer(len_raw, dtype="<u8")[0])
        blob = fh.read(header_len)
        if len(blob) < header_len:
            raise CheckpointError(f"{path}: truncated inside header")
        header = json.loads(blob.decode())
        if header.get("format") != FORMAT_NAME:
            raise CheckpointError(f"{path}: bad header format tag")
        arrays: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) < count * 8:
                raise CheckpointError(
                    f"{path}: truncated while reading array '{entry['name']}'"
                )
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        return header["config"], header["epoch"], header["optimizer"], arrays
