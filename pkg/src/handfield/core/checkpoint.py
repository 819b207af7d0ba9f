"""Binary checkpoint format.

Layout (little-endian): magic ``HFLD``, u32 format version, u32 record count,
then per record: u32 name length, UTF-8 name, u32 rank, rank x u64 dims, raw
float32 data.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .optim import AdamState, ParamStore

MAGIC = b"HFLD"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_records(path, records: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(records)))
        for name, arr in records.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f4")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_records(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            size = int(np.prod(dims)) if rank else 1
            if off + 4 * size > len(buf):
                raise struct.error("record data past end of file")
            out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims).copy()
            off += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return out


def save_store(store: ParamStore, path, with_optimizer: bool = True) -> None:
    records = {}
    for name, p in store.items():
        records[name] = p.value.data
    if with_optimizer:
        for name, p in store.items():
            if p.trainable:
                records[f"adam.m/{name}"] = p.adam.m
                records[f"adam.v/{name}"] = p.adam.v
                records[f"adam.step/{name}"] = np.asarray(p.adam.step, dtype=np.float32)
    write_records(path, records)


def load_into(store: ParamStore, path, strict: bool = True) -> None:
    """Overwrite values (and Adam state when present) of ``store`` from ``path``."""
    records = read_records(path)
    for name, p in store.items():
        if name not in records:
            if strict:
                raise CheckpointError(f"checkpoint lacks parameter {name!r}")
            continue
        arr = records[name]
        if arr.shape != p.value.shape:
            raise CheckpointError(f"shape mismatch for {name!r}: {arr.shape} vs {p.value.shape}")
        p.value.data = arr.astype(store.dtype)
        if f"adam.m/{name}" in records:
            p.adam = AdamState(
                records[f"adam.m/{name}"].astype(store.dtype),
                records[f"adam.v/{name}"].astype(store.dtype),
                int(records[f"adam.step/{name}"]),
            )
