"""Binary epoch-record files used for every pipeline cache.

Layout::

    b"DSFEAT01"                  magic
    uint32 little-endian         length of the JSON header in bytes
    JSON header (utf-8)          dim, dtype, n, plus free-form metadata
    n fixed-width records        subject (16 B), recording (16 B), int32 epoch
                                 index, uint8 stage, 3 pad bytes, values[dim]
    32 bytes                     SHA-256 of everything above

Any mismatch on read raises :class:`CacheCorrupt`.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CacheCorrupt, LengthMismatch

MAGIC = b"DSFEAT01"
ID_BYTES = 16
_DIGEST = 32


@dataclass(frozen=True)
class EpochTable:
    """Identity and expert stage of every scored epoch, in pipeline order."""

    subjects: np.ndarray
    recordings: np.ndarray
    epoch_index: np.ndarray
    stages: np.ndarray

    def __post_init__(self):
        n = len(self.subjects)
        if not (len(self.recordings) == len(self.epoch_index) == len(self.stages) == n):
            raise LengthMismatch("epoch table columns differ in length")

    def __len__(self) -> int:
        return len(self.subjects)

    @classmethod
    def from_rows(cls, rows) -> "EpochTable":
        rows = list(rows)
        return cls(
            np.array([r[0] for r in rows], dtype=str).reshape(-1),
            np.array([r[1] for r in rows], dtype=str).reshape(-1),
            np.array([r[2] for r in rows], dtype=np.int32).reshape(-1),
            np.array([r[3] for r in rows], dtype=np.uint8).reshape(-1),
        )

    def ids(self) -> list[tuple[str, str, int]]:
        return list(zip(self.subjects.tolist(), self.recordings.tolist(), self.epoch_index.tolist()))

    def take(self, index) -> "EpochTable":
        return EpochTable(self.subjects[index], self.recordings[index], self.epoch_index[index], self.stages[index])


def record_dtype(dim: int, dtype: str = "<f4") -> np.dtype:
    return np.dtype(
        [
            ("subject", f"S{ID_BYTES}"),
            ("recording", f"S{ID_BYTES}"),
            ("epoch_index", "<i4"),
            ("stage", "u1"),
            ("pad", "V3"),
            ("values", dtype, (dim,)),
        ]
    )


def _encode_ids(values: np.ndarray, what: str) -> np.ndarray:
    out = np.char.encode(np.asarray(values, dtype=str), "ascii")
    if len(out) and max(len(v) for v in out) > ID_BYTES:
        raise ValueError(f"{what} ids longer than {ID_BYTES} bytes")
    return out


def encode_records(table: EpochTable, values: np.ndarray | None, meta: dict | None = None, dtype: str = "<f4") -> bytes:
    n = len(table)
    values = np.zeros((n, 0)) if values is None else np.asarray(values)
    if values.ndim != 2 or len(values) != n:
        raise LengthMismatch(f"values shape {values.shape} does not match {n} epochs")
    dim = values.shape[1]
    header = dict(meta or {})
    header.update(dim=dim, dtype=dtype, n=n)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    rec = np.zeros(n, dtype=record_dtype(dim, dtype))
    rec["subject"] = _encode_ids(table.subjects, "subject")
    rec["recording"] = _encode_ids(table.recordings, "recording")
    rec["epoch_index"] = table.epoch_index
    rec["stage"] = table.stages
    rec["values"] = values
    body = MAGIC + struct.pack("<I", len(hbytes)) + hbytes + rec.tobytes()
    return body + hashlib.sha256(body).digest()


def decode_records(raw: bytes) -> tuple[dict, EpochTable, np.ndarray]:
    if len(raw) < len(MAGIC) + 4 + _DIGEST or raw[: len(MAGIC)] != MAGIC:
        raise CacheCorrupt("not an epoch-record file (bad magic or too short)")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CacheCorrupt("checksum mismatch")
    (hlen,) = struct.unpack_from("<I", body, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        header = json.loads(body[start : start + hlen].decode("utf-8"))
        dt = record_dtype(int(header["dim"]), header["dtype"])
        n = int(header["n"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CacheCorrupt(f"unreadable header: {exc}") from None
    payload = body[start + hlen :]
    if len(payload) != n * dt.itemsize:
        raise CacheCorrupt(f"expected {n} records of {dt.itemsize} bytes, found {len(payload)} bytes")
    rec = np.frombuffer(payload, dtype=dt)
    table = EpochTable(
        np.char.decode(rec["subject"], "ascii"),
        np.char.decode(rec["recording"], "ascii"),
        rec["epoch_index"].astype(np.int32),
        rec["stage"].astype(np.uint8),
    )
    return header, table, np.array(rec["values"])


def write_records(path, table: EpochTable, values=None, meta=None, dtype: str = "<f4") -> Path:
    """Atomically write a record file (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_records(table, values, meta, dtype))
    os.replace(tmp, path)
    return path


def read_records(path) -> tuple[dict, EpochTable, np.ndarray]:
    return decode_records(Path(path).read_bytes())


def to_csv(table: EpochTable, values: np.ndarray | None = None, columns=None) -> str:
    """Plain CSV rendering with one row per epoch."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    values = None if values is None else np.asarray(values)
    if values is not None and columns is None:
        columns = [f"v{i}" for i in range(values.shape[1])]
    w.writerow(["subject", "recording", "epoch_index", "stage"] + list(columns or []))
    for i in range(len(table)):
        row = [table.subjects[i], table.recordings[i], int(table.epoch_index[i]), int(table.stages[i])]
        if values is not None:
            row += [repr(float(v)) for v in values[i]]
        w.writerow(row)
    return buf.getvalue()
