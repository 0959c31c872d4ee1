"""Dataset files, feature export and metrics artifacts.

Dataset layout (all little-endian)::

    offset  size  field
    0       4     magic "RFFD"
    4       4     u32 version (1)
    8       2     u16 M (emitter count)
    10      2     u16 K (receiver count)
    12      4     u32 L (frame length)
    16      8     u64 record count
    24      ...   records: u16 emitter, u16 receiver, 2L float32 I0,Q0,I1,Q1,...

so a file holds exactly ``24 + count * (4 + 8 L)`` bytes. M and K are
stored at the same width as the per-record labels.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import FormatError, InvalidInputError
from ..synth import SampleSet

MAGIC = b"RFFD"
VERSION = 1
HEADER = struct.Struct("<4sIHHIQ")
HEADER_SIZE = HEADER.size  # 24


@dataclass(frozen=True)
class DatasetHeader:
    M: int
    K: int
    L: int
    count: int

    @property
    def record_size(self):
        return 4 + 8 * self.L

    @property
    def file_size(self):
        return HEADER_SIZE + self.count * self.record_size


def _record_dtype(L):
    return np.dtype([("emitter", "<u2"), ("receiver", "<u2"), ("iq", "<f4", (2 * L,))])


def _as_set(datasets):
    if isinstance(datasets, SampleSet):
        return datasets
    return SampleSet.concat([datasets[k] for k in sorted(datasets)])


def save_dataset(path, datasets, M=None, K=None):
    """Write a SampleSet (or receiver -> SampleSet map) as a dataset file.

    Frames are stored as 32-bit floats. ``M`` and ``K`` default to the
    largest label present.
    """
    s = _as_set(datasets)
    n, two, L = s.frames.shape
    if two != 2:
        raise InvalidInputError("frames must have shape (n, 2, L)")
    M = int(s.emitter.max()) if M is None else int(M)
    K = int(s.receiver.max()) if K is None else int(K)
    if not (0 < M < 2 ** 16 and 0 < K < 2 ** 16):
        raise InvalidInputError("M and K must fit in 16 bits")
    if s.emitter.min() < 1 or s.emitter.max() > M or s.receiver.min() < 1 or s.receiver.max() > K:
        raise InvalidInputError("labels outside the declared M, K")
    rec = np.empty(n, dtype=_record_dtype(L))
    rec["emitter"] = s.emitter
    rec["receiver"] = s.receiver
    # interleave: (n, 2, L) -> (n, L, 2) -> (n, 2L)
    rec["iq"] = s.frames.transpose(0, 2, 1).reshape(n, 2 * L).astype(np.float32)
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, M, K, L, n))
        fh.write(rec.tobytes())


def read_header(buf) -> DatasetHeader:
    if len(buf) < HEADER_SIZE:
        raise FormatError("truncated header", len(buf))
    magic, version, M, K, L, count = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if M < 1 or K < 1 or L < 1:
        raise FormatError("M, K and L must be positive", 8)
    return DatasetHeader(M, K, L, count)


def load_dataset(path) -> dict[int, SampleSet]:
    """Read a dataset file into a receiver -> SampleSet map.

    ``index`` counts records of each (emitter, receiver) pair in file order.
    """
    buf = Path(path).read_bytes()
    h = read_header(buf)
    if len(buf) < h.file_size:
        complete = (len(buf) - HEADER_SIZE) // h.record_size
        raise FormatError(f"truncated: {complete} of {h.count} records present",
                          HEADER_SIZE + complete * h.record_size)
    if len(buf) > h.file_size:
        raise FormatError(f"{len(buf) - h.file_size} trailing bytes", h.file_size)
    rec = np.frombuffer(buf, dtype=_record_dtype(h.L), count=h.count, offset=HEADER_SIZE)
    em = rec["emitter"].astype(np.int64)
    rx = rec["receiver"].astype(np.int64)
    bad = np.flatnonzero((em < 1) | (em > h.M) | (rx < 1) | (rx > h.K))
    if bad.size:
        raise FormatError("label outside declared M, K", HEADER_SIZE + int(bad[0]) * h.record_size)
    frames = rec["iq"].astype(np.float64).reshape(h.count, h.L, 2).transpose(0, 2, 1)
    index = np.zeros(h.count, dtype=np.int64)
    seen = {}
    for j, key in enumerate(zip(em.tolist(), rx.tolist())):
        index[j] = seen.get(key, 0)
        seen[key] = index[j] + 1
    out = {}
    for k in sorted(set(rx.tolist())):
        sel = rx == k
        out[k] = SampleSet(np.ascontiguousarray(frames[sel]), em[sel], rx[sel], index[sel])
    return out


def export_features(pair, samples: SampleSet, path):
    """CSV with columns emitter, receiver, f1..fF (emitter part first)."""
    Z = np.concatenate([pair.z_emitter, pair.z_receiver], axis=1)
    if len(Z) != len(samples):
        raise InvalidInputError("feature and sample counts differ")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["emitter", "receiver"] + [f"f{i + 1}" for i in range(Z.shape[1])])
        for e, r, z in zip(samples.emitter, samples.receiver, Z):
            w.writerow([int(e), int(r)] + [repr(float(v)) for v in z])


def read_features(path):
    """Inverse of :func:`export_features`: ``(emitter, receiver, Z)``."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0].astype(np.int64), data[:, 1].astype(np.int64), data[:, 2:]


def write_history_csv(path, history):
    """One row per epoch/round; floats written with ``repr`` so reruns compare byte-for-byte."""
    keys = []
    for rec in history:
        keys += [k for k in rec if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for rec in history:
            w.writerow([_cell(rec.get(k)) for k in keys])


def write_table_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row.get(c)) for c in columns])


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def jsonable(obj):
    """Recursively convert to JSON-safe values; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if hasattr(obj, "value") and not isinstance(obj, (str, int)):
        return obj.value
    return obj


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")
