"""Embedding dump files.

``<path>``: ``b"RMEMB1"``, little-endian u32 row count and dimension, then
row-major little-endian float32 embeddings. ``<path>.csv`` sidecar: one
``row_index,person_id,camera_id`` line per row.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ParseError

DUMP_MAGIC = b"RMEMB1"


@dataclass
class EmbeddingDump:
    embeddings: np.ndarray  # float32 values widened to float64
    person_ids: np.ndarray
    camera_ids: np.ndarray

    @property
    def dim(self):
        return self.embeddings.shape[1]

    def __len__(self):
        return self.embeddings.shape[0]


def sidecar_path(path):
    return str(path) + ".csv"


def write_dump(path, embeddings, person_ids, camera_ids):
    emb = np.ascontiguousarray(embeddings, dtype="<f4")
    n, d = emb.shape
    if len(person_ids) != n or len(camera_ids) != n:
        raise ValueError("metadata length does not match embedding rows")
    with open(path, "wb") as fh:
        fh.write(DUMP_MAGIC + struct.pack("<2I", n, d) + emb.tobytes())
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        fh.writelines(f"{i},{int(p)},{int(c)}\n" for i, (p, c) in enumerate(zip(person_ids, camera_ids)))


def read_dump(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(DUMP_MAGIC) or len(buf) < 14:
        raise ParseError("not an embedding dump", path)
    n, d = struct.unpack("<2I", buf[6:14])
    if len(buf) != 14 + 4 * n * d:
        raise ParseError(f"expected {n}x{d} float32 values", path)
    emb = np.frombuffer(buf, dtype="<f4", offset=14).reshape(n, d).astype(np.float64)
    pids = np.empty(n, dtype=np.int64)
    cams = np.empty(n, dtype=np.int64)
    seen = 0
    side = sidecar_path(path)
    with open(side, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row, pid, cam = (int(t) for t in line.split(","))
            except ValueError:
                raise ParseError(f"bad sidecar line {line.strip()!r}", side, lineno) from None
            if row != seen:
                raise ParseError(f"expected row {seen}, got {row}", side, lineno)
            pids[row], cams[row] = pid, cam
            seen += 1
    if seen != n:
        raise ParseError(f"sidecar has {seen} rows, dump has {n}", side)
    return EmbeddingDump(emb, pids, cams)
