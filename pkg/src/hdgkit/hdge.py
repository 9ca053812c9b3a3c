"""HDGE binary container for embedding tables.

Layout (little-endian): magic "HDGE" | version u32=1 | kind u8 | dim u32 |
count u32 | count * [key_len u16 | key utf-8 | dim * f32] | optional UTF-8
JSON footer. Payload floats are f32 on disk, widened to f64 in memory.
"""

from __future__ import annotations

import enum
import json
import math
import os
import struct
import tempfile

import numpy as np

MAGIC = b"HDGE"
VERSION = 1


class FormatError(ValueError):
    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(f"{code}: {message}")


class EmbeddingKind(enum.IntEnum):
    TEACHER_IMAGE = 0
    STUDENT_FEATURE = 1
    TEACHER_TEXT = 2
    TEACHER_SCORES = 3
    CHECKPOINT = 4


class EmbeddingTable:
    """Ordered mapping key -> f64 vector, all rows sharing one dimension."""

    def __init__(self, dim: int, kind: EmbeddingKind, rows: dict[str, np.ndarray] | None = None):
        if dim <= 0:
            raise FormatError("bad_dim", f"dim must be positive, got {dim}")
        self.dim = int(dim)
        self.kind = EmbeddingKind(kind)
        self.rows: dict[str, np.ndarray] = {}
        if rows:
            for k, v in rows.items():
                self.put(k, v)

    def put(self, key: str, vec) -> None:
        v = np.asarray(vec, dtype=np.float64)
        if v.shape != (self.dim,):
            raise FormatError("dim_mismatch", f"row '{key}' has shape {v.shape}, expected ({self.dim},)")
        if not np.all(np.isfinite(v)):
            raise FormatError("non_finite", f"row '{key}' contains a non-finite value")
        self.rows[key] = v

    def __len__(self) -> int:
        return len(self.rows)

    def keys(self) -> list[str]:
        return list(self.rows)

    def matrix(self, keys=None) -> np.ndarray:
        """Stack rows (insertion order by default) into a (n, dim) array."""
        keys = self.keys() if keys is None else keys
        if not keys:
            return np.zeros((0, self.dim))
        return np.stack([self.rows[k] for k in keys])

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingTable):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.kind == other.kind
            and self.keys() == other.keys()
            and all(np.array_equal(self.rows[k], other.rows[k]) for k in self.rows)
        )


def save_embeddings(table: EmbeddingTable, path, footer: dict | None = None) -> None:
    """Write a table atomically (temp file + rename)."""
    parts = [MAGIC, struct.pack("<IBII", VERSION, int(table.kind), table.dim, len(table))]
    for key, vec in table.rows.items():
        kb = key.encode("utf-8")
        if len(kb) > 0xFFFF:
            raise FormatError("key_too_long", f"key '{key[:32]}...' exceeds 65535 bytes")
        parts.append(struct.pack("<H", len(kb)))
        parts.append(kb)
        parts.append(vec.astype("<f4").tobytes())
    if footer is not None:
        parts.append(json.dumps(footer).encode("utf-8"))
    blob = b"".join(parts)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".hdge-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_container(path) -> tuple[EmbeddingTable, dict | None]:
    """Read a table plus its optional JSON footer."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise FormatError("bad_magic", f"expected {MAGIC!r}, got {blob[:4]!r}")
    if len(blob) < 4 + 13:
        raise FormatError("truncated", "header incomplete")
    version, kind, dim, count = struct.unpack_from("<IBII", blob, 4)
    if version != VERSION:
        raise FormatError("bad_version", f"unsupported version {version}")
    if dim == 0:
        raise FormatError("bad_dim", "dim 0 in header")
    table = EmbeddingTable(dim=dim, kind=EmbeddingKind(kind))
    off = 17
    row_bytes = 4 * dim
    for i in range(count):
        if off + 2 > len(blob):
            raise FormatError("truncated", f"record {i}: missing key length")
        (klen,) = struct.unpack_from("<H", blob, off)
        off += 2
        if off + klen + row_bytes > len(blob):
            raise FormatError("truncated", f"record {i}: payload cut short")
        key = blob[off : off + klen].decode("utf-8")
        off += klen
        vec = np.frombuffer(blob, dtype="<f4", count=dim, offset=off).astype(np.float64)
        off += row_bytes
        if not np.all(np.isfinite(vec)):
            raise FormatError("non_finite", f"row '{key}' contains a non-finite value")
        if key in table.rows:
            raise FormatError("duplicate_key", f"row key '{key}' repeated")
        table.rows[key] = vec
    footer = None
    if off < len(blob):
        try:
            footer = json.loads(blob[off:].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError("bad_footer", f"trailing bytes are not valid JSON: {e}") from e
    return table, footer


def load_embeddings(path) -> EmbeddingTable:
    table, _ = load_container(path)
    return table
