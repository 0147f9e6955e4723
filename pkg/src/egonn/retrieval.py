"""Geo-tagged global-descriptor database, exact nearest-neighbor search and Recall@N.

``EGODB1`` file layout (little-endian): the 6 bytes ``EGODB1``, entry count
``u64``, then per entry ``id: u64``, 256 ``f32`` descriptor values, 12 ``f32``
values of the row-major 3x4 pose and the cloud path as ``u64`` length plus
UTF-8 bytes.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import PoseSE3, orthonormalize

MAGIC = b"EGODB1"
DESC_DIM = 256


class DatabaseError(ValueError):
    pass


def _f32(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).astype("<f4")


@dataclass
class DBEntry:
    id: int
    descriptor: np.ndarray
    pose: PoseSE3
    path: str
    # float32 pose as stored on disk; ``pose`` is its nearest exact rotation
    pose_3x4: np.ndarray | None = None


@dataclass
class DescriptorDB:
    """Database entries; descriptors and poses are held at the file's float32 precision."""

    entries: list[DBEntry] = field(default_factory=list)
    _ids: set = field(default_factory=set, repr=False)
    _matrix: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.entries)

    def add(self, id: int, descriptor, pose, path: str = "") -> "DescriptorDB":
        """Append an entry; ``pose`` is a :class:`PoseSE3` or a 3×4 ``[R|t]`` matrix."""
        id = int(id)
        if id < 0 or id >= 1 << 64:
            raise DatabaseError(f"id {id} does not fit in u64")
        if id in self._ids:
            raise DatabaseError(f"duplicate id {id}")
        d = _f32(descriptor).reshape(-1)
        if d.shape[0] != DESC_DIM:
            raise DatabaseError(f"descriptor has {d.shape[0]} values, expected {DESC_DIM}")
        if not np.all(np.isfinite(d)):
            raise DatabaseError(f"descriptor of id {id} is not finite")
        m32 = _f32(pose.as_3x4() if isinstance(pose, PoseSE3) else pose).reshape(3, 4)
        m = m32.astype(np.float64)
        r = m[:, :3]
        dev = max(np.abs(r.T @ r - np.eye(3)).max(), abs(np.linalg.det(r) - 1.0))
        if not np.isfinite(dev) or dev > 1e-3:
            raise DatabaseError(f"pose of id {id} is not a rigid transform")
        exact = PoseSE3(orthonormalize(r), m[:, 3])
        self.entries.append(DBEntry(id, d.astype(np.float64), exact, str(path), m32))
        self._ids.add(id)
        self._matrix = None
        return self

    @property
    def ids(self) -> np.ndarray:
        return np.array([e.id for e in self.entries], dtype=np.uint64)

    @property
    def descriptors(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = (np.vstack([e.descriptor for e in self.entries]) if self.entries
                            else np.zeros((0, DESC_DIM)))
        return self._matrix

    @property
    def positions(self) -> np.ndarray:
        return np.array([e.pose.translation for e in self.entries]).reshape(-1, 3)

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        out.write(MAGIC)
        out.write(struct.pack("<Q", len(self.entries)))
        for e in self.entries:
            out.write(struct.pack("<Q", e.id))
            out.write(_f32(e.descriptor).tobytes())
            out.write(e.pose_3x4.tobytes())
            raw = e.path.encode("utf-8")
            out.write(struct.pack("<Q", len(raw)))
            out.write(raw)
        return out.getvalue()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "<bytes>") -> "DescriptorDB":
        if not data.startswith(MAGIC):
            raise DatabaseError(f"{source}: bad magic, not an EGODB1 database")
        pos = len(MAGIC)

        def take(n):
            nonlocal pos
            if pos + n > len(data):
                raise DatabaseError(f"{source}: truncated at byte {pos}")
            chunk = data[pos:pos + n]
            pos += n
            return chunk

        (count,) = struct.unpack("<Q", take(8))
        db = cls()
        for _ in range(count):
            (eid,) = struct.unpack("<Q", take(8))
            desc = np.frombuffer(take(4 * DESC_DIM), dtype="<f4")
            m = np.frombuffer(take(48), dtype="<f4").astype(np.float64).reshape(3, 4)
            (plen,) = struct.unpack("<Q", take(8))
            db.add(eid, desc, m, take(plen).decode("utf-8"))
        if pos != len(data):
            raise DatabaseError(f"{source}: {len(data) - pos} trailing bytes after {count} entries")
        return db

    @classmethod
    def load(cls, path) -> "DescriptorDB":
        return cls.from_bytes(Path(path).read_bytes(), str(path))


def query_topk(db: DescriptorDB, q, k: int = 1) -> np.ndarray:
    """Ids of the ``k`` entries nearest to ``q`` in Euclidean distance (ties: lower id first)."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if len(db) == 0:
        raise DatabaseError("query on an empty database")
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    d = np.sqrt(((db.descriptors - q) ** 2).sum(axis=1))
    ids = db.ids
    order = np.lexsort((ids, d))
    return ids[order[:k]]


@dataclass
class RetrievalReport:
    recall: dict[tuple[int, float], float]
    topk: np.ndarray

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["N", "threshold_m", "recall"])
        for (n, d), r in sorted(self.recall.items()):
            w.writerow([n, f"{d:g}", f"{r:.6f}"])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.csv_text())


def evaluate_recall(db: DescriptorDB, queries: Sequence[tuple[np.ndarray, PoseSE3]],
                    ns: Iterable[int] = (1, 5), thresholds: Iterable[float] = (5.0, 20.0)
                    ) -> RetrievalReport:
    """Recall@N: a query is localized if any of its top-N entries lies within d meters."""
    if len(queries) == 0:
        raise ValueError("empty query set")
    ns = sorted(set(int(n) for n in ns))
    thresholds = sorted(set(float(t) for t in thresholds))
    kmax = min(max(ns), len(db))
    pos_by_id = {e.id: e.pose.translation for e in db.entries}
    topk = np.zeros((len(queries), kmax), dtype=np.uint64)
    dist = np.zeros((len(queries), kmax))
    for i, (desc, pose) in enumerate(queries):
        ids = query_topk(db, desc, kmax)
        topk[i] = ids
        dist[i] = [np.linalg.norm(pos_by_id[int(j)] - pose.translation) for j in ids]
    recall = {}
    for n in ns:
        for t in thresholds:
            hit = (dist[:, :n] <= t).any(axis=1)
            recall[(n, t)] = float(hit.mean())
    return RetrievalReport(recall, topk)


def random_recall_expectation(db_positions, query_positions, n: int, threshold: float) -> float:
    """Expected Recall@N when the top-N list is a uniformly random N-subset of the database."""
    db_positions = np.asarray(db_positions, dtype=np.float64).reshape(-1, 3)
    query_positions = np.asarray(query_positions, dtype=np.float64).reshape(-1, 3)
    m = len(db_positions)
    n = min(n, m)
    total = 0.0
    for q in query_positions:
        k = int((np.linalg.norm(db_positions - q, axis=1) <= threshold).sum())
        # P(no positive among n draws without replacement)
        miss = math.comb(m - k, n) / math.comb(m, n)
        total += 1.0 - miss
    return total / len(query_positions)
