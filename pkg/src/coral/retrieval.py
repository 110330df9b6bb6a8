"""Descriptor database, exact top-k search and recall metrics."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import DataError

DESC_MAGIC = b"DESC"


@dataclass
class DescriptorDatabase:
    ids: np.ndarray
    runs: np.ndarray
    positions: np.ndarray  # (N, 2) meters
    descriptors: np.ndarray  # (N, D) unit rows
    _trees: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, np.int64)
        self.runs = np.asarray(self.runs, np.int64)
        self.positions = np.asarray(self.positions, np.float64).reshape(-1, 2)
        self.descriptors = np.asarray(self.descriptors, np.float64)
        n = len(self.ids)
        if not (len(self.runs) == len(self.positions) == len(self.descriptors) == n):
            raise ValueError("database columns differ in length")
        if n and np.any(np.abs(np.linalg.norm(self.descriptors, axis=1) - 1.0) > 1e-5):
            raise ValueError("database descriptors must have unit L2 norm")

    def __len__(self) -> int:
        return len(self.ids)

    def position_of(self) -> dict:
        return {int(i): tuple(p) for i, p in zip(self.ids, self.positions)}

    def _candidates(self, exclude_run) -> np.ndarray:
        if exclude_run is None:
            return np.arange(len(self))
        return np.nonzero(self.runs != exclude_run)[0]

    def _tree(self, exclude_run):
        if exclude_run not in self._trees:
            rows = self._candidates(exclude_run)
            self._trees[exclude_run] = (rows, cKDTree(self.descriptors[rows]))
        return self._trees[exclude_run]


@dataclass
class RetrievalResult:
    query_id: int
    ids: np.ndarray
    distances: np.ndarray
    positions: np.ndarray
    db_size: int


def _rank(rows: np.ndarray, db: DescriptorDatabase, q: np.ndarray, k: int):
    d = ((db.descriptors[rows] - q) ** 2).sum(axis=1)
    order = np.lexsort((db.ids[rows], d))[:k]
    return rows[order], d[order]


def query(db: DescriptorDatabase, q, k: int = 1, exclude_run: int | None = None, query_id: int = -1,
          use_kdtree: bool = False) -> RetrievalResult:
    """Exact top-k by squared Euclidean distance; ties go to the smaller sample id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(q, np.float64)
    rows = db._candidates(exclude_run)
    if len(rows) == 0:
        raise DataError("database is empty after excluding the query run")
    k = min(k, len(rows))
    if use_kdtree:
        tree_rows, tree = db._tree(exclude_run)
        dist, _ = tree.query(q, k=k)
        radius = float(np.max(dist))
        # every record at the k-th distance or closer, so exact tie-breaking still applies
        near = tree.query_ball_point(q, radius * (1 + 1e-9) + 1e-12)
        rows = tree_rows[np.asarray(near, np.int64)]
    picked, d = _rank(rows, db, q, k)
    return RetrievalResult(query_id, db.ids[picked], d, db.positions[picked], len(db._candidates(exclude_run)))


def percent_count(percent: float, db_size: int) -> int:
    """``max(1, round(percent/100 * db_size))`` rounding halves away from zero."""
    return max(1, int(math.floor(percent / 100.0 * db_size + 0.5)))


def recall_at(results: Sequence[RetrievalResult], query_positions, n: int | None = None,
              percent: float | None = None, radius: float = 25.0) -> float:
    """Fraction of queries with a true match (within ``radius`` m) among the top N."""
    if (n is None) == (percent is None):
        raise ValueError("give exactly one of n or percent")
    if not results:
        return 0.0
    hits = 0
    for res in results:
        top = n if n is not None else percent_count(percent, res.db_size)
        if len(res.ids) < min(top, res.db_size):
            raise ValueError(f"query {res.query_id} has {len(res.ids)} candidates, {top} needed")
        qpos = np.asarray(query_positions[res.query_id], float)
        d = np.linalg.norm(res.positions[:top] - qpos, axis=1)
        hits += bool(np.any(d <= radius))
    return hits / len(results)


@dataclass
class EvalReport:
    results: list
    recall_1: float
    recall_pct: float
    radius: float
    percent: float
    rows: list  # (query_id, rank1_id, rank1_dist, success@1, success@pct)


def evaluate_cross_run(db: DescriptorDatabase, radius: float = 25.0, percent: float = 1.0,
                       query_runs: Sequence[int] | None = None, use_kdtree: bool = False) -> EvalReport:
    """Every record of ``query_runs`` (default: all) queries the records of the other runs."""
    positions = db.position_of()
    results, rows = [], []
    for r in range(len(db)):
        run = int(db.runs[r])
        if query_runs is not None and run not in query_runs:
            continue
        n_db = int((db.runs != run).sum())
        if n_db == 0:
            continue
        k = percent_count(percent, n_db)
        res = query(db, db.descriptors[r], k, exclude_run=run, query_id=int(db.ids[r]), use_kdtree=use_kdtree)
        results.append(res)
        ok1 = recall_at([res], positions, n=1, radius=radius)
        okp = recall_at([res], positions, percent=percent, radius=radius)
        rows.append((res.query_id, int(res.ids[0]), float(res.distances[0]), int(ok1), int(okp)))
    r1 = float(np.mean([row[3] for row in rows])) if rows else 0.0
    rp = float(np.mean([row[4] for row in rows])) if rows else 0.0
    return EvalReport(results, r1, rp, radius, percent, rows)


def summary_line(report: EvalReport) -> str:
    return (f"recall@1={report.recall_1:.6f} recall@{report.percent:g}%={report.recall_pct:.6f} "
            f"queries={len(report.rows)} radius_m={report.radius:g} (success radius is a convention)")


def write_report_csv(path: str | Path, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["query_id", "rank1_id", "rank1_dist", "success@1", "success@1pct"])
        for qid, rid, dist, s1, sp in report.rows:
            writer.writerow([qid, rid, repr(dist), s1, sp])
        fh.write(f"# {summary_line(report)}\n")


def write_descriptors(path: str | Path, ids, descriptors) -> None:
    """``DESC`` | dim u32 | count u32 | records of (id u64, float32 x dim), little-endian."""
    descriptors = np.asarray(descriptors, dtype="<f4")
    ids = np.asarray(ids, dtype="<u8")
    count, dim = descriptors.shape
    records = np.zeros(count, dtype=np.dtype([("id", "<u8"), ("d", "<f4", (dim,))]))
    records["id"] = ids
    records["d"] = descriptors
    Path(path).write_bytes(DESC_MAGIC + struct.pack("<II", dim, count) + records.tobytes())


def read_descriptors(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read descriptors {path}: {exc.strerror}") from None
    if data[:4] != DESC_MAGIC:
        raise DataError(f"{path}: not a DESC file")
    dim, count = struct.unpack_from("<II", data, 4)
    dtype = np.dtype([("id", "<u8"), ("d", "<f4", (dim,))])
    if len(data) != 12 + count * dtype.itemsize:
        raise DataError(f"{path}: size does not match {count} records of dim {dim}")
    records = np.frombuffer(data, dtype=dtype, offset=12)
    return records["id"].astype(np.int64), records["d"].astype(np.float32)


def write_database(path: str | Path, db: DescriptorDatabase) -> None:
    """Descriptor binary at ``path`` plus an ``id,run,x,y`` sidecar CSV next to it."""
    path = Path(path)
    write_descriptors(path, db.ids, db.descriptors)
    with open(path.with_suffix(".csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "run", "x", "y"])
        for i, r, (x, y) in zip(db.ids, db.runs, db.positions):
            writer.writerow([int(i), int(r), repr(float(x)), repr(float(y))])


def read_database(path: str | Path) -> DescriptorDatabase:
    path = Path(path)
    ids, desc = read_descriptors(path)
    sidecar = path.with_suffix(".csv")
    try:
        with open(sidecar, newline="") as fh:
            meta = {int(r["id"]): (int(r["run"]), float(r["x"]), float(r["y"])) for r in csv.DictReader(fh)}
    except OSError:
        raise DataError(f"missing database sidecar {sidecar}") from None
    try:
        runs = [meta[int(i)][0] for i in ids]
        pos = [meta[int(i)][1:] for i in ids]
    except KeyError as exc:
        raise DataError(f"{sidecar}: no entry for id {exc.args[0]}") from None
    return DescriptorDatabase(ids, runs, pos, desc)
