"""Brute-force top-N retrieval over every subspace of a feature database.

Work is split three ways: one task per (subspace, row block), all query
frames of a bundle scored together in a single pass over each block, and
the per-row comparisons vectorised inside the kernel.  Every distance is
the square root of a left-to-right sum of squared coefficient differences,
so it does not depend on how rows were blocked or which thread scored
them.  Partial top-N lists are merged under the total order
(distance, frame_index), which makes the result independent of scheduling.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

from .feature import DimensionMismatchError, OmniFeature
from .geodb import FeatureDatabase, FloorCoord, Subspace

WORKERS_ENV = "OMNILOC_WORKERS"
_BLOCK = 256
_MIN_ROWS_PER_TASK = 4096


@dataclass(frozen=True, eq=False)
class QueryBundle:
    frames: tuple[OmniFeature, ...]
    center_index: int = 0

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise ValueError("query bundle is empty")
        k = frames[0].k
        if any(f.k != k for f in frames):
            raise DimensionMismatchError("query frames disagree on descriptor length")
        if not 0 <= self.center_index < len(frames):
            raise ValueError(f"center_index {self.center_index} outside bundle of {len(frames)}")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def k(self) -> int:
        return self.frames[0].k

    def matrix(self) -> np.ndarray:
        return np.ascontiguousarray(np.stack([f.coeffs for f in self.frames]), dtype=np.float64)


@dataclass(frozen=True)
class Candidate:
    subspace_id: int
    frame_index: int
    query_frame: int
    distance: float
    coord: FloorCoord


@dataclass(frozen=True)
class RetrievalParams:
    n: int = 15
    worker_budget: int | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"N must be >= 1, got {self.n}")
        if self.worker_budget is not None and self.worker_budget < 1:
            raise ValueError(f"worker_budget must be >= 1, got {self.worker_budget}")

    def workers(self) -> int:
        if self.worker_budget is not None:
            return self.worker_budget
        env = os.environ.get(WORKERS_ENV)
        if env:
            return max(1, int(env))
        return os.cpu_count() or 1


def select_nearby_frames(video_features: Sequence[OmniFeature], m: int, M: int) -> QueryBundle:
    """Window of M frames centred on frame m, shifted inward at the ends."""
    n = len(video_features)
    if n < 1:
        raise ValueError("video has no frames")
    if M < 1 or M % 2 == 0:
        raise ValueError(f"M must be a positive odd integer, got {M}")
    if not 0 <= m < n:
        raise IndexError(f"frame {m} out of range for a {n}-frame video")
    length = min(M, n)
    start = min(max(m - (M - 1) // 2, 0), n - length)
    return QueryBundle(tuple(video_features[start:start + length]), center_index=m - start)


@numba.njit(nogil=True, cache=True)
def _scan_block(cols, queries, lo, hi, out):
    """Distances from every query row to database rows lo..hi-1 of cols (K, n)."""
    k_dim = cols.shape[0]
    m_dim = queries.shape[0]
    acc = np.empty((m_dim, _BLOCK))
    for b0 in range(lo, hi, _BLOCK):
        w = min(hi, b0 + _BLOCK) - b0
        acc[:, :w] = 0.0
        for k in range(k_dim):
            row = cols[k]
            for m in range(m_dim):
                qk = queries[m, k]
                for j in range(w):
                    d = row[b0 + j] - qk
                    acc[m, j] += d * d
        for m in range(m_dim):
            for j in range(w):
                out[m, b0 + j - lo] = math.sqrt(acc[m, j])


def _top_n(dist: np.ndarray, index: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """n best (distance, index) pairs under the (distance, index) order."""
    if dist.shape[0] > n:
        kth = np.partition(dist, n - 1)[n - 1]
        keep = np.flatnonzero(dist <= kth)
        dist, index = dist[keep], index[keep]
    order = np.lexsort((index, dist))[:n]
    return dist[order], index[order]


def _scan(sub: Subspace, queries: np.ndarray, lo: int, hi: int, n: int):
    out = np.empty((queries.shape[0], hi - lo))
    _scan_block(sub.columns, queries, lo, hi, out)
    idx = np.arange(lo, hi, dtype=np.int64)
    return [_top_n(out[m], idx, n) for m in range(queries.shape[0])]


def _merge(parts, n: int):
    if len(parts) == 1:
        return parts[0]
    dist = np.concatenate([p[0] for p in parts])
    idx = np.concatenate([p[1] for p in parts])
    return _top_n(dist, idx, n)


def _candidates(sub: Subspace, query_frame: int, dist, idx) -> list[Candidate]:
    coords = sub.coords
    return [
        Candidate(sub.id, int(t), query_frame, float(d), FloorCoord(int(coords[t, 0]), int(coords[t, 1])))
        for d, t in zip(dist, idx)
    ]


def query_subspace(q: OmniFeature, s: Subspace, n: int) -> list[Candidate]:
    """The n nearest frames of one subspace, ascending by (distance, frame_index)."""
    if q.k != s.k:
        raise DimensionMismatchError(f"query has K={q.k}, subspace {s.id} has K={s.k}")
    if n < 1:
        raise ValueError(f"N must be >= 1, got {n}")
    queries = np.ascontiguousarray(q.coeffs[None, :])
    (dist, idx), = _scan(s, queries, 0, len(s), n)
    return _candidates(s, 0, dist, idx)


def _tasks(db: FeatureDatabase, workers: int):
    """(subspace, lo, hi) row ranges; large subspaces split when workers are spare."""
    tasks = []
    per_sub = max(1, workers // len(db.subspaces)) if workers > len(db.subspaces) else 1
    for s in db.subspaces:
        pieces = max(1, min(per_sub, len(s) // _MIN_ROWS_PER_TASK))
        bounds = np.linspace(0, len(s), pieces + 1).astype(int)
        tasks.extend((s, int(lo), int(hi)) for lo, hi in zip(bounds, bounds[1:]))
    return tasks


def parallel_retrieve(
    bundle: QueryBundle, db: FeatureDatabase, params: RetrievalParams = RetrievalParams()
) -> list[Candidate]:
    """Top-N candidates for every (query frame, subspace) pair.

    Output is ordered by query frame, then subspace id, then rank.
    """
    if bundle.k != db.k:
        raise DimensionMismatchError(f"query has K={bundle.k}, database has K={db.k}")
    queries = bundle.matrix()
    n = params.n
    workers = params.workers()
    tasks = _tasks(db, workers)

    def run(task):
        s, lo, hi = task
        return _scan(s, queries, lo, hi, n)

    if workers == 1 or len(tasks) == 1:
        partials = [run(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
            partials = list(pool.map(run, tasks))

    grouped: dict[int, list] = {s.id: [] for s in db.subspaces}
    for (s, _, _), part in zip(tasks, partials):
        grouped[s.id].append(part)

    merged = {
        sid: [_merge([p[m] for p in parts], n) for m in range(len(bundle))]
        for sid, parts in grouped.items()
    }
    out: list[Candidate] = []
    for m in range(len(bundle)):
        for s in db.subspaces:
            dist, idx = merged[s.id][m]
            out.extend(_candidates(s, m, dist, idx))
    return out


def sequential_retrieve_reference(
    bundle: QueryBundle, db: FeatureDatabase, params: RetrievalParams = RetrievalParams()
) -> list[Candidate]:
    """Plain nested-loop scan with a full sort; the oracle for parallel_retrieve."""
    if bundle.k != db.k:
        raise DimensionMismatchError(f"query has K={bundle.k}, database has K={db.k}")
    out = []
    for m, q in enumerate(bundle.frames):
        qv = q.coeffs.tolist()
        for s in db.subspaces:
            scored = []
            for t in range(len(s)):
                acc = 0.0
                for a, b in zip(s.features[t].tolist(), qv):
                    d = a - b
                    acc += d * d
                scored.append((math.sqrt(acc), t))
            scored.sort()
            for d, t in scored[:params.n]:
                out.append(Candidate(s.id, t, m, d, s.coord(t)))
    return out
