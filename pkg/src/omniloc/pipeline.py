"""Retrieve-then-aggregate, shared by the CLI, the TCP service and the benchmarks."""
from __future__ import annotations

import time
from dataclasses import dataclass

from .aggregation import AggregationParams, LocalizationEstimate, aggregate
from .geodb import TILE_M, FeatureDatabase
from .retrieval import Candidate, QueryBundle, RetrievalParams, parallel_retrieve


@dataclass(frozen=True)
class Localization:
    estimate: LocalizationEstimate
    candidates: list[Candidate]
    retrieve_ms: float
    aggregate_ms: float


def localize(
    db: FeatureDatabase,
    bundle: QueryBundle,
    rparams: RetrievalParams = RetrievalParams(),
    aparams: AggregationParams = AggregationParams(),
) -> Localization:
    t0 = time.perf_counter()
    cands = parallel_retrieve(bundle, db, rparams)
    t1 = time.perf_counter()
    est = aggregate(cands, db.grid_width, db.grid_height, aparams)
    t2 = time.perf_counter()
    return Localization(est, cands, (t1 - t0) * 1e3, (t2 - t1) * 1e3)


def best_match(cands: list[Candidate]) -> Candidate:
    return min(cands, key=lambda c: (c.distance, c.subspace_id, c.frame_index, c.query_frame))


def localization_to_dict(loc: Localization, tile_m: float = TILE_M) -> dict:
    """JSON-ready summary; the same structure the service sends back."""
    est = loc.estimate
    bm = best_match(loc.candidates)
    return {
        "x": est.coord.x,
        "y": est.coord.y,
        "x_m": est.coord.x * tile_m,
        "y_m": est.coord.y * tile_m,
        "confidence": est.confidence,
        "low_confidence": est.low_confidence,
        "n_candidates": est.total,
        "ranked_tiles": [
            {"x": t.coord.x, "y": t.coord.y, "count": t.count, "circle_count": t.circle_count}
            for t in est.ranked_tiles
        ],
        "best_match": {
            "subspace_id": bm.subspace_id,
            "frame_index": bm.frame_index,
            "query_frame": bm.query_frame,
            "distance": bm.distance,
        },
        "timing_ms": {"retrieve": loc.retrieve_ms, "aggregate": loc.aggregate_ms},
    }
