"""Fuse retrieval candidates into one floor-plan estimate.

Candidates are binned onto the tile grid, the densest tiles are ranked,
and the ranked tiles are scanned in order until one whose surrounding
tolerance circle holds more than ``toler_per`` of all candidates is found.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .geodb import TILE_M, FloorCoord
from .retrieval import Candidate

# absorbs decimal radius/tile ratios like 3.0 / 0.3 landing one ulp short
_RADIUS_SLACK = 1e-9


class NoCandidatesError(ValueError):
    pass


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class AggregationParams:
    top_c: int = 10
    toler_per: float = 0.20
    radius_m: float = 3.0
    tile_m: float = TILE_M

    def __post_init__(self):
        if self.top_c < 1:
            raise ValueError(f"top_c must be >= 1, got {self.top_c}")
        if not 0.0 < self.toler_per <= 1.0:
            raise ValueError(f"toler_per must be in (0, 1], got {self.toler_per}")
        if not self.radius_m > 0.0:
            raise ValueError(f"radius_m must be positive, got {self.radius_m}")
        if not self.tile_m > 0.0:
            raise ValueError(f"tile_m must be positive, got {self.tile_m}")


@dataclass(frozen=True, eq=False)
class DensityGrid:
    counts: np.ndarray  # (height, width), indexed counts[y, x]
    total: int

    @property
    def width(self) -> int:
        return self.counts.shape[1]

    @property
    def height(self) -> int:
        return self.counts.shape[0]

    def to_csv(self) -> str:
        lines = ["x,y,count"]
        ys, xs = np.nonzero(self.counts)
        for y, x in sorted(zip(ys.tolist(), xs.tolist())):
            lines.append(f"{x},{y},{int(self.counts[y, x])}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class RankedTile:
    coord: FloorCoord
    count: int
    circle_count: int


@dataclass(frozen=True)
class LocalizationEstimate:
    coord: FloorCoord
    confidence: float
    low_confidence: bool
    ranked_tiles: tuple[RankedTile, ...]
    total: int


def bin_candidates(candidates: Iterable[Candidate], width: int, height: int) -> DensityGrid:
    xy = np.array([(c.coord.x, c.coord.y) for c in candidates], dtype=np.int64).reshape(-1, 2)
    if xy.size and (xy.min() < 0 or xy[:, 0].max() >= width or xy[:, 1].max() >= height):
        raise GridMismatchError(f"candidate coordinates fall outside the {width}x{height} grid")
    flat = np.bincount(xy[:, 1] * width + xy[:, 0], minlength=width * height)
    return DensityGrid(flat.reshape(height, width), total=int(xy.shape[0]))


def rank_tiles(grid: DensityGrid, top_c: int) -> list[tuple[FloorCoord, int]]:
    """Nonzero tiles by descending count, ties by ascending (y, x); at most top_c."""
    ys, xs = np.nonzero(grid.counts)
    counts = grid.counts[ys, xs]
    order = np.lexsort((xs, ys, -counts))[:top_c]
    return [(FloorCoord(int(xs[i]), int(ys[i])), int(counts[i])) for i in order]


def radius_tiles(radius_m: float, tile_m: float = TILE_M) -> float:
    return radius_m / tile_m


def _disk_offsets(radius: float) -> tuple[np.ndarray, np.ndarray]:
    r = int(np.floor(radius + _RADIUS_SLACK))
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    inside = dx * dx + dy * dy <= radius * radius * (1 + _RADIUS_SLACK)
    return dx[inside], dy[inside]


def circle_count(grid: DensityGrid, center: FloorCoord, radius_m: float, tile_m: float = TILE_M) -> int:
    """Candidates on tiles whose centre lies within radius_m of the centre tile's centre."""
    dx, dy = _disk_offsets(radius_tiles(radius_m, tile_m))
    xs, ys = center.x + dx, center.y + dy
    ok = (xs >= 0) & (xs < grid.width) & (ys >= 0) & (ys < grid.height)
    return int(grid.counts[ys[ok], xs[ok]].sum())


def aggregate(
    candidates: Sequence[Candidate], width: int, height: int, params: AggregationParams = AggregationParams()
) -> LocalizationEstimate:
    if len(candidates) == 0:
        raise NoCandidatesError("no candidates to aggregate")
    grid = bin_candidates(candidates, width, height)
    ranked = [
        RankedTile(coord, count, circle_count(grid, coord, params.radius_m, params.tile_m))
        for coord, count in rank_tiles(grid, params.top_c)
    ]
    threshold = params.toler_per * grid.total
    for tile in ranked:
        if tile.circle_count > threshold:
            return LocalizationEstimate(tile.coord, tile.circle_count / grid.total, False, tuple(ranked), grid.total)
    # nothing cleared the threshold; answer anyway with the best circle, flagged
    best = max(ranked, key=lambda t: t.circle_count)
    return LocalizationEstimate(best.coord, best.circle_count / grid.total, True, tuple(ranked), grid.total)
