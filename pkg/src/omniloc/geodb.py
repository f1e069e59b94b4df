"""Multi-subspace feature database with its frame -> floor-tile table.

Each subspace is one modelled path (or floor).  Frames are geo-referenced
through a CSV manifest of anchor points; frames between anchors are placed
by linear interpolation and snapped to the nearest 30 cm floor tile.

On-disk layout (all little-endian)::

    b"OMNIDB\\x01"
    u32 format_version, u32 K, u32 grid_width, u32 grid_height, u32 n_subspaces
    per subspace:
        u32 id, u16 name_len, name (UTF-8), u32 n_frames
        n_frames x (i32 x, i32 y, K x f64 coeffs, u8 degenerate)
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .feature import K, DimensionMismatchError, OmniFeature, extract_feature, extract_profile

TILE_M = 0.30
MAGIC = b"OMNIDB\x01"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<5I")

NORM_TOL = 1e-9


class DatabaseError(Exception):
    """Base class for database build/load problems."""


class ManifestError(DatabaseError):
    pass


class MagicMismatchError(DatabaseError):
    pass


class VersionMismatchError(DatabaseError):
    pass


class TruncatedFileError(DatabaseError):
    pass


class InvalidDatabaseError(DatabaseError):
    """The file parsed but its contents violate a database invariant."""


class FloorCoord(NamedTuple):
    x: int
    y: int


@dataclass(frozen=True)
class GeoManifest:
    """Anchor rows ``(frame, x, y)`` with strictly increasing frame index."""

    rows: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        rows = tuple((int(f), int(x), int(y)) for f, x, y in self.rows)
        if not rows:
            raise ManifestError("manifest has no anchor rows")
        if rows[0][0] != 0:
            raise ManifestError(f"first anchor must be frame 0, got {rows[0][0]}")
        for prev, cur in zip(rows, rows[1:]):
            if cur[0] <= prev[0]:
                raise ManifestError(f"anchor frames must strictly increase ({prev[0]} then {cur[0]})")
        object.__setattr__(self, "rows", rows)

    @property
    def last_frame(self) -> int:
        return self.rows[-1][0]


def read_manifest(path: str | Path) -> GeoManifest:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["frame", "x", "y"]:
            raise ManifestError(f"{path}: header must be 'frame,x,y', got {header!r}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != 3:
                raise ManifestError(f"{path}:{lineno}: expected 3 fields, got {len(rec)}")
            try:
                rows.append(tuple(int(c) for c in rec))
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: non-integer field in {rec!r}") from None
    return GeoManifest(tuple(rows))


def write_manifest(path: str | Path, manifest: GeoManifest) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "x", "y"])
        w.writerows(manifest.rows)


def _round_toward(num: int, den: int, toward_up: bool) -> int:
    """Round num/den (den > 0) to nearest integer, breaking .5 ties up or down."""
    if toward_up:
        return (2 * num + den) // (2 * den)
    return -((-2 * num + den) // (2 * den))


def interpolate_coords(manifest: GeoManifest, n_frames: int) -> np.ndarray:
    """Tile coordinate of every frame, shape (n_frames, 2), dtype int32.

    Linear between consecutive anchors, rounded to the nearest tile with
    exact halves going toward the later anchor.  Integer arithmetic only.
    """
    if n_frames < 1:
        raise ManifestError("path has no frames")
    rows = manifest.rows
    if manifest.last_frame != n_frames - 1:
        raise ManifestError(
            f"manifest ends at frame {manifest.last_frame} but the path has {n_frames} frames"
        )
    if n_frames > 1 and len(rows) < 2:
        raise ManifestError("a multi-frame path needs at least two anchors")

    out = np.empty((n_frames, 2), dtype=np.int32)
    if len(rows) == 1:
        out[0] = rows[0][1:]
        return out
    for (f0, x0, y0), (f1, x1, y1) in zip(rows, rows[1:]):
        den = f1 - f0
        for t in range(f0, f1 + 1):
            dt = t - f0
            out[t, 0] = _round_toward(x0 * den + (x1 - x0) * dt, den, x1 >= x0)
            out[t, 1] = _round_toward(y0 * den + (y1 - y0) * dt, den, y1 >= y0)
    return out


@dataclass(frozen=True, eq=False)
class Subspace:
    id: int
    name: str
    features: np.ndarray  # (n, K) float64
    degenerate: np.ndarray  # (n,) bool
    coords: np.ndarray  # (n, 2) int32, columns x, y

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        deg = np.ascontiguousarray(self.degenerate, dtype=bool)
        coords = np.ascontiguousarray(self.coords, dtype=np.int32)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise InvalidDatabaseError(f"subspace {self.id}: features must be a non-empty (n, K) array")
        n = feats.shape[0]
        if deg.shape != (n,) or coords.shape != (n, 2):
            raise InvalidDatabaseError(f"subspace {self.id}: features, flags and coords disagree in length")
        for name, arr in (("features", feats), ("degenerate", deg), ("coords", coords)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def k(self) -> int:
        return self.features.shape[1]

    @cached_property
    def columns(self) -> np.ndarray:
        """Coefficient-major copy (K, n) used by the scan kernels."""
        cols = np.ascontiguousarray(self.features.T)
        cols.flags.writeable = False
        return cols

    def feature(self, t: int) -> OmniFeature:
        return OmniFeature(self.features[t].copy(), bool(self.degenerate[t]))

    def coord(self, t: int) -> FloorCoord:
        return FloorCoord(int(self.coords[t, 0]), int(self.coords[t, 1]))


@dataclass(frozen=True, eq=False)
class FeatureDatabase:
    subspaces: tuple[Subspace, ...]
    grid_width: int
    grid_height: int
    k: int = K
    format_version: int = FORMAT_VERSION
    _by_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "subspaces", tuple(self.subspaces))
        object.__setattr__(self, "_by_id", {s.id: s for s in self.subspaces})
        validate_database(self)

    @property
    def n_frames(self) -> int:
        return sum(len(s) for s in self.subspaces)

    def subspace(self, subspace_id: int) -> Subspace:
        try:
            return self._by_id[subspace_id]
        except KeyError:
            raise KeyError(f"no subspace with id {subspace_id}") from None


def validate_database(db: FeatureDatabase) -> None:
    """Raise InvalidDatabaseError if any database invariant is violated."""
    if db.grid_width < 1 or db.grid_height < 1:
        raise InvalidDatabaseError(f"grid must be at least 1x1, got {db.grid_width}x{db.grid_height}")
    if not db.subspaces:
        raise InvalidDatabaseError("database has no subspaces")
    ids = [s.id for s in db.subspaces]
    if ids != list(range(1, len(ids) + 1)):
        raise InvalidDatabaseError(f"subspace ids must be 1..n_s in order, got {ids}")
    for s in db.subspaces:
        if s.k != db.k:
            raise InvalidDatabaseError(f"subspace {s.id} has K={s.k}, database has K={db.k}")
        x, y = s.coords[:, 0], s.coords[:, 1]
        if x.min() < 0 or y.min() < 0 or x.max() >= db.grid_width or y.max() >= db.grid_height:
            raise InvalidDatabaseError(f"subspace {s.id} has coordinates outside the grid")
        f = s.features
        if not np.all(np.isfinite(f)) or np.any(f < 0):
            raise InvalidDatabaseError(f"subspace {s.id} has negative or non-finite coefficients")
        if np.any(f[s.degenerate] != 0):
            raise InvalidDatabaseError(f"subspace {s.id} has a degenerate frame with nonzero coefficients")
        live = f[~s.degenerate]
        if live.size and np.max(np.abs(np.sqrt(np.sum(live * live, axis=1)) - 1.0)) > NORM_TOL:
            raise InvalidDatabaseError(f"subspace {s.id} has a non-unit-norm feature")


def build_subspace(
    inputs: Sequence[np.ndarray],
    manifest: GeoManifest,
    id: int,
    name: str,
    k: int = K,
) -> Subspace:
    """Describe every frame and attach its floor tile.

    ``inputs`` items may be 2-D panoramas or 1-D circular profiles.
    """
    if len(inputs) == 0:
        raise DatabaseError(f"subspace {name!r}: no input frames")
    coords = interpolate_coords(manifest, len(inputs))
    feats = np.empty((len(inputs), k))
    deg = np.empty(len(inputs), dtype=bool)
    for t, item in enumerate(inputs):
        arr = np.asarray(item, dtype=np.float64)
        profile = extract_profile(arr) if arr.ndim == 2 else arr
        f = extract_feature(profile, k)
        feats[t] = f.coeffs
        deg[t] = f.degenerate
    return Subspace(id, name, feats, deg, coords)


def database_from_subspaces(subspaces: Sequence[Subspace], grid=None) -> FeatureDatabase:
    """Assemble a database; without ``grid`` the extent is the max coordinate + 1."""
    if not subspaces:
        raise DatabaseError("no subspaces")
    if grid is None:
        allc = np.concatenate([s.coords for s in subspaces])
        grid = (int(allc[:, 0].max()) + 1, int(allc[:, 1].max()) + 1)
    return FeatureDatabase(tuple(subspaces), int(grid[0]), int(grid[1]), k=subspaces[0].k)


def map_candidate_to_floor(subspace_id: int, frame_index: int, db: FeatureDatabase) -> FloorCoord:
    s = db.subspace(subspace_id)
    if not 0 <= frame_index < len(s):
        raise IndexError(f"frame {frame_index} out of range for subspace {subspace_id} ({len(s)} frames)")
    return s.coord(frame_index)


def _record_dtype(k: int) -> np.dtype:
    return np.dtype([("x", "<i4"), ("y", "<i4"), ("coeffs", "<f8", (k,)), ("degenerate", "u1")])


def dumps_database(db: FeatureDatabase) -> bytes:
    parts = [MAGIC, _HEADER.pack(db.format_version, db.k, db.grid_width, db.grid_height, len(db.subspaces))]
    rec_t = _record_dtype(db.k)
    for s in db.subspaces:
        name = s.name.encode("utf-8")
        if len(name) > 0xFFFF:
            raise DatabaseError(f"subspace name too long ({len(name)} bytes)")
        parts.append(struct.pack("<IH", s.id, len(name)))
        parts.append(name)
        parts.append(struct.pack("<I", len(s)))
        recs = np.empty(len(s), dtype=rec_t)
        recs["x"] = s.coords[:, 0]
        recs["y"] = s.coords[:, 1]
        recs["coeffs"] = s.features
        recs["degenerate"] = s.degenerate
        parts.append(recs.tobytes())
    return b"".join(parts)


def save_database(db: FeatureDatabase, path: str | Path) -> None:
    Path(path).write_bytes(dumps_database(db))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(
                f"file truncated while reading {what} (need {n} bytes at offset {self.pos}, "
                f"{len(self.buf) - self.pos} left)"
            )
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        st = struct.Struct(fmt)
        return st.unpack(self.take(st.size, what))


def loads_database(buf: bytes) -> FeatureDatabase:
    r = _Reader(buf)
    if len(buf) < len(MAGIC) or bytes(buf[:len(MAGIC)]) != MAGIC:
        raise MagicMismatchError(f"not an OMNIDB file (magic {bytes(buf[:len(MAGIC)])!r})")
    r.take(len(MAGIC), "magic")
    if len(buf) - r.pos >= 4:
        (version,) = struct.unpack_from("<I", buf, r.pos)
        if version != FORMAT_VERSION:
            raise VersionMismatchError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    version, k, gw, gh, n_s = r.unpack("<5I", "header")
    if k < 1:
        raise InvalidDatabaseError("K must be positive")
    rec_t = _record_dtype(k)
    subspaces = []
    for i in range(n_s):
        sid, name_len = r.unpack("<IH", f"subspace {i + 1} header")
        try:
            name = bytes(r.take(name_len, f"subspace {i + 1} name")).decode("utf-8")
        except UnicodeDecodeError:
            raise InvalidDatabaseError(f"subspace {sid} name is not valid UTF-8") from None
        (n,) = r.unpack("<I", f"subspace {sid} frame count")
        raw = r.take(n * rec_t.itemsize, f"subspace {sid} frames")
        recs = np.frombuffer(raw, dtype=rec_t)
        if np.any(recs["degenerate"] > 1):
            raise InvalidDatabaseError(f"subspace {sid} has a degenerate flag other than 0/1")
        coords = np.stack([recs["x"], recs["y"]], axis=1).astype(np.int32)
        subspaces.append(Subspace(sid, name, recs["coeffs"].astype(np.float64),
                                  recs["degenerate"].astype(bool), coords))
    if r.pos != len(buf):
        raise InvalidDatabaseError(f"{len(buf) - r.pos} trailing bytes after the last subspace")
    return FeatureDatabase(tuple(subspaces), gw, gh, k=k, format_version=version)


def load_database(path: str | Path) -> FeatureDatabase:
    return loads_database(Path(path).read_bytes())


def check_query_dimension(db: FeatureDatabase, k: int) -> None:
    if k != db.k:
        raise DimensionMismatchError(f"query descriptors have K={k}, database has K={db.k}")
