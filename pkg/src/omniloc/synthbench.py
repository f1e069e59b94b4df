"""Seeded synthetic floors and the accuracy/throughput experiment.

The world is a rectangular floor whose walls carry random "landmarks":
bright or dark vertical features of some physical width.  A panoramic
camera at a floor point sees each landmark as a smooth bump at its
bearing, narrower and fainter with distance.  Scene similarity is
simulated by copying a fraction of the landmarks to the far side of the
floor, so distant places share parts of their appearance.

All randomness derives from ``SynthSpec.seed``; per-position lighting
noise uses a substream keyed by the quantised position, so rendering is a
pure function of (spec, position, heading).
"""
from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .aggregation import AggregationParams
from .feature import K, extract_feature, write_profiles
from .geodb import (TILE_M, FeatureDatabase, GeoManifest, build_subspace, database_from_subspaces,
                    save_database, write_manifest)
from .pipeline import localize
from .retrieval import RetrievalParams, select_nearby_frames

PROFILE_WIDTH = 256
# narrowest bump, in columns; keeps rendered profiles effectively band-limited
_MIN_BUMP_SIGMA = 2.5
_NOISE_HARMONICS = 64


@dataclass
class PathSpec:
    name: str
    points: list  # polyline vertices in tile units, [[x, y], ...]
    role: str = "train"  # "train" or "test"
    spacing: float = 1.0  # tiles between consecutive frames
    heading_offset: float = 0.0  # camera yaw relative to direction of travel (radians)
    heading_jitter: float = 0.0  # uniform per-frame yaw jitter amplitude (radians)

    def __post_init__(self):
        if self.role not in ("train", "test"):
            raise ValueError(f"path {self.name!r}: role must be 'train' or 'test'")
        if len(self.points) < 2:
            raise ValueError(f"path {self.name!r}: needs at least two points")
        if not self.spacing > 0:
            raise ValueError(f"path {self.name!r}: spacing must be positive")
        self.points = [[float(x), float(y)] for x, y in self.points]


@dataclass
class SynthSpec:
    grid_width: int = 80
    grid_height: int = 40
    n_landmarks: int = 120
    landmark_width: tuple = (0.3, 1.5)  # physical half-width range, tiles
    contrast: float = 0.35
    falloff: float = 15.0  # distance (tiles) at which landmark amplitude halves
    noise_sigma: float = 0.06
    duplication_rate: float = 0.2
    seed: int = 7
    paths: list = field(default_factory=list)

    def __post_init__(self):
        self.paths = [p if isinstance(p, PathSpec) else PathSpec(**p) for p in self.paths]
        self.landmark_width = tuple(self.landmark_width)
        if not 0.0 <= self.duplication_rate <= 1.0:
            raise ValueError("duplication_rate must be in [0, 1]")
        for p in self.paths:
            for x, y in p.points:
                if not (0 <= x <= self.grid_width - 1 and 0 <= y <= self.grid_height - 1):
                    raise ValueError(f"path {p.name!r} leaves the {self.grid_width}x{self.grid_height} grid")

    @property
    def training_paths(self) -> list[PathSpec]:
        return [p for p in self.paths if p.role == "train"]

    @property
    def test_paths(self) -> list[PathSpec]:
        return [p for p in self.paths if p.role == "test"]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SynthSpec":
        return cls(**json.loads(text))

    @classmethod
    def load(cls, path: str | Path) -> "SynthSpec":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def default_spec(**overrides) -> SynthSpec:
    """Five parallel training walks along a corridor plus one offset test walk.

    The test walk runs the opposite way with the camera turned sideways,
    so retrieval has to rely on heading invariance.
    """
    # frames every 0.1 tile; walks 5 tiles apart so each circle reaches a neighbour walk
    paths = [PathSpec(f"train{i + 1}", [[8, y], [72, y]], spacing=0.1) for i, y in enumerate((10, 15, 20, 25, 30))]
    paths.append(PathSpec("test1", [[70, 21], [10, 21]], role="test", spacing=0.1,
                          heading_offset=math.pi / 2, heading_jitter=0.6))
    kw = dict(paths=paths)
    kw.update(overrides)
    return SynthSpec(**kw)


@dataclass(frozen=True)
class Landmark:
    x: float
    y: float
    half_width: float
    amplitude: float


def make_landmarks(spec: SynthSpec) -> list[Landmark]:
    rng = np.random.default_rng([spec.seed, 0])
    w, h = spec.grid_width - 1, spec.grid_height - 1
    perimeter = 2 * (w + h)
    out = []
    for _ in range(spec.n_landmarks):
        s = rng.uniform(0, perimeter)
        if s < w:
            x, y = s, 0.0
        elif s < w + h:
            x, y = w, s - w
        elif s < 2 * w + h:
            x, y = s - w - h, h
        else:
            x, y = 0.0, s - 2 * w - h
        amp = spec.contrast * rng.uniform(0.4, 1.0) * rng.choice([-1.0, 1.0])
        out.append(Landmark(x, y, rng.uniform(*spec.landmark_width), amp))
    n_dup = int(round(spec.duplication_rate * len(out)))
    for i in rng.choice(len(out), size=n_dup, replace=False):
        lm = out[i]
        # same wall, shifted half the floor length along x
        out.append(Landmark((lm.x + w / 2) % w if lm.y in (0.0, h) else lm.x,
                            lm.y if lm.y in (0.0, h) else (lm.y + h / 2) % h,
                            lm.half_width, lm.amplitude))
    return out


def _noise_coeffs(spec: SynthSpec, x: float, y: float) -> np.ndarray:
    qx, qy = int(round(x * 1000)), int(round(y * 1000))
    rng = np.random.default_rng([spec.seed, 1, qx, qy])
    return rng.normal(0.0, spec.noise_sigma / math.sqrt(_NOISE_HARMONICS), size=(2, _NOISE_HARMONICS))


def render_profile(
    spec: SynthSpec,
    position: Sequence[float],
    heading: float,
    landmarks: list[Landmark] | None = None,
    width: int = PROFILE_WIDTH,
) -> np.ndarray:
    """Circular profile seen from ``position`` (tile units) facing ``heading``.

    Column w looks toward world azimuth heading + 2*pi*w/width.  The
    world-frame profile is rendered once and then rotated, by np.roll for
    whole-column headings and by a Fourier phase shift otherwise, so the
    magnitude spectrum does not depend on heading.
    """
    x, y = float(position[0]), float(position[1])
    if not (0 <= x <= spec.grid_width - 1 and 0 <= y <= spec.grid_height - 1):
        raise ValueError(f"position {position} outside the grid")
    if landmarks is None:
        landmarks = make_landmarks(spec)
    az = 2 * math.pi * np.arange(width) / width
    signal = np.zeros(width)
    if landmarks:
        lm = np.array([(l.x, l.y, l.half_width, l.amplitude) for l in landmarks])
        dx, dy = lm[:, 0] - x, lm[:, 1] - y
        dist = np.hypot(dx, dy)
        keep = dist > 1e-9
        dist = dist[keep]
        bearing = np.arctan2(dy[keep], dx[keep])
        sigma = np.maximum(np.arctan2(lm[keep, 2], dist), _MIN_BUMP_SIGMA * 2 * math.pi / width)
        amp = lm[keep, 3] / (1.0 + dist / spec.falloff)
        # von Mises bumps: smooth and periodic in azimuth
        bumps = np.exp((np.cos(az[None, :] - bearing[:, None]) - 1.0) / (sigma * sigma)[:, None])
        signal += amp @ bumps
    if spec.noise_sigma > 0:
        c = _noise_coeffs(spec, x, y)
        kk = np.arange(1, _NOISE_HARMONICS + 1)[:, None]
        signal += c[0] @ np.cos(kk * az) + c[1] @ np.sin(kk * az)
    return rotate_profile(0.5 + 0.5 * np.tanh(signal), heading)


def rotate_profile(profile: np.ndarray, heading: float) -> np.ndarray:
    """Profile seen after turning by ``heading`` radians: out[w] = profile(w + shift)."""
    width = len(profile)
    shift = heading * width / (2 * math.pi)
    whole = round(shift)
    if abs(shift - whole) < 1e-9:
        return np.roll(profile, -whole)
    spec = np.fft.rfft(profile)
    spec *= np.exp(2j * math.pi * np.arange(len(spec)) * shift / width)
    return np.fft.irfft(spec, n=width)


@dataclass(frozen=True)
class PathSamples:
    positions: np.ndarray  # (n, 2) continuous tile coords
    headings: np.ndarray  # (n,)


def sample_path(spec: SynthSpec, path: PathSpec) -> PathSamples:
    pts = np.asarray(path.points, dtype=float)
    seg = np.diff(pts, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    n = int(math.floor(cum[-1] / path.spacing + 1e-9)) + 1
    s = np.arange(n) * path.spacing
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    frac = (s - cum[idx]) / np.where(seg_len[idx] > 0, seg_len[idx], 1.0)
    positions = pts[idx] + seg[idx] * frac[:, None]
    travel = np.arctan2(seg[idx, 1], seg[idx, 0])
    # per-path jitter stream, keyed by the path's index in SynthSpec.paths
    rng = np.random.default_rng([spec.seed, 2, spec.paths.index(path)])
    jitter = rng.uniform(-path.heading_jitter, path.heading_jitter, size=n) if path.heading_jitter else 0.0
    return PathSamples(positions, travel + path.heading_offset + jitter)


def render_path(spec: SynthSpec, path: PathSpec, landmarks=None) -> tuple[PathSamples, list[np.ndarray]]:
    if landmarks is None:
        landmarks = make_landmarks(spec)
    samples = sample_path(spec, path)
    profiles = [render_profile(spec, p, h, landmarks) for p, h in zip(samples.positions, samples.headings)]
    return samples, profiles


def path_manifest(samples: PathSamples) -> GeoManifest:
    """One anchor per frame at its nearest tile."""
    tiles = np.floor(samples.positions + 0.5).astype(int)
    return GeoManifest(tuple((i, int(x), int(y)) for i, (x, y) in enumerate(tiles)))


def build_training_db(spec: SynthSpec, n_paths: int | None = None, landmarks=None) -> FeatureDatabase:
    if landmarks is None:
        landmarks = make_landmarks(spec)
    train = spec.training_paths[:n_paths] if n_paths else spec.training_paths
    subs = []
    for i, path in enumerate(train, start=1):
        samples, profiles = render_path(spec, path, landmarks)
        subs.append(build_subspace(profiles, path_manifest(samples), i, path.name))
    return database_from_subspaces(subs, grid=(spec.grid_width, spec.grid_height))


def write_dataset(spec: SynthSpec, out_dir: str | Path) -> dict:
    """Profiles, manifests, ground truth and a prebuilt database under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    landmarks = make_landmarks(spec)
    written = {"spec": str(out / "spec.json"), "paths": []}
    (out / "spec.json").write_text(spec.to_json(), encoding="utf-8")
    for path in spec.paths:
        samples, profiles = render_path(spec, path, landmarks)
        write_profiles(out / f"{path.name}.profiles", profiles)
        write_manifest(out / f"{path.name}.csv", path_manifest(samples))
        with open(out / f"{path.name}.truth.csv", "w", encoding="utf-8") as fh:
            fh.write("frame,x,y,heading\n")
            for i, ((x, y), hd) in enumerate(zip(samples.positions, samples.headings)):
                fh.write(f"{i},{x!r},{y!r},{hd!r}\n")
        written["paths"].append({"name": path.name, "role": path.role, "frames": len(profiles)})
    db = build_training_db(spec, landmarks=landmarks)
    save_database(db, out / "train.omnidb")
    written["db"] = str(out / "train.omnidb")
    return written


@dataclass
class EvalReport:
    errors_m: list
    median_error_m: float
    p90_error_m: float
    frac_low_confidence: float
    localizations_per_sec: float
    expected_candidates: int
    candidate_counts: list
    audit_ok: bool
    n_queries: int = 0
    params: dict = field(default_factory=dict)

    def to_dict(self, include_timing: bool = True) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("localizations_per_sec")
        return d


def _evaluate(db, query_paths, M, rparams, aparams):
    errors, lows, counts, tiles = [], [], [], []
    elapsed = 0.0
    for feats, truth in query_paths:
        for m in range(len(feats)):
            bundle = select_nearby_frames(feats, m, M)
            t0 = time.perf_counter()
            loc = localize(db, bundle, rparams, aparams)
            elapsed += time.perf_counter() - t0
            c = loc.estimate.coord
            errors.append(TILE_M * math.hypot(c.x - truth[m][0], c.y - truth[m][1]))
            lows.append(loc.estimate.low_confidence)
            counts.append(len(loc.candidates))
            tiles.append(max(abs(c.x - truth[m][0]), abs(c.y - truth[m][1])))
    return errors, lows, counts, tiles, elapsed


def _report(errors, lows, counts, elapsed, expected, params) -> EvalReport:
    errs = sorted(errors)
    p90 = float(np.quantile(np.array(errs), 0.9, method="higher")) if errs else 0.0
    return EvalReport(
        errors_m=list(errors),
        median_error_m=float(statistics.median(errs)) if errs else 0.0,
        p90_error_m=p90,
        frac_low_confidence=float(np.mean(lows)) if lows else 0.0,
        localizations_per_sec=len(errors) / elapsed if elapsed > 0 else float("inf"),
        expected_candidates=expected,
        candidate_counts=list(counts),
        audit_ok=all(c == expected for c in counts),
        n_queries=len(errors),
        params=params,
    )


def run_experiment(
    spec: SynthSpec,
    M: int = 11,
    N: int = 15,
    P: int = 5,
    aparams: AggregationParams = AggregationParams(),
    worker_budget: int | None = None,
) -> EvalReport:
    """Model P training walks, localize every frame of every test walk."""
    if len(spec.training_paths) < P:
        raise ValueError(f"spec has {len(spec.training_paths)} training paths, {P} required")
    if not spec.test_paths:
        raise ValueError("spec has no test path")
    landmarks = make_landmarks(spec)
    db = build_training_db(spec, P, landmarks)
    queries = []
    for path in spec.test_paths:
        samples, profiles = render_path(spec, path, landmarks)
        queries.append(([extract_feature(p, db.k) for p in profiles], samples.positions))
    rparams = RetrievalParams(n=N, worker_budget=worker_budget)
    errors, lows, counts, _, elapsed = _evaluate(db, queries, M, rparams, aparams)
    expected = M * sum(min(N, len(s)) for s in db.subspaces)
    return _report(errors, lows, counts, elapsed, expected, {"M": M, "N": N, "P": P})


def run_self_queries(
    spec: SynthSpec,
    M: int = 11,
    N: int = 15,
    P: int = 5,
    aparams: AggregationParams = AggregationParams(),
) -> tuple[EvalReport, list[int]]:
    """Query each training walk against the database built from it.

    Returns the report and, per query, the Chebyshev tile distance between
    the estimate and the frame's own stored tile.  Queries are the stored
    descriptors verbatim, so no fresh noise is drawn.
    """
    landmarks = make_landmarks(spec)
    db = build_training_db(spec, P, landmarks)
    queries = [([s.feature(t) for t in range(len(s))], s.coords) for s in db.subspaces]
    errors, lows, counts, tile_err, elapsed = _evaluate(db, queries, M, RetrievalParams(n=N), aparams)
    expected = M * sum(min(N, len(s)) for s in db.subspaces)
    return _report(errors, lows, counts, elapsed, expected, {"M": M, "N": N, "P": P}), tile_err
