"""Newline-delimited JSON localization service over TCP.

Request (one JSON object per line)::

    {"id": <any>, "features": [[K reals], ...],            # 1..64 frames
     "center_index": <int, optional>,
     "params": {"N": 15, "top_c": 10, "toler_per": 0.2, "radius_m": 3.0}}  # all optional

Success response: ``{"id": ..., "ok": true, "x_m": ..., "y_m": ..., "confidence": ...,
"low_confidence": ..., "ranked_tiles": [...], "best_match": {...}, "timing_ms": ...}``.

Error response: ``{"id": ..., "ok": false, "error": {"code": ..., "message": ...}}``
with code one of ``malformed_json``, ``invalid_request``, ``dimension_mismatch``,
``internal_error``.  The connection stays open after an error.
"""
from __future__ import annotations

import json
import logging
import math
import socket
import socketserver
import threading
import time
from typing import Any

import numpy as np

from .aggregation import AggregationParams
from .feature import DimensionMismatchError, OmniFeature
from .geodb import FeatureDatabase
from .pipeline import localization_to_dict, localize
from .retrieval import QueryBundle, RetrievalParams

log = logging.getLogger(__name__)

MAX_FRAMES = 64
_PARAM_KEYS = {"N", "top_c", "toler_per", "radius_m"}


class RequestError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


def _real(v, what: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise RequestError("invalid_request", f"{what} must be a finite number")
    return float(v)


def _int(v, what: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise RequestError("invalid_request", f"{what} must be an integer")
    return v


def parse_request(obj: Any, k: int) -> tuple[QueryBundle, dict]:
    """Validate a decoded request; returns the bundle and parameter overrides."""
    if not isinstance(obj, dict):
        raise RequestError("invalid_request", "request must be a JSON object")
    feats = obj.get("features")
    if not isinstance(feats, list) or not 1 <= len(feats) <= MAX_FRAMES:
        raise RequestError("invalid_request", f"'features' must be a list of 1..{MAX_FRAMES} frames")
    rows = []
    for i, row in enumerate(feats):
        if not isinstance(row, list):
            raise RequestError("invalid_request", f"features[{i}] must be a list of numbers")
        vals = [_real(v, f"features[{i}]") for v in row]
        if len(vals) != k:
            raise RequestError("dimension_mismatch", f"features[{i}] has {len(vals)} values, database K={k}")
        rows.append(vals)
    frames = []
    for i, vals in enumerate(rows):
        arr = np.array(vals, dtype=np.float64)
        if np.any(arr < 0):
            raise RequestError("invalid_request", f"features[{i}] has negative coefficients")
        frames.append(OmniFeature(arr, degenerate=not np.any(arr)))
    center = obj.get("center_index", len(frames) // 2)
    center = _int(center, "center_index")
    if not 0 <= center < len(frames):
        raise RequestError("invalid_request", "center_index out of range")

    params = obj.get("params") or {}
    if not isinstance(params, dict):
        raise RequestError("invalid_request", "'params' must be an object")
    unknown = set(params) - _PARAM_KEYS
    if unknown:
        raise RequestError("invalid_request", f"unknown params: {sorted(unknown)}")
    over = {}
    if "N" in params:
        over["N"] = _int(params["N"], "params.N")
    if "top_c" in params:
        over["top_c"] = _int(params["top_c"], "params.top_c")
    for key in ("toler_per", "radius_m"):
        if key in params:
            over[key] = _real(params[key], f"params.{key}")
    return QueryBundle(tuple(frames), center_index=center), over


def make_params(over: dict, worker_budget: int | None = None) -> tuple[RetrievalParams, AggregationParams]:
    try:
        rp = RetrievalParams(n=over.get("N", 15), worker_budget=worker_budget)
        ap = AggregationParams(
            top_c=over.get("top_c", 10),
            toler_per=over.get("toler_per", 0.20),
            radius_m=over.get("radius_m", 3.0),
        )
    except ValueError as exc:
        raise RequestError("invalid_request", str(exc)) from None
    return rp, ap


def handle_line(line: bytes | str, db: FeatureDatabase, worker_budget: int | None = None) -> dict:
    """Turn one request line into exactly one response object."""
    t0 = time.perf_counter()
    rid = None
    try:
        try:
            obj = json.loads(line)
        except (ValueError, UnicodeDecodeError) as exc:
            raise RequestError("malformed_json", f"cannot parse request: {exc}") from None
        if isinstance(obj, dict):
            rid = obj.get("id")
        bundle, over = parse_request(obj, db.k)
        rp, ap = make_params(over, worker_budget)
        try:
            loc = localize(db, bundle, rp, ap)
        except DimensionMismatchError as exc:
            raise RequestError("dimension_mismatch", str(exc)) from None
        resp = {"id": rid, "ok": True}
        resp.update(localization_to_dict(loc))
        resp["timing_ms"]["total"] = (time.perf_counter() - t0) * 1e3
        return resp
    except RequestError as exc:
        return {"id": rid, "ok": False, "error": {"code": exc.code, "message": exc.message}}
    except Exception as exc:  # keep the connection alive whatever happens
        log.exception("request failed")
        return {"id": rid, "ok": False, "error": {"code": "internal_error", "message": str(exc)}}


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        server: LocalizationServer = self.server  # type: ignore[assignment]
        for line in self.rfile:
            if not line.strip():
                continue
            resp = handle_line(line, server.db, server.worker_budget)
            self.wfile.write((json.dumps(resp) + "\n").encode("utf-8"))
            self.wfile.flush()


class LocalizationServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], db: FeatureDatabase, worker_budget: int | None = None):
        self.db = db
        self.worker_budget = worker_budget
        super().__init__(address, _Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start_background(self) -> threading.Thread:
        th = threading.Thread(target=self.serve_forever, name="omniloc-server", daemon=True)
        th.start()
        return th


def parse_bind(addr: str, default_port: int = 7531) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep:
        return addr or "127.0.0.1", default_port
    return host or "127.0.0.1", int(port)


class LocateClient:
    """Blocking client; one request in flight per connection."""

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.rfile = self.sock.makefile("rb")

    def send_raw(self, line: bytes) -> dict:
        self.sock.sendall(line.rstrip(b"\n") + b"\n")
        resp = self.rfile.readline()
        if not resp:
            raise ConnectionError("server closed the connection")
        return json.loads(resp)

    def locate(self, features, id=None, params: dict | None = None, center_index: int | None = None) -> dict:
        req: dict[str, Any] = {"id": id, "features": [np.asarray(f, dtype=float).tolist() for f in features]}
        if params:
            req["params"] = params
        if center_index is not None:
            req["center_index"] = center_index
        return self.send_raw(json.dumps(req).encode("utf-8"))

    def close(self):
        self.rfile.close()
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
