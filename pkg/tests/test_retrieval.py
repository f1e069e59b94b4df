import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omniloc.feature import K, DimensionMismatchError, OmniFeature
from omniloc.geodb import FeatureDatabase, Subspace
from omniloc.retrieval import (
    QueryBundle,
    RetrievalParams,
    parallel_retrieve,
    query_subspace,
    select_nearby_frames,
    sequential_retrieve_reference,
)


def unit_rows(rng, n, k=K):
    f = np.abs(rng.normal(size=(n, k)))
    return f / np.linalg.norm(f, axis=1, keepdims=True)


def make_db(rng, sizes, k=K, grid=(30, 30), dup_rows=False):
    subs = []
    for i, n in enumerate(sizes, start=1):
        f = unit_rows(rng, n, k)
        if dup_rows and n > 3:
            # exact duplicates create distance ties
            f[n // 2] = f[1]
            f[n - 1] = f[1]
        xy = np.stack([rng.integers(0, grid[0], n), rng.integers(0, grid[1], n)], axis=1)
        subs.append(Subspace(i, f"s{i}", f, np.zeros(n, bool), xy))
    return FeatureDatabase(tuple(subs), grid[0], grid[1], k=k)


def bundle_of(rows):
    return QueryBundle(tuple(OmniFeature(r) for r in rows), center_index=len(rows) // 2)


def as_tuples(cands):
    return [(c.subspace_id, c.frame_index, c.query_frame, c.distance, c.coord) for c in cands]


def sort_all_oracle(q, s, n):
    scored = []
    for t in range(len(s)):
        acc = 0.0
        for a, b in zip(s.features[t].tolist(), q.coeffs.tolist()):
            acc += (a - b) * (a - b)
        scored.append((math.sqrt(acc), t))
    return sorted(scored)[:n]


video = [OmniFeature(np.full(K, i, float)) for i in range(20)]


def window(bundle):
    return [int(f.coeffs[0]) for f in bundle.frames]


def test_select_nearby_frames():
    b = select_nearby_frames(video, 5, 3)
    assert window(b) == [4, 5, 6] and b.center_index == 1
    b = select_nearby_frames(video, 0, 5)
    assert window(b) == [0, 1, 2, 3, 4] and b.center_index == 0
    assert window(select_nearby_frames(video, 19, 5)) == [15, 16, 17, 18, 19]
    assert window(select_nearby_frames(video, 7, 1)) == [7]
    assert len(select_nearby_frames(video[:4], 2, 11)) == 4


@pytest.mark.parametrize("m,M", [(20, 3), (-1, 3), (0, 4), (0, 0)])
def test_select_nearby_frames_errors(m, M):
    with pytest.raises((IndexError, ValueError)):
        select_nearby_frames(video, m, M)


def test_empty_bundle_rejected():
    with pytest.raises(ValueError):
        QueryBundle(())


def test_self_match_first():
    rng = np.random.default_rng(0)
    db = make_db(rng, [50])
    s = db.subspaces[0]
    res = query_subspace(s.feature(17), s, 15)
    assert res[0].frame_index == 17 and res[0].distance == 0.0


def test_undersized_subspace():
    rng = np.random.default_rng(1)
    s = make_db(rng, [7]).subspaces[0]
    assert len(query_subspace(OmniFeature(unit_rows(rng, 1)[0]), s, 15)) == 7


def test_query_subspace_matches_sort_oracle():
    rng = np.random.default_rng(2)
    s = make_db(rng, [1000], dup_rows=True).subspaces[0]
    for q in [s.feature(1), OmniFeature(unit_rows(rng, 1)[0])]:
        got = [(c.distance, c.frame_index) for c in query_subspace(q, s, 15)]
        assert got == sort_all_oracle(q, s, 15)


def test_duplicates_adjacent_in_rank():
    rng = np.random.default_rng(3)
    s = make_db(rng, [40], dup_rows=True).subspaces[0]
    res = query_subspace(s.feature(1), s, 3)
    assert [c.frame_index for c in res] == [1, 20, 39]
    assert all(c.distance == 0.0 for c in res)


def test_dimension_mismatch():
    rng = np.random.default_rng(4)
    db = make_db(rng, [10])
    with pytest.raises(DimensionMismatchError):
        query_subspace(OmniFeature(np.zeros(32)), db.subspaces[0], 5)
    with pytest.raises(DimensionMismatchError):
        parallel_retrieve(bundle_of(np.zeros((3, 32))), db)


def test_cardinality_825():
    rng = np.random.default_rng(5)
    db = make_db(rng, [60, 40, 15, 90, 33])
    out = parallel_retrieve(bundle_of(unit_rows(rng, 11)), db, RetrievalParams(n=15))
    assert len(out) == 11 * 5 * 15 == 825


def test_single_global_nearest():
    rng = np.random.default_rng(6)
    db = make_db(rng, [200])
    q = OmniFeature(unit_rows(rng, 1)[0])
    (c,) = parallel_retrieve(QueryBundle((q,)), db, RetrievalParams(n=1))
    d = np.sqrt(((db.subspaces[0].features - q.coeffs) ** 2).sum(axis=1))
    assert c.frame_index == int(np.argmin(d))


def test_output_order_and_monotone():
    rng = np.random.default_rng(7)
    db = make_db(rng, [30, 5, 20])
    out = parallel_retrieve(bundle_of(unit_rows(rng, 3)), db, RetrievalParams(n=10))
    keys = [(c.query_frame, c.subspace_id) for c in out]
    assert keys == sorted(keys)
    assert len(out) == 3 * (10 + 5 + 10)
    for m in range(3):
        for sid in (1, 2, 3):
            d = [c.distance for c in out if c.query_frame == m and c.subspace_id == sid]
            assert d == sorted(d)


@pytest.mark.parametrize("budget", [1, 2, 8])
def test_parallel_equals_sequential(budget):
    rng = np.random.default_rng(8)
    db = make_db(rng, [120, 2500, 40, 15, 300], dup_rows=True)
    for _ in range(5):
        rows = unit_rows(rng, int(rng.choice([1, 3, 5, 11])))
        rows[0] = db.subspaces[1].features[1]
        b = bundle_of(rows)
        p = RetrievalParams(n=15, worker_budget=budget)
        assert as_tuples(parallel_retrieve(b, db, p)) == as_tuples(sequential_retrieve_reference(b, db, p))


def test_large_subspace_split_is_schedule_independent():
    rng = np.random.default_rng(9)
    db = make_db(rng, [20_000, 17_000], dup_rows=True)
    b = bundle_of(np.vstack([db.subspaces[0].features[1], unit_rows(rng, 2)]))
    outs = [as_tuples(parallel_retrieve(b, db, RetrievalParams(n=15, worker_budget=w))) for w in (1, 2, 3, 8, 16)]
    assert all(o == outs[0] for o in outs)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 20), m=st.integers(1, 4))
def test_cardinality_law(seed, n, m):
    rng = np.random.default_rng(seed)
    sizes = rng.integers(1, 40, size=int(rng.integers(1, 5))).tolist()
    db = make_db(rng, sizes)
    out = parallel_retrieve(bundle_of(unit_rows(rng, m)), db, RetrievalParams(n=n, worker_budget=2))
    assert len(out) == m * sum(min(n, s) for s in sizes)


def test_worker_env_override(monkeypatch):
    monkeypatch.setenv("OMNILOC_WORKERS", "3")
    assert RetrievalParams().workers() == 3
    assert RetrievalParams(worker_budget=5).workers() == 5
    with pytest.raises(ValueError):
        RetrievalParams(n=0)
