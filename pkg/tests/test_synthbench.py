import json
import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omniloc.feature import extract_feature
from omniloc.synthbench import (
    Landmark,
    PathSpec,
    SynthSpec,
    build_training_db,
    default_spec,
    make_landmarks,
    path_manifest,
    render_profile,
    rotate_profile,
    run_experiment,
    run_self_queries,
    sample_path,
)


def small_spec(**kw):
    paths = [PathSpec(f"train{i + 1}", [[4, y], [24, y]]) for i, y in enumerate((4, 8, 12, 16, 20))]
    paths.append(PathSpec("test1", [[23, 13], [5, 13]], role="test", heading_offset=math.pi / 2, heading_jitter=0.5))
    base = dict(grid_width=30, grid_height=25, n_landmarks=40, paths=paths)
    base.update(kw)
    return SynthSpec(**base)


def test_no_landmarks_no_noise_is_constant():
    spec = small_spec(n_landmarks=0, noise_sigma=0.0)
    p = render_profile(spec, (10.0, 10.0), 0.3, make_landmarks(spec))
    assert np.all(p == p[0])
    assert extract_feature(p).degenerate


def test_quarter_turn_is_quarter_roll():
    spec = small_spec(noise_sigma=0.0)
    east = [Landmark(25.0, 10.0, 1.0, 0.3)]
    p0 = render_profile(spec, (10.0, 10.0), 0.0, east)
    p1 = render_profile(spec, (10.0, 10.0), math.pi / 2, east)
    assert np.argmax(p0) == 0
    np.testing.assert_allclose(p1, np.roll(p0, -64), atol=1e-12)


def test_fractional_rotation_composes():
    # a real signal cannot carry a fractional phase at Nyquist, so stay below it
    c = np.random.default_rng(0).normal(size=129) * (np.arange(129) < 128)
    p = np.fft.irfft(c, n=256)
    once = rotate_profile(p, 0.37)
    twice = rotate_profile(rotate_profile(p, 0.2), 0.17)
    np.testing.assert_allclose(once, twice, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(x=st.floats(1, 28), y=st.floats(1, 23), h1=st.floats(-10, 10), h2=st.floats(-10, 10))
def test_renderer_heading_invariance(x, y, h1, h2):
    spec = small_spec()
    lm = make_landmarks(spec)
    a = extract_feature(render_profile(spec, (x, y), h1, lm)).coeffs
    b = extract_feature(render_profile(spec, (x, y), h2, lm)).coeffs
    assert np.max(np.abs(a - b)) <= 1e-6


def test_render_is_deterministic_and_bounded():
    spec = small_spec()
    a = render_profile(spec, (7.5, 3.25), 1.0)
    b = render_profile(spec, (7.5, 3.25), 1.0)
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0 and a.max() <= 1


def test_render_outside_grid():
    with pytest.raises(ValueError):
        render_profile(small_spec(), (40.0, 1.0), 0.0)


def test_duplicated_landmarks():
    spec = small_spec(duplication_rate=0.2)
    assert len(make_landmarks(spec)) == 48
    assert len(make_landmarks(small_spec(duplication_rate=0.0))) == 40


def test_sample_path_and_manifest():
    spec = small_spec()
    s = sample_path(spec, spec.paths[0])
    assert len(s.positions) == 21
    np.testing.assert_allclose(s.headings, 0.0)
    m = path_manifest(s)
    assert m.rows[0] == (0, 4, 4) and m.rows[-1] == (20, 24, 4)


def test_spec_json_roundtrip(tmp_path):
    spec = default_spec()
    (tmp_path / "s.json").write_text(spec.to_json())
    assert SynthSpec.load(tmp_path / "s.json") == spec
    d = json.loads(spec.to_json())
    d["paths"][0]["points"] = [[0, 0], [500, 0]]
    with pytest.raises(ValueError):
        SynthSpec(**d)


def test_audit_825_and_determinism():
    spec = small_spec()
    a = run_experiment(spec, M=11, N=15, P=5)
    b = run_experiment(spec, M=11, N=15, P=5)
    assert a.audit_ok and set(a.candidate_counts) == {825}
    assert a.to_dict(include_timing=False) == b.to_dict(include_timing=False)
    assert all(e >= 0 for e in a.errors_m)


def test_audit_law_with_short_subspace():
    spec = small_spec()
    spec.paths[4] = PathSpec("short", [[4, 20], [10, 20]])
    db = build_training_db(spec, 5)
    assert len(db.subspaces[4]) == 7
    r = run_experiment(spec, M=11, N=15, P=5)
    assert r.expected_candidates == 11 * (4 * 15 + 7)
    assert r.audit_ok


def test_memorization():
    # the test walk replays the training walk; single hit per query leaves no ties
    walk = [[4, 12], [24, 12]]
    spec = small_spec(noise_sigma=0.0, paths=[PathSpec("train1", walk), PathSpec("test1", walk, role="test")])
    r = run_experiment(spec, M=1, N=1, P=1)
    assert r.median_error_m == 0.0
    _, tiles = run_self_queries(spec, M=1, N=1, P=1)
    assert statistics.median(tiles) == 0


def test_experiment_preconditions():
    spec = small_spec()
    with pytest.raises(ValueError):
        run_experiment(spec, P=6)
    with pytest.raises(ValueError):
        run_experiment(small_spec(paths=spec.training_paths))
