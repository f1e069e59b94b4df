import math

import pytest

from omniloc.synthbench import PathSpec, SynthSpec, build_training_db


def strip_timing(d):
    d = dict(d)
    d.pop("timing_ms", None)
    return d


def assert_close_tree(a, b, tol=1e-9, path="$"):
    """Structural equality; reals compared within tol."""
    if isinstance(a, dict):
        assert isinstance(b, dict) and a.keys() == b.keys(), path
        for k in a:
            assert_close_tree(a[k], b[k], tol, f"{path}.{k}")
    elif isinstance(a, list):
        assert isinstance(b, list) and len(a) == len(b), path
        for i, (x, y) in enumerate(zip(a, b)):
            assert_close_tree(x, y, tol, f"{path}[{i}]")
    elif isinstance(a, float) and not isinstance(b, bool):
        assert isinstance(b, (int, float)) and abs(a - b) <= tol, f"{path}: {a} != {b}"
    else:
        assert a == b, f"{path}: {a!r} != {b!r}"


def tiny_spec():
    paths = [PathSpec(f"train{i + 1}", [[4, y], [24, y]]) for i, y in enumerate((4, 8, 12, 16, 20))]
    paths.append(PathSpec("test1", [[23, 13], [5, 13]], role="test", heading_offset=math.pi / 2, heading_jitter=0.5))
    return SynthSpec(grid_width=30, grid_height=25, n_landmarks=40, paths=paths)


@pytest.fixture(scope="session")
def tiny_db():
    return build_training_db(tiny_spec())
