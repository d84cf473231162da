import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fourdvc import normalize as nz
from fourdvc.errors import DegenerateFeatureError, UsageError

finite = st.floats(-1e4, 1e4, allow_nan=False)


@pytest.mark.parametrize("kind", nz.KINDS)
def test_round_trip(kind, rng):
    x = rng.normal(3.0, 5.0, (200, 6))
    spec = nz.fit(kind, x)
    assert np.allclose(nz.invert(spec, nz.apply(spec, x)), x, atol=1e-9)


@given(arrays(np.float64, st.tuples(st.integers(2, 30), st.integers(1, 5)), elements=finite),
       st.sampled_from(nz.KINDS))
@settings(max_examples=60, deadline=None)
def test_round_trip_property(x, kind):
    spread = x.max(0) - x.min(0)
    degenerate = spread == 0
    if kind == "zscore":
        degenerate |= x.std(0) == 0  # spread so small its square underflows
    if kind != "mean_subtract" and np.any(degenerate):
        with pytest.raises(DegenerateFeatureError):
            nz.fit(kind, x)
        return
    # relative round-off of the affine map scales with |x| / spread
    scale = np.abs(x).max() / max(spread.min(), 1e-300) if kind != "mean_subtract" else 1.0
    spec = nz.fit(kind, x)
    back = nz.invert(spec, nz.apply(spec, x))
    assert np.allclose(back, x, rtol=0, atol=1e-12 * max(scale, 1.0) * max(np.abs(x).max(), 1.0))


def test_minmax_extremes_map_exactly(rng):
    x = rng.uniform(-7, 13, (50, 4))
    y = nz.apply(nz.fit("minmax", x), x)
    assert np.all(y.min(0) == -1.0)
    assert np.all(y.max(0) == 1.0)


def test_minmax_target_zero_one(rng):
    x = rng.uniform(0, 255, (40, 3))
    y = nz.apply(nz.fit("minmax", x, (0.0, 1.0)), x)
    assert np.all(y.min(0) == 0.0) and np.all(y.max(0) == 1.0)


def test_zscore_uses_population_std():
    x = np.array([[1.0], [3.0]])
    spec = nz.fit("zscore", x)
    assert spec.std[0] == 1.0
    assert nz.apply(spec, x).ravel().tolist() == [-1.0, 1.0]


def test_extrapolates_without_clamping():
    spec = nz.fit("minmax", np.array([[0.0], [10.0]]))
    assert nz.apply(spec, np.array([20.0]))[0] == 3.0


@pytest.mark.parametrize("kind", ["zscore", "minmax"])
def test_constant_feature_rejected(kind):
    x = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
    with pytest.raises(DegenerateFeatureError) as ei:
        nz.fit(kind, x)
    assert ei.value.feature == 1


def test_constant_feature_fine_for_mean_subtract():
    x = np.array([[1.0, 5.0], [2.0, 5.0]])
    assert np.array_equal(nz.apply(nz.fit("mean_subtract", x), x)[:, 1], [0.0, 0.0])


@pytest.mark.parametrize("bad", [np.zeros((1, 3)), np.array([[np.nan], [1.0]])])
def test_fit_input_validation(bad):
    with pytest.raises(UsageError):
        nz.fit("zscore", bad)


def test_unknown_kind():
    with pytest.raises(UsageError):
        nz.NormalizationSpec("robust", [0], [1], [0], [1])


def test_spec_json_round_trip(rng):
    spec = nz.fit("minmax", rng.normal(size=(10, 3)))
    assert nz.NormalizationSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


def test_mesh_flatten_round_trip(small_corpus):
    frame = small_corpus[0][0]
    vec = nz.flatten_mesh(frame)
    assert vec.shape == (3 * frame.vertex_count,)
    assert nz.unflatten_mesh(vec, frame.faces, frame.frame_index) == frame
