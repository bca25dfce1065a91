import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from capesynth.data_io import Dataset
from capesynth.errors import ConfigurationError
from capesynth.preprocess import (ColumnStats, clip_l2, preprocess_client, preprocess_with_stats,
                                  zscore_apply, zscore_fit)

finite_rows = arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 6)),
                     elements=st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False))


def test_zscore_standardizes_columns():
    rng = np.random.default_rng(0)
    features = rng.normal(loc=[3.0, -2.0], scale=[5.0, 0.1], size=(500, 2))
    scaled = zscore_apply(features, zscore_fit(features))
    np.testing.assert_allclose(scaled.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(scaled.std(axis=0), 1.0, rtol=1e-12)


def test_zscore_constant_column_maps_to_zero():
    features = np.array([[1.0, 7.0], [2.0, 7.0], [3.0, 7.0]])
    scaled = zscore_apply(features, zscore_fit(features))
    assert np.all(scaled[:, 1] == 0.0)


def test_zscore_uses_population_std():
    stats = zscore_fit(np.array([[0.0], [2.0]]))
    assert stats.stds.tolist() == [1.0]


def test_zscore_dimension_mismatch():
    stats = ColumnStats(np.zeros(3), np.ones(3))
    with pytest.raises(ConfigurationError):
        zscore_apply(np.zeros((2, 2)), stats)


def test_zscore_fit_rejects_empty():
    with pytest.raises(ConfigurationError):
        zscore_fit(np.zeros((0, 3)))


def test_clip_examples():
    np.testing.assert_allclose(clip_l2(np.array([3.0, 4.0]), 1.0), [0.6, 0.8])
    assert clip_l2(np.array([0.3, 0.4]), 1.0).tolist() == [0.3, 0.4]
    assert clip_l2(np.zeros(3), 2.0).tolist() == [0.0, 0.0, 0.0]


def test_clip_rejects_bad_threshold_and_values():
    with pytest.raises(ConfigurationError):
        clip_l2(np.ones(2), 0.0)
    with pytest.raises(ConfigurationError):
        clip_l2(np.array([np.nan, 1.0]), 1.0)


@given(finite_rows, st.floats(0.01, 100.0))
@settings(max_examples=60, deadline=None)
def test_clip_bounds_norm_and_is_idempotent(rows, c):
    clipped = clip_l2(rows, c)
    assert np.all(np.linalg.norm(clipped, axis=1) <= c * (1 + 1e-12))
    np.testing.assert_allclose(clip_l2(clipped, c), clipped, rtol=1e-12, atol=1e-300)


@given(finite_rows, st.floats(0.01, 100.0))
@settings(max_examples=60, deadline=None)
def test_clip_preserves_direction(rows, c):
    clipped = clip_l2(rows, c)
    norms = np.linalg.norm(rows, axis=1)
    scale = np.maximum(1.0, norms / c)
    np.testing.assert_allclose(clipped * scale[:, None], rows, rtol=1e-9, atol=1e-9)


def test_preprocess_client_keeps_labels_and_bounds_norms(blobs):
    out = preprocess_client(blobs, 1.0)
    np.testing.assert_array_equal(out.labels, blobs.labels)
    assert np.all(np.linalg.norm(out.features, axis=1) <= 1.0 + 1e-12)


def test_preprocess_with_external_stats():
    train = Dataset(np.array([[0.0], [2.0]]), [0, 1], 2)
    test = Dataset(np.array([[1.0], [5.0]]), [0, 1], 2)
    out = preprocess_with_stats(test, zscore_fit(train.features), c=10.0)
    assert out.features[:, 0].tolist() == [0.0, 4.0]
