"""
Per-client preprocessing: z-score normalization with local statistics, then
l2-norm clipping of every row to threshold c.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .data_io import Dataset
from .errors import ConfigurationError

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-12


@dataclass(frozen=True)
class ColumnStats:
    """Per-feature means and population standard deviations"""

    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        stds = np.asarray(self.stds, dtype=np.float64)
        if means.shape != stds.shape or means.ndim != 1:
            raise ConfigurationError(f"means {means.shape} and stds {stds.shape} must be equal-length vectors")
        if np.any(stds < 0):
            raise ConfigurationError("standard deviations must be non-negative")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stds", stds)


def zscore_fit(features: np.ndarray) -> ColumnStats:
    """Column means and population (ddof=0) standard deviations"""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ConfigurationError("zscore_fit needs a non-empty N x d_x matrix")
    return ColumnStats(features.mean(axis=0), features.std(axis=0, ddof=0))


def zscore_apply(features: np.ndarray, stats: ColumnStats) -> np.ndarray:
    """(x - mu_j) / max(sigma_j, SIGMA_FLOOR) column-wise; constant columns map to 0"""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != stats.means.shape[0]:
        raise ConfigurationError(
            f"feature matrix {features.shape} does not match stats of dimension {stats.means.shape[0]}"
        )
    return (features - stats.means) / np.maximum(stats.stds, SIGMA_FLOOR)


def clip_l2(x: np.ndarray, c: float) -> np.ndarray:
    """
    Scale ``x`` onto the l2 ball of radius c: x / max(1, ||x||_2 / c).

    Works on a single vector or row-wise on a matrix.
    """
    if not c > 0:
        raise ConfigurationError(f"clipping threshold must be positive, got {c}")
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ConfigurationError("clip_l2 received non-finite values")
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(1.0, norms / c)


def preprocess_client(shard: Dataset, c: float) -> Dataset:
    """
    Z-score the shard with its own statistics, then clip each row to norm c.

    Args:
        shard: one client's raw data
        c: clipping threshold

    Returns:
        Dataset with identical labels and rows of norm <= c
    """
    if len(shard) == 0:
        raise ConfigurationError("cannot preprocess an empty shard")
    stats = zscore_fit(shard.features)
    clipped = clip_l2(zscore_apply(shard.features, stats), c)
    logger.debug(f"🔄 Preprocessed shard of {len(shard)} rows (c={c})")
    return Dataset(clipped, shard.labels, shard.num_classes)


def preprocess_with_stats(dataset: Dataset, stats: ColumnStats, c: float) -> Dataset:
    """Normalize with externally fitted statistics (real test data uses training stats)"""
    return Dataset(clip_l2(zscore_apply(dataset.features, stats), c), dataset.labels, dataset.num_classes)
