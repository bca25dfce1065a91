"""
Downstream utility probe: a multinomial softmax classifier trained with
mini-batch gradient descent, test accuracy, the utility ratio and the
mode / l / S / epsilon sweep that writes one CSV row per grid point.
"""

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import logsumexp, softmax

from .accountant import PrivacyParams
from .config import read_key_values, resolve_threads
from .data_io import Dataset, SyntheticDataset, atomic_write
from .errors import CapeSynthError, ConfigurationError, DataFormatError
from .federation import Mode, RunConfig, run_pipeline
from .preprocess import ColumnStats, preprocess_with_stats, zscore_fit

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ["mode", "l", "S", "epsilon", "seed", "accuracy", "baseline", "utility_ratio", "error"]
SWEEP_KEY = ["mode", "l", "S", "epsilon", "seed"]

DEFAULT_EPOCHS = 50
DEFAULT_LEARNING_RATE = 0.05
DEFAULT_BATCH_SIZE = 128

PROVENANCE_TYPES = {"mode": str, "l": int, "S": int, "epsilon": float, "seed": int}


@dataclass(frozen=True)
class ClassifierWeights:
    """K x (d_x + 1) weight matrix; the last column is the bias"""

    matrix: np.ndarray
    loss_history: Tuple[float, ...] = ()

    def __post_init__(self):
        matrix = np.array(self.matrix, dtype=np.float64, copy=True)
        if matrix.ndim != 2 or matrix.shape[1] < 2:
            raise ConfigurationError(f"weight matrix must be K x (d_x + 1), got shape {matrix.shape}")
        if not np.all(np.isfinite(matrix)):
            raise ConfigurationError("classifier weights must be finite")
        object.__setattr__(self, "matrix", matrix)

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[0]

    @property
    def num_features(self) -> int:
        return self.matrix.shape[1] - 1

    def predict(self, features: np.ndarray) -> np.ndarray:
        """argmax class per row, lowest index on ties"""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.num_features:
            raise ConfigurationError(
                f"features of shape {features.shape} do not match a classifier over {self.num_features} features"
            )
        return np.argmax(_with_bias(features) @ self.matrix.T, axis=1)


@dataclass(frozen=True)
class EvalReport:
    """Accuracy of one trained probe plus the provenance of the data it was trained on"""

    accuracy: float
    baseline_accuracy: Optional[float] = None
    utility_ratio: Optional[float] = None
    mode: Optional[str] = None
    l: Optional[int] = None
    S: Optional[int] = None
    epsilon: Optional[float] = None
    seed: Optional[int] = None
    theta: Optional[float] = None
    meets_threshold: Optional[bool] = None

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if value is None:
                continue
            lines.append(f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- softmax regression

def _with_bias(features: np.ndarray) -> np.ndarray:
    return np.hstack([features, np.ones((features.shape[0], 1))])


def softmax_loss(matrix: np.ndarray, features: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy of the softmax model over the given rows"""
    logits = _with_bias(features) @ matrix.T
    picked = logits[np.arange(labels.shape[0]), labels]
    return float(np.mean(logsumexp(logits, axis=1) - picked))


def softmax_gradient(matrix: np.ndarray, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of softmax_loss with respect to the weight matrix"""
    augmented = _with_bias(features)
    residual = softmax(augmented @ matrix.T, axis=1)
    residual[np.arange(labels.shape[0]), labels] -= 1.0
    return residual.T @ augmented / labels.shape[0]


def _training_view(train: Union[Dataset, SyntheticDataset]) -> Dataset:
    if isinstance(train, SyntheticDataset):
        return train.as_dataset()
    return train


def train_softmax(train: Union[Dataset, SyntheticDataset], epochs: int = DEFAULT_EPOCHS,
                  learning_rate: float = DEFAULT_LEARNING_RATE, batch_size: int = DEFAULT_BATCH_SIZE,
                  seed: int = 42) -> ClassifierWeights:
    """
    Fit a multinomial softmax classifier from zero-initialized weights.

    Args:
        train: real data or a synthetic dataset with decoded labels
        epochs: passes over the data (0 returns the zero model)
        learning_rate: gradient step size
        batch_size: rows per step; the batch order of every epoch comes from seed
        seed: shuffling seed

    Returns:
        ClassifierWeights with the mean training loss recorded before the
        first epoch and after every epoch
    """
    data = _training_view(train)
    if epochs < 0 or batch_size < 1 or not learning_rate > 0:
        raise ConfigurationError(
            f"need epochs >= 0, batch_size >= 1 and learning_rate > 0 (got {epochs}, {batch_size}, {learning_rate})"
        )
    present = np.unique(data.labels)
    if present.size < 2:
        raise ConfigurationError(f"training set has {present.size} class(es); at least 2 are required")

    features, labels = data.features, data.labels
    matrix = np.zeros((data.num_classes, data.num_features + 1))
    rng = np.random.default_rng(seed)
    history = [softmax_loss(matrix, features, labels)]
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            matrix -= learning_rate * softmax_gradient(matrix, features[batch], labels[batch])
        history.append(softmax_loss(matrix, features, labels))
        logger.debug(f"📉 Epoch {epoch + 1}/{epochs}: loss={history[-1]:.6f}")

    if not np.all(np.isfinite(matrix)):
        raise ConfigurationError("training diverged; lower the learning rate")
    logger.info(f"✅ Trained softmax probe on {len(data)} rows: loss {history[0]:.4f} -> {history[-1]:.4f}")
    return ClassifierWeights(matrix, tuple(history))


def evaluate_accuracy(weights: ClassifierWeights, test: Dataset) -> float:
    """Fraction of test rows whose argmax prediction equals the label"""
    if test.num_classes > weights.num_classes:
        raise ConfigurationError(
            f"test set has K={test.num_classes}, classifier predicts {weights.num_classes} classes"
        )
    if len(test) == 0:
        raise ConfigurationError("test set is empty")
    return float(np.mean(weights.predict(test.features) == test.labels))


def utility_ratio(acc_synth: float, acc_real: float) -> float:
    """acc_synth / acc_real"""
    if not acc_real > 0:
        raise ConfigurationError(f"utility ratio undefined for real-data accuracy {acc_real}")
    return acc_synth / acc_real


def meets_utility_threshold(acc_synth: float, acc_real: float, theta: float) -> bool:
    """Whether synthetic-trained utility reaches theta times the real-trained utility"""
    if not 0 <= theta <= 1:
        raise ConfigurationError(f"theta must lie in [0, 1], got {theta}")
    return utility_ratio(acc_synth, acc_real) >= theta


# ---------------------------------------------------------------- real-data side

def real_test_view(train: Dataset, test: Dataset, c: float) -> Tuple[ColumnStats, Dataset]:
    """Preprocess the real test set with statistics fit on the real training set"""
    stats = zscore_fit(train.features)
    return stats, preprocess_with_stats(test, stats, c)


def baseline_accuracy(train: Dataset, test: Dataset, c: float, epochs: int = DEFAULT_EPOCHS,
                      learning_rate: float = DEFAULT_LEARNING_RATE, batch_size: int = DEFAULT_BATCH_SIZE,
                      seed: int = 42) -> float:
    """Accuracy of the probe trained on the real training set itself"""
    stats, test_view = real_test_view(train, test, c)
    weights = train_softmax(preprocess_with_stats(train, stats, c), epochs, learning_rate, batch_size, seed)
    return evaluate_accuracy(weights, test_view)


def evaluate_synthetic(synthetic: Union[Dataset, SyntheticDataset], train: Dataset, test: Dataset, c: float,
                       baseline: bool = False, theta: Optional[float] = None,
                       epochs: int = DEFAULT_EPOCHS, learning_rate: float = DEFAULT_LEARNING_RATE,
                       batch_size: int = DEFAULT_BATCH_SIZE, seed: int = 42,
                       provenance: Optional[Dict[str, object]] = None) -> EvalReport:
    """
    Train on synthetic data, test on real data.

    Args:
        synthetic: released dataset with decoded labels, or its CSV view
        train: real training data (normalization statistics, and the baseline if requested)
        test: real held-out data
        c: clipping threshold the synthetic data was generated with
        baseline: also train on real data and report the utility ratio
        theta: optional utility threshold to check (implies baseline)
        seed: shuffling seed of the probe; also the report seed unless provenance names one
        provenance: mode / l / S / epsilon / seed of the release, copied into the report

    Returns:
        EvalReport
    """
    _, test_view = real_test_view(train, test, c)
    weights = train_softmax(synthetic, epochs, learning_rate, batch_size, seed)
    accuracy = evaluate_accuracy(weights, test_view)
    base = ratio = meets = None
    if baseline or theta is not None:
        base = baseline_accuracy(train, test, c, epochs, learning_rate, batch_size, seed)
        ratio = utility_ratio(accuracy, base)
        if theta is not None:
            meets = meets_utility_threshold(accuracy, base, theta)
    fields = {"seed": seed, **(provenance or {})}
    unknown = set(fields) - set(PROVENANCE_TYPES)
    if unknown:
        raise ConfigurationError(f"unknown provenance fields {sorted(unknown)}")
    return EvalReport(accuracy, base, ratio, theta=theta, meets_threshold=meets, **fields)


def report_sidecar(release_path: Union[str, Path]) -> Path:
    """Where generate writes the accounting report of a release by default"""
    return Path(f"{release_path}.report.txt")


def release_provenance(report_path: Union[str, Path]) -> Dict[str, object]:
    """
    mode / l / S / epsilon / seed recorded in a release report.

    Missing keys are left out; a missing file gives an empty mapping.
    """
    report_path = Path(report_path)
    if not report_path.exists():
        logger.warning(f"⚠️  No release report at {report_path}; evaluation provenance stays empty")
        return {}
    raw = read_key_values(str(report_path))
    provenance: Dict[str, object] = {}
    for key, kind in PROVENANCE_TYPES.items():
        value = raw.get(key, "").strip()
        if not value:
            continue
        try:
            provenance[key] = kind(value)
        except ValueError:
            raise DataFormatError(f"{report_path}: {key}={value!r} is not a valid {kind.__name__}")
    return provenance


# ---------------------------------------------------------------- sweep

@dataclass(frozen=True)
class SweepGrid:
    """Grid axes plus the parameters every point shares"""

    modes: Sequence[Mode]
    ls: Sequence[int]
    Ss: Sequence[int]
    epsilons: Sequence[float]
    seeds: Sequence[int] = (42,)
    c: float = 1.0
    T: Optional[int] = None
    delta: float = 1e-5
    alpha_max: int = 200
    epochs: int = DEFAULT_EPOCHS
    learning_rate: float = DEFAULT_LEARNING_RATE
    batch_size: int = DEFAULT_BATCH_SIZE

    def __post_init__(self):
        for name in ("modes", "ls", "Ss", "epsilons", "seeds"):
            if len(getattr(self, name)) == 0:
                raise ConfigurationError(f"sweep grid axis {name!r} is empty")

    def points(self) -> List[Tuple[Mode, int, int, float, int]]:
        return list(itertools.product(self.modes, self.ls, self.Ss, self.epsilons, self.seeds))


def _point_key(mode, l, S, epsilon, seed) -> Tuple[str, int, int, float, int]:
    return (Mode(mode).value, int(l), int(S), float(epsilon), int(seed))


def _read_existing(path: Path) -> pd.DataFrame:
    if not path.exists():
        return pd.DataFrame(columns=SWEEP_COLUMNS)
    frame = pd.read_csv(path, dtype={"mode": str, "error": str})
    missing = set(SWEEP_COLUMNS) - set(frame.columns)
    if missing:
        raise ConfigurationError(f"{path} is not a sweep file (missing columns {sorted(missing)})")
    frame["error"] = frame["error"].fillna("")
    return frame[SWEEP_COLUMNS]


class Sweep:
    """Runs the grid against one real train/test split, resuming from an existing CSV"""

    def __init__(self, train: Dataset, test: Dataset, grid: SweepGrid, threads: int = 1):
        self.train = train
        self.test = test
        self.grid = grid
        self.threads = resolve_threads(threads)
        self._baselines: Dict[int, float] = {}

    @property
    def release_size(self) -> int:
        """Configured T, or the largest multiple of K not above N"""
        if self.grid.T is not None:
            return self.grid.T
        return len(self.train) - len(self.train) % self.train.num_classes

    def _baseline(self, seed: int) -> float:
        if seed not in self._baselines:
            grid = self.grid
            self._baselines[seed] = baseline_accuracy(self.train, self.test, grid.c, grid.epochs,
                                                      grid.learning_rate, grid.batch_size, seed)
        return self._baselines[seed]

    def run_point(self, point: Tuple[Mode, int, int, float, int]) -> Dict[str, object]:
        mode, l, S, epsilon, seed = point
        grid = self.grid
        row: Dict[str, object] = dict(zip(SWEEP_KEY, _point_key(mode, l, S, epsilon, seed)))
        baseline = self._baselines.get(seed, math.nan)
        row.update(accuracy=math.nan, baseline=baseline, utility_ratio=math.nan, error="")
        try:
            privacy = PrivacyParams(epsilon_target=epsilon, delta=grid.delta, l=l, c=grid.c,
                                    T=self.release_size, N=len(self.train), K=self.train.num_classes,
                                    S=Mode(mode).clients(S), alpha_max=grid.alpha_max)
            synthetic, _ = run_pipeline(self.train, RunConfig(Mode(mode), privacy, master_seed=seed))
            report = evaluate_synthetic(synthetic, self.train, self.test, grid.c, epochs=grid.epochs,
                                        learning_rate=grid.learning_rate, batch_size=grid.batch_size, seed=seed)
            row["accuracy"] = report.accuracy
            if baseline > 0:
                row["utility_ratio"] = utility_ratio(report.accuracy, baseline)
        except CapeSynthError as e:
            logger.warning(f"⚠️  Sweep point {row} failed: {e}")
            row["error"] = f"{e.category}: {e}"
        return row

    def run(self, out_path: Union[str, Path]) -> pd.DataFrame:
        """
        Evaluate every grid point not already present in out_path and
        rewrite the file with old and new rows, in grid order.
        """
        out_path = Path(out_path)
        existing = _read_existing(out_path)
        done = {_point_key(*key) for key in existing[SWEEP_KEY].itertuples(index=False, name=None)}
        todo = [p for p in self.grid.points() if _point_key(*p) not in done]
        logger.info(f"📊 Sweep: {len(self.grid.points())} points, {len(todo)} to run, {len(done)} already done")
        if not todo:
            return existing

        for seed in sorted({p[4] for p in todo}):
            self._baseline(seed)
        if self.threads > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                rows = list(pool.map(self.run_point, todo))
        else:
            rows = [self.run_point(p) for p in todo]

        fresh = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
        frame = fresh if existing.empty else pd.concat([existing, fresh], ignore_index=True)
        order = {_point_key(*p): i for i, p in enumerate(self.grid.points())}
        rank = [order.get(_point_key(*key), len(order)) for key in frame[SWEEP_KEY].itertuples(index=False, name=None)]
        frame = frame.assign(_rank=rank).sort_values("_rank", kind="stable").drop(columns="_rank")
        frame = frame.reset_index(drop=True)
        with atomic_write(out_path) as tmp:
            frame.to_csv(tmp, index=False, float_format="%.17g")
        failed = int((frame["error"] != "").sum())
        logger.info(f"💾 Wrote {len(frame)} sweep rows to {out_path} ({failed} failed)")
        return frame


def sweep(train: Dataset, test: Dataset, grid: SweepGrid, out_path: Union[str, Path],
          threads: int = 1) -> pd.DataFrame:
    """
    One pipeline run plus evaluation per grid point and seed.

    Rows already in out_path (matched on mode, l, S, epsilon, seed) are kept
    and not recomputed; failed points carry their error in the error column.
    """
    return Sweep(train, test, grid, threads).run(out_path)
