import csv
import typing

from dataclasses import dataclass
from pathlib import Path

import numpy as np

import ezmsg.core as ez

from .packing import next_pow2
from .errors import ConfigError, ProtocolError

BCW_FEATURES = 9
BCW_SAMPLES = 699
BCW_BENIGN_FRACTION = 0.655


@dataclass(frozen = True)
class Dataset:
    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self) -> None:
        if len(self.X) != len(self.Y):
            raise ProtocolError(f'{len(self.X)} rows of features but {len(self.Y)} labels')

    def __len__(self) -> int:
        return len(self.X)

    @property
    def features(self) -> int:
        return self.X.shape[1]

    @property
    def outputs(self) -> int:
        return self.Y.shape[1]

    def take(self, index: np.ndarray) -> 'Dataset':
        return Dataset(self.X[index], self.Y[index])


def one_hot(labels: np.ndarray, classes: typing.Optional[typing.Sequence[float]] = None) -> np.ndarray:
    labels = np.asarray(labels)
    classes = np.unique(labels) if classes is None else np.asarray(classes)
    out = np.zeros((len(labels), len(classes)))
    for k, c in enumerate(classes):
        out[labels == c, k] = 1.0
    return out


def pad_features(X: np.ndarray) -> np.ndarray:
    """ Zero columns up to the next power of two """
    X = np.atleast_2d(np.asarray(X, dtype = float))
    width = next_pow2(X.shape[1])
    if width == X.shape[1]:
        return X
    return np.hstack([X, np.zeros((len(X), width - X.shape[1]))])


def load_csv(
    path: typing.Union[str, Path],
    label_columns: int = 1,
    header: typing.Optional[bool] = None,
    pad: bool = True
) -> Dataset:
    """
    Numeric CSV with the label in the trailing column(s). A single label
    column is one-hot encoded over its sorted distinct values; several
    label columns are taken as given. A header row is detected when the
    first row does not parse as numbers, unless header says otherwise.
    """
    path = Path(path)
    rows: typing.List[typing.List[float]] = []
    width = None
    with path.open(newline = '') as f:
        for line, row in enumerate(csv.reader(f), start = 1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if line == 1 and header:
                continue
            try:
                values = [float(cell) for cell in row]
            except ValueError:
                if line == 1 and header is None:
                    continue
                bad = next(cell for cell in row if not _is_number(cell))
                raise ConfigError(f'Non-numeric cell {bad!r}', path, line)
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise ConfigError(f'Row has {len(values)} cells, expected {width}', path, line)
            rows.append(values)

    if not rows:
        raise ConfigError('No data rows', path)
    if width <= label_columns:
        raise ConfigError(f'{width} columns cannot hold {label_columns} label columns', path)

    table = np.array(rows)
    X, labels = table[:, :-label_columns], table[:, -label_columns:]
    Y = one_hot(labels[:, 0]) if label_columns == 1 else labels
    ez.logger.info(f'Loaded {path.name} with {len(X)} rows, {X.shape[1]} features, {Y.shape[1]} outputs')
    return Dataset(pad_features(X) if pad else X, Y)


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def synthetic_bcw(samples: int = BCW_SAMPLES, seed: int = 0, correlation: float = 0.6) -> Dataset:
    """
    Breast-cancer-like table: nine integer features in [1, 10] drawn from
    two correlated Gaussian classes, about two thirds benign. Labels are
    one-hot (benign, malignant).
    """
    rng = np.random.default_rng(seed)
    cov = np.full((BCW_FEATURES, BCW_FEATURES), correlation) + (1.0 - correlation) * np.eye(BCW_FEATURES)
    benign = int(round(samples * BCW_BENIGN_FRACTION))
    classes = (
        (benign, np.linspace(1.5, 3.0, BCW_FEATURES), 1.2),
        (samples - benign, np.linspace(5.5, 7.5, BCW_FEATURES), 2.4),
    )
    X, y = [], []
    for label, (count, mean, spread) in enumerate(classes):
        draws = rng.multivariate_normal(mean, cov * spread ** 2, size = count)
        X.append(np.clip(np.round(draws), 1.0, 10.0))
        y.append(np.full(count, label))
    X = np.vstack(X)
    y = np.concatenate(y)
    order = rng.permutation(len(y))
    return Dataset(X[order], one_hot(y[order], classes = (0, 1)))


def separable(samples: int, features: int = 4, seed: int = 0, margin: float = 0.5) -> Dataset:
    """ Two linearly separable blobs, one-hot labels """
    rng = np.random.default_rng(seed)
    direction = rng.normal(size = features)
    direction /= np.linalg.norm(direction)
    X = rng.uniform(-1.0, 1.0, size = (samples, features))
    side = X @ direction
    keep = np.abs(side) > margin * 0.5
    X, side = X[keep], side[keep]
    return Dataset(X, one_hot((side > 0).astype(int), classes = (0, 1)))


def split_shards(data: Dataset, parties: int, seed: int = 0) -> typing.List[Dataset]:
    """ Seeded even split; shard sizes differ by at most one """
    if parties < 1:
        raise ProtocolError(f'{parties=} must be positive')
    if len(data) < parties:
        raise ProtocolError(f'{len(data)} samples cannot fill {parties} shards')
    order = np.random.default_rng(seed).permutation(len(data))
    return [data.take(idx) for idx in np.array_split(order, parties)]


def holdout(data: Dataset, fraction: float, seed: int = 0) -> typing.Tuple[Dataset, Dataset]:
    if not 0.0 <= fraction < 1.0:
        raise ProtocolError(f'Holdout {fraction=} outside [0, 1)')
    order = np.random.default_rng(seed).permutation(len(data))
    cut = len(data) - int(round(fraction * len(data)))
    return data.take(order[:cut]), data.take(order[cut:])


def local_moments(X: np.ndarray) -> typing.Tuple[int, np.ndarray, np.ndarray]:
    """ (count, per-feature sum, per-feature sum of squares) """
    X = np.atleast_2d(np.asarray(X, dtype = float))
    return len(X), X.sum(axis = 0), (X * X).sum(axis = 0)


def moments_to_stats(count: float, total: np.ndarray, squares: np.ndarray) -> typing.Tuple[np.ndarray, np.ndarray]:
    """ Pooled mean and standard deviation; constant features get unit deviation """
    if count <= 0:
        raise ProtocolError('Statistics over zero samples')
    mean = total / count
    var = np.maximum(squares / count - mean * mean, 0.0)
    std = np.sqrt(var)
    std[std < 1e-9] = 1.0
    return mean, std


def standardize(X: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """ Scale the leading len(mean) columns; padding columns stay zero """
    X = np.array(X, dtype = float)
    d = len(mean)
    X[:, :d] = (X[:, :d] - mean) / std
    return X


def minmax_scale(X: np.ndarray, low: np.ndarray, high: np.ndarray) -> np.ndarray:
    """ Map [low, high] onto [0, 1] per feature """
    low = np.asarray(low, dtype = float)
    span = np.asarray(high, dtype = float) - low
    span = np.where(span > 0.0, span, 1.0)
    X = np.array(X, dtype = float)
    d = len(low)
    X[:, :d] = (X[:, :d] - low) / span
    return X
