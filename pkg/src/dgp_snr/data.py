"""Synthetic demo data, CSV ingestion, normalization, and splitting.

The demo generator draws x ~ Uniform(-1, 1) and routes each point through
one of two noisy branches,

    f1(x) = sin(4 x) / 3 + 0.2 e^eps      with probability 0.6
    f2(x) = 9 x^2 / 30 + 1.5 + 0.2 e^eps  otherwise,   eps ~ N(0, 1),

which makes the conditional p(y | x) bimodal.  All randomness comes from
counter-based substreams, so equal seeds give bit-identical datasets.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameter, ParseError, SchemaError
from .rng import TAG_DATA, TAG_SPLIT, substream


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray                  # (N, D)
    y: np.ndarray                  # (N, P)

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0]:
            raise InvalidParameter("x and y row counts differ")

    @property
    def n(self):
        return self.x.shape[0]


@dataclass(frozen=True)
class NormStats:
    """Per-column train statistics; zero-variance columns pass through."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray
    warnings: tuple = ()

    def normalize(self, ds):
        return Dataset((ds.x - self.x_mean) / self.x_std,
                       (ds.y - self.y_mean) / self.y_std)

    def denormalize(self, ds):
        return Dataset(ds.x * self.x_std + self.x_mean,
                       ds.y * self.y_std + self.y_mean)

    def loglik_offset(self):
        """Per-point correction when reporting log-likelihoods in original
        units: subtract sum_p log(train std of y_p)."""
        return float(np.sum(np.log(self.y_std)))


@dataclass(frozen=True)
class SplitDataset:
    train: Dataset                 # normalized
    test: Dataset                  # normalized with train stats
    stats: NormStats
    train_idx: np.ndarray
    test_idx: np.ndarray


def demo_f1(x, eps):
    return np.sin(4.0 * x) / 3.0 + 0.2 * np.exp(eps)


def demo_f2(x, eps):
    return 9.0 * x * x / 30.0 + 1.5 + 0.2 * np.exp(eps)


def gen_demo(n, seed):
    """Bimodal 1-D demo dataset; draw order is x, eps, branch."""
    if n < 1:
        raise InvalidParameter("n must be >= 1")
    g = substream(TAG_DATA, seed)
    x = g.uniform(-1.0, 1.0, size=(n, 1))
    eps = g.standard_normal((n, 1))
    branch = g.uniform(0.0, 1.0, size=(n, 1)) < 0.6
    y = np.where(branch, demo_f1(x, eps), demo_f2(x, eps))
    return Dataset(x, y)


# ---------------------------------------------------------------------------
# CSV in/out: UTF-8, comma-separated, '.' decimals, header row
# ---------------------------------------------------------------------------

def save_csv(path, dataset, feature_names=None, target_names=None):
    d, p = dataset.x.shape[1], dataset.y.shape[1]
    feature_names = feature_names or [f"x{i}" for i in range(d)]
    target_names = target_names or [f"y{i}" for i in range(p)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(feature_names) + list(target_names))
        for i in range(dataset.n):
            writer.writerow([repr(float(v)) for v in dataset.x[i]]
                            + [repr(float(v)) for v in dataset.y[i]])


def load_csv(path, target_columns):
    """Read a rectangular numeric CSV into features and targets.

    Ragged rows and non-numeric cells raise ParseError naming the line;
    a missing target column raises SchemaError.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        missing = [c for c in target_columns if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing target columns {missing}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(lineno, f"expected {len(header)} cells, "
                                         f"got {len(row)}")
            try:
                rows.append([float(cell) for cell in row])
            except ValueError:
                bad = next(c for c in row if not _is_number(c))
                raise ParseError(lineno, f"non-numeric cell {bad!r}") from None
    data = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(header))
    t_idx = [header.index(c) for c in target_columns]
    f_idx = [i for i in range(len(header)) if i not in t_idx]
    return Dataset(data[:, f_idx], data[:, t_idx])


def _is_number(cell):
    try:
        float(cell)
        return True
    except ValueError:
        return False


# ---------------------------------------------------------------------------
# splitting and normalization
# ---------------------------------------------------------------------------

def split_dataset(dataset, test_fraction=0.1, seed=0):
    """Seeded-permutation split; returns (train, test, train_idx, test_idx)."""
    n = dataset.n
    perm = substream(TAG_SPLIT, seed).permutation(n)
    n_test = int(round(n * test_fraction))
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return (Dataset(dataset.x[train_idx], dataset.y[train_idx]),
            Dataset(dataset.x[test_idx], dataset.y[test_idx]),
            train_idx, test_idx)


def compute_stats(train):
    warnings = []

    def col_stats(mat, label):
        mean = mat.mean(axis=0)
        std = mat.std(axis=0)
        for j in np.nonzero(std < 1e-12)[0]:
            warnings.append(f"{label} column {j} has zero variance; "
                            "left uncentered and unscaled")
            mean[j] = 0.0
            std[j] = 1.0
        return mean, std

    x_mean, x_std = col_stats(train.x, "x")
    y_mean, y_std = col_stats(train.y, "y")
    return NormStats(x_mean, x_std, y_mean, y_std, tuple(warnings))


def normalize_split(dataset, test_fraction=0.1, seed=0):
    """Split, compute train-only statistics, normalize both splits."""
    if dataset.n < 10:
        raise InvalidParameter("normalize_split needs at least 10 rows")
    train, test, train_idx, test_idx = split_dataset(dataset, test_fraction,
                                                     seed)
    stats = compute_stats(train)
    return SplitDataset(stats.normalize(train), stats.normalize(test),
                        stats, train_idx, test_idx)
