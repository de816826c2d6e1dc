"""Paired datasets (x, c) for conditional training, plus batching and CSV I/O.

Two built-ins: a one-hot-conditioned Gaussian mixture on a circle, whose
conditional law is Gaussian and therefore admits closed-form reference
answers, and a tiny super-resolution task where c is a noisy average-pooled
version of a smooth 1-D signal x.  Datasets are finite arrays generated as a
pure function of (parameters, seed).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConditionalBatch",
    "Dataset",
    "make_cond_mixture",
    "make_toy_sr",
    "load_csv_dataset",
    "batch_iter",
    "DATASET_KINDS",
]

DATASET_KINDS = ("cond_mixture", "toy_sr", "csv")


class DataError(ValueError):
    pass


@dataclass
class ConditionalBatch:
    """One training batch: paired data, fresh forward noise, optional times."""

    x: np.ndarray
    c: np.ndarray
    eps: np.ndarray
    t: np.ndarray | None = None

    def __post_init__(self):
        b = self.x.shape[0]
        if self.c.shape[0] != b or self.eps.shape != self.x.shape:
            raise DataError(
                f"inconsistent batch: x {self.x.shape}, c {self.c.shape}, eps {self.eps.shape}"
            )


@dataclass(frozen=True)
class Dataset:
    """Finite paired samples with per-task metadata for conditional targets."""

    name: str
    x: np.ndarray
    c: np.ndarray
    # set only for the mixture, where each one-hot condition selects a Gaussian
    component_means: np.ndarray | None = None
    component_stddev: float | None = None

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def data_dim(self) -> int:
        return self.x.shape[1]

    @property
    def cond_dim(self) -> int:
        return self.c.shape[1]

    def rows(self, idx) -> tuple[np.ndarray, np.ndarray]:
        return self.x[idx], self.c[idx]


def mixture_centers(n_components: int, radius: float) -> np.ndarray:
    """Component k sits at radius * (cos(2 pi k / M), sin(2 pi k / M))."""
    angles = 2.0 * np.pi * np.arange(n_components) / n_components
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def make_cond_mixture(
    n: int, seed: int, n_components: int = 4, radius: float = 2.0, noise: float = 0.25
) -> Dataset:
    """Gaussian mixture on a circle; condition is the one-hot component index.

    Given c = e_k the data law is exactly N(center_k, noise^2 I) in 2-D.
    """
    if n_components < 2:
        raise DataError("mixture needs at least 2 components")
    if noise <= 0 or radius <= 0:
        raise DataError("radius and noise must be positive")
    if n < 1:
        raise DataError("n must be positive")
    means = mixture_centers(n_components, radius)
    rng = np.random.default_rng(seed)
    k = rng.integers(0, n_components, size=n)
    x = means[k] + noise * rng.standard_normal((n, 2))
    c = np.eye(n_components)[k]
    return Dataset(
        name="cond_mixture", x=x, c=c, component_means=means, component_stddev=float(noise)
    )


def make_toy_sr(
    n: int, seed: int, length: int = 16, pool: int = 4, obs_noise: float = 0.05
) -> Dataset:
    """Smooth 1-D signals; c is a noisy average-pooled observation of x.

    Each x sums at most three sinusoids with 1..3 cycles over the domain and
    total amplitude at most 1, so block means of x are the noiseless c.
    """
    if length % pool != 0:
        raise DataError(f"pool {pool} must divide length {length}")
    if obs_noise < 0:
        raise DataError("obs_noise must be nonnegative")
    if n < 1:
        raise DataError("n must be positive")
    u = (np.arange(length) + 0.5) / length
    rng = np.random.default_rng(seed)
    x = np.zeros((n, length))
    for row in range(n):
        n_waves = int(rng.integers(1, 4))
        freqs = rng.choice([1, 2, 3], size=n_waves, replace=False)
        amps = rng.uniform(0.2, 1.0, size=n_waves)
        amps = amps / max(1.0, float(amps.sum()))
        phases = rng.uniform(0.0, 2.0 * np.pi, size=n_waves)
        for f, a, ph in zip(freqs, amps, phases):
            x[row] += a * np.sin(2.0 * np.pi * f * u + ph)
    c = x.reshape(n, length // pool, pool).mean(axis=2)
    if obs_noise > 0:
        c = c + obs_noise * rng.standard_normal(c.shape)
    return Dataset(name="toy_sr", x=x, c=c)


def load_csv_dataset(path, data_dim: int, cond_dim: int) -> Dataset:
    """Header-free comma-separated rows: data_dim x-columns then cond_dim c-columns."""
    if data_dim < 1 or cond_dim < 1:
        raise DataError("data_dim and cond_dim must be positive for csv datasets")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # empty input is reported as DataError below
            table = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except OSError as e:
        raise DataError(f"cannot read csv dataset {path}: {e}") from e
    except ValueError as e:
        raise DataError(f"malformed csv dataset {path}: {e}") from e
    if table.size == 0:
        raise DataError(f"csv dataset {path} is empty")
    if table.shape[1] != data_dim + cond_dim:
        raise DataError(
            f"csv dataset {path} has {table.shape[1]} columns, "
            f"expected data_dim + cond_dim = {data_dim + cond_dim}"
        )
    if not np.all(np.isfinite(table)):
        raise DataError(f"csv dataset {path} contains non-finite entries")
    return Dataset(name="csv", x=table[:, :data_dim].copy(), c=table[:, data_dim:].copy())


def batch_iter(dataset: Dataset, batch_size: int, seed: int):
    """Endless epoch stream of ConditionalBatch with seeded shuffling.

    Each epoch is a fresh permutation partitioning the dataset; eps is drawn
    anew for every batch, so an item sees different noise on every visit.
    """
    if batch_size < 1:
        raise DataError("batch_size must be positive")
    if batch_size > dataset.n:
        raise DataError(f"batch_size {batch_size} exceeds dataset size {dataset.n}")
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(dataset.n)
        for lo in range(0, dataset.n, batch_size):
            idx = perm[lo : lo + batch_size]
            x, c = dataset.rows(idx)
            eps = rng.standard_normal(x.shape)
            yield ConditionalBatch(x=x.copy(), c=c.copy(), eps=eps)
