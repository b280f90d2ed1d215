"""Datasets: synthetic generation, CSV ingestion, batching and resampling."""

from __future__ import annotations

import csv
import enum
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import RngStream


class DataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    """``n`` samples ``(inputs[i], responses[i])`` with ``inputs`` of shape ``(n, d)``."""

    inputs: np.ndarray
    responses: np.ndarray

    def __post_init__(self):
        x = np.array(self.inputs, dtype=np.float64)
        y = np.array(self.responses, dtype=np.float64).reshape(-1)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise DataError("inputs must be a nonempty (n, d) matrix")
        if x.shape[0] != y.shape[0]:
            raise DataError(f"{x.shape[0]} input rows but {y.shape[0]} responses")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DataError("dataset contains non-finite values")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "responses", y)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    def __len__(self):
        return self.n

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.intp)
        return Dataset(self.inputs[rows], self.responses[rows])

    def with_responses(self, responses) -> "Dataset":
        return Dataset(self.inputs, responses)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.inputs.shape == other.inputs.shape
            and np.array_equal(self.inputs, other.inputs)
            and np.array_equal(self.responses, other.responses)
        )

    __hash__ = None


class Family(str, enum.Enum):
    SIN_SUM = "SinSum"
    X_SIN_X = "XSinX"


@dataclass(frozen=True)
class SyntheticSpec:
    """Uniform inputs on ``[0, box_high]^dim`` with Gaussian label noise.

    ``SinSum`` is synthetic dataset #1 (``sum_i sin(x_i)``), ``XSinX`` is
    dataset #2 (``sum_i x_i sin(x_i)``).
    """

    family: Family = Family.SIN_SUM
    dim: int = 2
    noise_sd: float = 0.001
    box_high: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.dim < 1:
            raise DataError("dim must be positive")
        if self.noise_sd < 0:
            raise DataError("noise_sd must be nonnegative")

    def to_dict(self) -> dict:
        return {"family": self.family.value, "dim": self.dim,
                "noise_sd": self.noise_sd, "box_high": self.box_high}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(**d)


def _truth(family: Family, x: np.ndarray) -> np.ndarray:
    if family is Family.SIN_SUM:
        return np.sin(x).sum(axis=-1)
    return (x * np.sin(x)).sum(axis=-1)


def ground_truth(spec: SyntheticSpec, x) -> float | np.ndarray:
    """Noise-free regression function at ``x`` (a vector, or rows of a matrix)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.dim:
        raise DataError(f"expected {spec.dim} features, got {x.shape[-1]}")
    out = _truth(spec.family, x)
    return float(out) if out.ndim == 0 else out


def generate_synthetic(spec: SyntheticSpec, n: int, rng: RngStream) -> Dataset:
    if n < 1:
        raise DataError("n must be at least 1")
    gen = rng.generator()
    x = gen.uniform(0.0, spec.box_high, size=(n, spec.dim))
    y = _truth(spec.family, x)
    if spec.noise_sd > 0:
        y = y + gen.normal(0.0, spec.noise_sd, size=n)
    return Dataset(x, y)


def load_csv(path) -> Dataset:
    """Read ``x1,...,xd,y`` CSV.  The response column must be last."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(header) < 2 or header[-1] != "y":
            raise DataError(f"{path}: response column must be last (header {header})")
        expected = [f"x{i + 1}" for i in range(len(header) - 1)]
        if header[:-1] != expected:
            raise DataError(f"{path}: malformed header {header}, expected {expected + ['y']}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(row)} cells, expected {len(header)}")
            vals = []
            for col, cell in zip(header, row):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}: row {lineno}, column {col}: non-numeric {cell!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: row {lineno}, column {col}: non-finite value")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: empty dataset")
    arr = np.array(rows)
    return Dataset(arr[:, :-1], arr[:, -1])


def save_csv(data: Dataset, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(data.d)] + ["y"])
        for x, y in zip(data.inputs, data.responses):
            w.writerow([repr(float(v)) for v in x] + [repr(float(y))])


def split_batches(data: Dataset, m_prime: int, rng: RngStream) -> list[Dataset]:
    """Randomly partition rows into ``m_prime`` equal batches.

    Rows left over after ``n // m_prime`` per batch are dropped so that the
    batch estimates stay exchangeable.
    """
    if m_prime < 2:
        raise DataError("m_prime must be at least 2")
    if data.n < m_prime:
        raise DataError(f"cannot split {data.n} rows into {m_prime} batches")
    size = data.n // m_prime
    dropped = data.n - size * m_prime
    if dropped:
        warnings.warn(f"split_batches: dropping {dropped} remainder row(s)", stacklevel=2)
    perm = rng.generator().permutation(data.n)
    return [data.subset(perm[j * size:(j + 1) * size]) for j in range(m_prime)]


def bootstrap_resample(data: Dataset, rng: RngStream) -> Dataset:
    idx = rng.generator().integers(0, data.n, size=data.n)
    return data.subset(idx)


def simulate_real(data: Dataset, noise_sd: float, rng: RngStream) -> Dataset:
    """Add fresh independent Gaussian label noise (simulated-real-data protocol)."""
    if not noise_sd > 0:
        raise DataError("noise_sd must be positive")
    noise = rng.generator().normal(0.0, noise_sd, size=data.n)
    return data.with_responses(data.responses + noise)
