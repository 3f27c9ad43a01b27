"""CSV ingestion and real-data two-sample partition constructions.

A dataset is split into two samples four ways: uniformly at random; by
exponential tilting (one half resampled with covariate-dependent weights);
along a covariate's median with a fraction of rows flipped to the other
side; or along the response the same way.  Dependent p-values from repeated
partitions are combined as twice the median, capped at one.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .covshift import TestConfig, run_test
from .errors import ConfigError, DataError, UDebiasError
from .ustat import Sample

__all__ = [
    "Dataset",
    "PartitionSpec",
    "load_csv",
    "partition",
    "twice_median_pvalue",
    "repeated_partition_test",
    "PartitionReport",
]

PARTITION_KINDS = ("random", "exp_tilt", "covariate_split", "response_split")


@dataclass(frozen=True)
class Dataset:
    """Numeric feature matrix plus a named response column."""

    features: np.ndarray
    response: np.ndarray
    feature_names: tuple
    response_name: str
    n_dropped: int = 0

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def column(self, name: str) -> np.ndarray:
        if name == self.response_name:
            return self.response
        if name not in self.feature_names:
            raise DataError(f"unknown column {name!r}")
        return self.features[:, self.feature_names.index(name)]


def load_csv(path, response_column: str) -> Dataset:
    """Parse a headered numeric CSV; rows with unparseable cells are dropped.

    The drop count is recorded on the returned dataset.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        if response_column not in header:
            raise DataError(
                f"response column {response_column!r} not found; "
                f"columns are {header}"
            )
        rows = []
        n_dropped = 0
        for raw in reader:
            if len(raw) != len(header):
                n_dropped += 1
                continue
            try:
                rows.append([float(c) for c in raw])
            except ValueError:
                n_dropped += 1
    if not rows:
        raise DataError(f"{path} has no usable rows")
    data = np.asarray(rows, dtype=np.float64)
    r_idx = header.index(response_column)
    keep = [i for i in range(len(header)) if i != r_idx]
    if not keep:
        raise DataError("dataset needs at least one covariate column")
    return Dataset(
        features=data[:, keep],
        response=data[:, r_idx],
        feature_names=tuple(header[i] for i in keep),
        response_name=response_column,
        n_dropped=n_dropped,
    )


@dataclass(frozen=True)
class PartitionSpec:
    """How to split one dataset into two samples."""

    kind: str
    tilt_vector: np.ndarray | None = None
    split_column: str | None = None
    flip_fraction: float = 0.05
    seed: int = 0
    standardize_tilt: bool = True

    def __post_init__(self):
        if self.kind not in PARTITION_KINDS:
            raise ConfigError(f"unknown partition kind {self.kind!r}")
        if not 0.0 <= self.flip_fraction < 0.5:
            raise ConfigError("flip_fraction must lie in [0, 0.5)")
        if self.kind == "exp_tilt":
            if self.tilt_vector is None:
                raise ConfigError("exp_tilt needs a tilt vector")
            object.__setattr__(
                self, "tilt_vector", np.asarray(self.tilt_vector, dtype=np.float64).ravel()
            )
        if self.kind == "covariate_split" and not self.split_column:
            raise ConfigError("covariate_split needs a split column")


def _as_samples(ds: Dataset, idx_f: np.ndarray, idx_g: np.ndarray) -> tuple:
    f = Sample(x=ds.features[idx_f], y=ds.response[idx_f])
    g = Sample(x=ds.features[idx_g], y=ds.response[idx_g])
    return f, g


def _median_split_with_flips(values: np.ndarray, flip_fraction: float,
                             rng: np.random.Generator) -> tuple:
    if np.all(values == values[0]):
        raise DataError("split column is constant")
    med = float(np.median(values))
    idx_g = np.flatnonzero(values > med)
    idx_f = np.flatnonzero(values <= med)
    k_f = int(round(flip_fraction * idx_f.size))
    k_g = int(round(flip_fraction * idx_g.size))
    move_f = rng.choice(idx_f.size, size=k_f, replace=False) if k_f else np.array([], dtype=int)
    move_g = rng.choice(idx_g.size, size=k_g, replace=False) if k_g else np.array([], dtype=int)
    from_f = idx_f[move_f]
    from_g = idx_g[move_g]
    new_f = np.sort(np.concatenate([np.setdiff1d(idx_f, from_f), from_g]))
    new_g = np.sort(np.concatenate([np.setdiff1d(idx_g, from_g), from_f]))
    return new_f, new_g


def partition(ds: Dataset, spec: PartitionSpec) -> tuple:
    """Split the dataset into (sample_F, sample_G) per the spec; seeded."""
    rng = np.random.default_rng(spec.seed)
    n = len(ds)
    if spec.kind in ("random", "exp_tilt"):
        perm = rng.permutation(n)
        half = n // 2
        idx_f, idx_g = perm[:half], perm[half:]
        if spec.kind == "random":
            return _as_samples(ds, np.sort(idx_f), np.sort(idx_g))
        tilt = spec.tilt_vector
        if tilt.shape[0] != ds.dim:
            raise ConfigError(
                f"tilt vector length {tilt.shape[0]} != {ds.dim} covariates"
            )
        x_g = ds.features[idx_g]
        if spec.standardize_tilt:
            mean = ds.features.mean(axis=0)
            scale = ds.features.std(axis=0)
            scale[scale == 0.0] = 1.0
            logw = ((x_g - mean) / scale) @ tilt
        else:
            logw = x_g @ tilt
        logw = logw - logw.max()
        w = np.exp(logw)
        w /= w.sum()
        resampled = idx_g[rng.choice(idx_g.size, size=idx_g.size, replace=True, p=w)]
        return _as_samples(ds, np.sort(idx_f), resampled)

    col = ds.column(spec.split_column) if spec.kind == "covariate_split" else ds.response
    idx_f, idx_g = _median_split_with_flips(col, spec.flip_fraction, rng)
    return _as_samples(ds, idx_f, idx_g)


def twice_median_pvalue(pvals) -> float:
    """min(1, 2 * median); valid under arbitrary dependence."""
    arr = np.asarray(list(pvals), dtype=np.float64)
    if arr.size == 0:
        raise ConfigError("empty p-value list")
    if np.any((arr < 0) | (arr > 1)):
        raise ConfigError("p-values must lie in [0, 1]")
    return min(1.0, 2.0 * float(np.median(arr)))


@dataclass(frozen=True)
class PartitionReport:
    """Aggregate over repeated partitions of one dataset."""

    mean_theta: float
    median_se: float
    aggregated_p: float
    rejection_rate: float
    repetitions: int
    failures: tuple = field(default_factory=tuple)
    thetas: tuple = ()
    pvalues: tuple = ()
    ses: tuple = ()

    def to_dict(self) -> dict:
        return {
            "mean_theta": float(self.mean_theta),
            "median_se": float(self.median_se),
            "aggregated_p": float(self.aggregated_p),
            "rejection_rate": float(self.rejection_rate),
            "repetitions": int(self.repetitions),
            "failures": len(self.failures),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def repeated_partition_test(
    ds: Dataset,
    spec: PartitionSpec,
    test_config: TestConfig,
    repetitions: int = 20,
    threads: int | None = None,
) -> PartitionReport:
    """Re-partition and re-test with independent seeds; aggregate.

    Reports the mean estimate, the median standard error, the rejection
    proportion at the configured level, and the twice-median combined
    p-value over the repetitions.
    """
    if repetitions < 1:
        raise ConfigError("repetitions must be >= 1")
    children = np.random.SeedSequence(test_config.seed).spawn(repetitions)

    def job(child):
        s_part, s_test = (int(c.generate_state(1)[0]) for c in child.spawn(2))
        try:
            f, g = partition(ds, replace(spec, seed=s_part))
            report = run_test(f, g, replace(test_config, seed=s_test))
            return report
        except UDebiasError as exc:
            return exc

    if threads is not None and threads <= 1:
        results = [job(c) for c in children]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, children))

    failures = []
    thetas, ses, pvals, rejects = [], [], [], []
    for r, res in enumerate(results):
        if isinstance(res, Exception):
            failures.append((r, str(res)))
            continue
        thetas.append(res.theta_hat)
        ses.append(math.sqrt(res.sigma2_hat / (res.m + res.n)))
        pvals.append(res.p_value)
        rejects.append(res.reject)
    if not thetas:
        raise UDebiasError("every repetition failed")
    return PartitionReport(
        mean_theta=float(np.mean(thetas)),
        median_se=float(np.median(ses)),
        aggregated_p=twice_median_pvalue(pvals),
        rejection_rate=float(np.mean(rejects)),
        repetitions=repetitions,
        failures=tuple(failures),
        thetas=tuple(thetas),
        pvalues=tuple(pvals),
        ses=tuple(ses),
    )
