"""Monte Carlo generation of labeled (topology, measurement) datasets."""

from __future__ import annotations

import csv
import json
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .grid import Grid, is_connected
from .powerflow import injections_from_angles, solve_angles

MAGIC = b"GIDS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sH32sI")
_SIZES = struct.Struct("<QII")


class RejectionBudgetExceeded(RuntimeError):
    """Too many disconnected draws in a row; ``p_out`` is too high for the grid."""


class DatasetFormatError(ValueError):
    """The dataset file is truncated, corrupt, or from another format version."""


class FingerprintMismatch(ValueError):
    """A dataset or model was produced for a different grid."""


@dataclass(frozen=True)
class GenConfig:
    p_out: float
    theta_max: float = 0.2 * math.pi
    noise_std_deg: float = 0.01
    observed_buses: tuple[int, ...] | None = None
    injection_measured: bool = True
    seed: int = 0
    max_rejections_per_sample: int = 10_000

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_out < 1.0:
            raise ValueError(f"p_out must be in [0, 1), got {self.p_out}")
        if not self.theta_max > 0:
            raise ValueError("theta_max must be positive")
        if not self.noise_std_deg >= 0:
            raise ValueError("noise_std_deg must be nonnegative")
        if self.observed_buses is not None:
            buses = tuple(sorted(set(int(b) for b in self.observed_buses)))
            object.__setattr__(self, "observed_buses", buses)
            if not buses and not self.injection_measured:
                raise ValueError("no measurements: observed_buses is empty and injections are not measured")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.max_rejections_per_sample < 1:
            raise ValueError("max_rejections_per_sample must be positive")

    @property
    def noise_std_rad(self) -> float:
        return self.noise_std_deg * math.pi / 180.0

    def observed(self, grid: Grid) -> np.ndarray:
        if self.observed_buses is None:
            return np.arange(grid.n_buses)
        buses = np.asarray(self.observed_buses, dtype=np.int64)
        if buses.size and (buses.min() < 0 or buses.max() >= grid.n_buses):
            raise ValueError(f"observed bus ids must lie in 0..{grid.n_buses - 1}")
        return buses

    def feature_dim(self, grid: Grid) -> int:
        return len(self.observed(grid)) + (grid.n_buses if self.injection_measured else 0)

    def to_json(self) -> str:
        d = asdict(self)
        if d["observed_buses"] is not None:
            d["observed_buses"] = list(d["observed_buses"])
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> GenConfig:
        d = json.loads(text)
        if d.get("observed_buses") is not None:
            d["observed_buses"] = tuple(d["observed_buses"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class Sample:
    topology: np.ndarray
    features: np.ndarray


@dataclass(eq=False)
class Dataset:
    """Samples stored column-wise: ``labels`` is I x L (uint8), ``features`` I x K."""

    fingerprint: bytes
    config: GenConfig
    labels: np.ndarray
    features: np.ndarray
    # pre-rejection draws that were discarded; not persisted
    rejections: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if self.labels.ndim != 2 or self.features.ndim != 2 or len(self.labels) != len(self.features):
            raise ValueError("labels and features must be 2-D with one row per sample")
        if len(self.fingerprint) != 32:
            raise ValueError("grid fingerprint must be 32 bytes")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.labels[i], self.features[i])

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.fingerprint == other.fingerprint
            and self.config == other.config
            and self.labels.shape == other.labels.shape
            and self.features.shape == other.features.shape
            and self.labels.tobytes() == other.labels.tobytes()
            and self.features.tobytes() == other.features.tobytes()
        )

    @property
    def n_lines(self) -> int:
        return self.labels.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def mean_outages(self) -> float:
        if not len(self):
            return 0.0
        return float((1 - self.labels.astype(np.float64)).sum(axis=1).mean())

    def distinct_fraction(self) -> float:
        """Number of distinct topologies divided by the sample count."""
        if not len(self):
            return 1.0
        return len(np.unique(np.packbits(self.labels, axis=1), axis=0)) / len(self)

    def subset(self, start: int, stop: int) -> Dataset:
        return Dataset(self.fingerprint, self.config, self.labels[start:stop], self.features[start:stop])


def bernoulli_statuses(rng: np.random.Generator, grid: Grid, p_out: float,
                       switchable: np.ndarray | None = None) -> np.ndarray:
    """One pre-rejection draw: each switchable line is out with probability ``p_out``."""
    if switchable is None:
        switchable = grid.switchable_mask
    out = (rng.random(grid.n_branches) < p_out) & switchable
    return (~out).astype(np.uint8)


def sample_topology(rng: np.random.Generator, grid: Grid, p_out: float,
                    max_rejections: int = 10_000) -> tuple[np.ndarray, int]:
    """Bernoulli outages on switchable lines, resampled whole until connected.

    Returns the accepted topology and the number of rejected draws.
    """
    switchable = grid.switchable_mask
    for rejected in range(max_rejections + 1):
        s = bernoulli_statuses(rng, grid, p_out, switchable)
        if is_connected(grid, s):
            return s, rejected
    raise RejectionBudgetExceeded(
        f"no connected topology in {max_rejections + 1} draws at p_out={p_out}"
    )


def accepted_mean_outages(grid: Grid, p_out: float, draws: np.ndarray) -> float:
    """Mean outage count among connected topologies, using fixed uniform ``draws``."""
    switchable = grid.switchable_mask
    total = accepted = 0
    for u in draws:
        out = (u < p_out) & switchable
        if is_connected(grid, ~out):
            total += int(out.sum())
            accepted += 1
    return total / accepted if accepted else float("inf")


def calibrate_p_out(grid: Grid, target_mean: float, draws: int = 20_000, seed: int = 0,
                    tol: float = 1e-4) -> float:
    """Bernoulli rate whose connected (accepted) samples average ``target_mean`` outages.

    Bisection with common random numbers, so the result is deterministic
    given ``seed``. The accepted mean is below ``p_out * switchable`` because
    rejection discards the draws with the most outages.
    """
    if not 0 < target_mean < grid.n_switchable:
        raise ValueError(f"target mean must be in (0, {grid.n_switchable})")
    u = np.random.default_rng(seed).random((draws, grid.n_branches))
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if accepted_mean_outages(grid, mid, u) < target_mean:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def sample_injections(rng: np.random.Generator, grid: Grid,
                      theta_max: float) -> tuple[np.ndarray, np.ndarray]:
    """Uniform baseline angles on [0, theta_max] and the injections they imply."""
    theta = rng.uniform(0.0, theta_max, grid.n_buses)
    return theta, injections_from_angles(grid, grid.all_active(), theta)


def _draw(rng: np.random.Generator, grid: Grid, config: GenConfig,
          observed: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    s, rejected = sample_topology(rng, grid, config.p_out, config.max_rejections_per_sample)
    _, p = sample_injections(rng, grid, config.theta_max)
    theta = solve_angles(grid, s, p)
    angles = theta[observed] + rng.normal(0.0, config.noise_std_rad, len(observed))
    features = np.concatenate([angles, p]) if config.injection_measured else angles
    return s, features, rejected


def make_sample(rng: np.random.Generator, grid: Grid, config: GenConfig) -> Sample:
    s, features, _ = _draw(rng, grid, config, config.observed(grid))
    return Sample(s, features)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for sample ``index``; identical on every worker layout."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def _generate_range(grid: Grid, config: GenConfig, start: int, stop: int):
    observed = config.observed(grid)
    n = stop - start
    labels = np.empty((n, grid.n_branches), dtype=np.uint8)
    features = np.empty((n, config.feature_dim(grid)))
    rejected = 0
    for j in range(n):
        s, y, r = _draw(sample_rng(config.seed, start + j), grid, config, observed)
        labels[j], features[j] = s, y
        rejected += r
    return labels, features, rejected


def generate_dataset(grid: Grid, config: GenConfig, count: int, workers: int = 1,
                     chunk_size: int = 5000) -> Dataset:
    if count < 0:
        raise ValueError("count must be nonnegative")
    bounds = [(a, min(a + chunk_size, count)) for a in range(0, count, chunk_size)]
    if workers > 1 and len(bounds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_generate_range, *zip(*[(grid, config, a, b) for a, b in bounds])))
    else:
        parts = [_generate_range(grid, config, a, b) for a, b in bounds]
    k = config.feature_dim(grid)
    labels = np.concatenate([p[0] for p in parts]) if parts else np.empty((0, grid.n_branches), np.uint8)
    features = np.concatenate([p[1] for p in parts]) if parts else np.empty((0, k))
    return Dataset(grid.fingerprint(), config, labels, features, sum(p[2] for p in parts))


def split_dataset(d: Dataset, fractions: Sequence[float]) -> tuple[Dataset, ...]:
    """Contiguous splits in generation order, sizes ``floor(f * I)``."""
    if not fractions or any(not f > 0 for f in fractions):
        raise ValueError("split fractions must be positive")
    if sum(fractions) > 1 + 1e-9:
        raise ValueError(f"split fractions sum to {sum(fractions)} > 1")
    out, start = [], 0
    for f in fractions:
        # guard against 2/3 * 300000 landing a hair under the integer
        size = math.floor(f * len(d) + 1e-9)
        out.append(d.subset(start, start + size))
        start += size
    return tuple(out)


def save_dataset(d: Dataset, path) -> None:
    cfg = d.config.to_json().encode("utf-8")
    count, k = d.features.shape
    n_lines = d.labels.shape[1]
    nbytes = (n_lines + 7) // 8
    rec = np.empty(count, dtype=[("s", "u1", (nbytes,)), ("y", "<f8", (k,))])
    rec["s"] = np.packbits(d.labels, axis=1, bitorder="little").reshape(count, nbytes)
    rec["y"] = d.features
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, d.fingerprint, len(cfg)))
        fh.write(cfg)
        fh.write(_SIZES.pack(count, k, n_lines))
        fh.write(rec.tobytes())


def load_dataset(path, fingerprint: bytes | None = None) -> Dataset:
    """Read a dataset file; if ``fingerprint`` is given it must match."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise DatasetFormatError("file too short for a dataset header")
    magic, version, fp, cfg_len = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DatasetFormatError("not a dataset file (bad magic)")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported dataset format version {version}")
    off = _HEADER.size
    if len(blob) < off + cfg_len + _SIZES.size:
        raise DatasetFormatError("truncated dataset header")
    try:
        config = GenConfig.from_json(blob[off:off + cfg_len].decode("utf-8"))
    except (ValueError, TypeError) as exc:
        raise DatasetFormatError(f"corrupt generation config: {exc}") from None
    off += cfg_len
    count, k, n_lines = _SIZES.unpack_from(blob, off)
    off += _SIZES.size
    nbytes = (n_lines + 7) // 8
    dtype = np.dtype([("s", "u1", (nbytes,)), ("y", "<f8", (k,))])
    if len(blob) - off != count * dtype.itemsize:
        raise DatasetFormatError(
            f"expected {count} samples ({count * dtype.itemsize} bytes), found {len(blob) - off} bytes"
        )
    if fingerprint is not None and fingerprint != fp:
        raise FingerprintMismatch("dataset was generated for a different grid")
    rec = np.frombuffer(blob, dtype=dtype, count=count, offset=off)
    labels = np.unpackbits(rec["s"].reshape(count, nbytes), axis=1, count=n_lines, bitorder="little")
    features = rec["y"].reshape(count, k).astype(np.float64)
    return Dataset(fp, config, labels, features)


def export_csv(d: Dataset, fh) -> None:
    writer = csv.writer(fh)
    writer.writerow([f"s_{i}" for i in range(d.n_lines)] + [f"y_{j}" for j in range(d.feature_dim)])
    for s, y in zip(d.labels, d.features):
        writer.writerow([int(v) for v in s] + [repr(float(v)) for v in y])
