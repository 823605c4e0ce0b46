"""Synthetic data streams, file ingestion, and the sample splitter.

Every synthetic sample is a pure function of (master seed, lane, global
index): randomness comes from a counter-based keyed hash (splitmix64
finalizer) fed through Box-Muller, not from sequential draws.  Two
consequences the simulators rely on:

* a centralized run and a distributed run that consume the same global
  indices see the exact same samples, which turns the exact-averaging
  equivalences into machine-precision checks;
* trials and mini-batches can be generated in any order or in parallel
  without changing a single bit of the stream.

Lanes separate non-overlapping uses of the same seed: 0 for the training
stream, 1 for held-out evaluation samples, 2 for ground-truth parameter
draws, 3 for algorithm initialization.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .losses import SpectrumSpec

STREAM_KINDS = ("logistic_gaussian", "conditional_gaussian", "gaussian_covariance", "file")

LANE_TRAIN = 0
LANE_HOLDOUT = 1
LANE_TRUTH = 2
LANE_INIT = 3
LANE_CALIB = 4

_GOLD = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_AUX_SLOT = 1 << 20  # auxiliary draws (labels) sit far above any coordinate slot
_INV_2_53 = float(2.0 ** -53)


class EndOfStreamError(RuntimeError):
    """Raised when a file-backed stream is asked for samples past its end."""


def _mix(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer; bijective avalanche mix on uint64 (mod 2^64)."""
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * _MIX1
        x = (x ^ (x >> np.uint64(27))) * _MIX2
        return x ^ (x >> np.uint64(31))


def stream_key(seed: int, lane: int) -> np.uint64:
    with np.errstate(over="ignore"):
        k = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + _GOLD)
        return _mix(k ^ (np.uint64(lane) * _GOLD + _GOLD))


def derive_seed(master_seed: int, index: int) -> int:
    """Stable sub-seed for trial ``index``; documented and version-frozen."""
    with np.errstate(over="ignore"):
        return int(_mix(stream_key(master_seed, 7) + np.uint64(index) * _GOLD))


def _uniforms(key: np.uint64, indices: np.ndarray, slot0: int, nslots: int,
              open_low: bool = False) -> np.ndarray:
    """(len(indices), nslots) uniforms on [0,1) (or (0,1] when open_low)."""
    with np.errstate(over="ignore"):
        base = _mix(key + indices.astype(np.uint64) * _GOLD)
        slots = np.arange(slot0, slot0 + nslots, dtype=np.uint64) * _MIX1 + _GOLD
        h = _mix(base[:, None] ^ slots[None, :]) >> np.uint64(11)
    if open_low:
        return (h + np.uint64(1)).astype(np.float64) * _INV_2_53
    return h.astype(np.float64) * _INV_2_53


def _normals(key: np.uint64, indices: np.ndarray, count: int, slot0: int = 0) -> np.ndarray:
    """(len(indices), count) standard normals via Box-Muller on hashed uniforms."""
    pairs = (count + 1) // 2
    u1 = _uniforms(key, indices, slot0, pairs, open_low=True)
    u2 = _uniforms(key, indices, slot0 + pairs, pairs)
    radius = np.sqrt(-2.0 * np.log(u1))
    theta = (2.0 * math.pi) * u2
    out = np.empty((indices.shape[0], 2 * pairs), dtype=np.float64)
    out[:, 0::2] = radius * np.cos(theta)
    out[:, 1::2] = radius * np.sin(theta)
    return out[:, :count]


# ---------------------------------------------------------------------------
# Ground truths
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LogisticTruth:
    """Augmented regression coefficients (intercept last)."""
    model: np.ndarray


@dataclass(frozen=True)
class ConditionalGaussianTruth:
    mean_neg: np.ndarray
    mean_pos: np.ndarray
    noise_var: float


@dataclass(frozen=True)
class CovarianceTruth:
    spectrum: SpectrumSpec
    basis: np.ndarray  # orthonormal columns; Sigma = basis diag(lam) basis'


# ---------------------------------------------------------------------------
# Synthetic streams
# ---------------------------------------------------------------------------

class LogisticGaussianStream:
    """x ~ N(0, I_d); y Bernoulli from the logistic model of a random truth.

    The truth w* (including intercept) is a standard normal draw keyed by the
    seed, so each trial seed defines its own regression problem.
    """

    kind = "logistic_gaussian"

    def __init__(self, dimension: int, seed: int):
        self.dimension = dimension
        self.seed = seed
        w = _normals(stream_key(seed, LANE_TRUTH), np.asarray([1], dtype=np.int64),
                     dimension + 1)[0]
        self.truth = LogisticTruth(model=w)

    def fetch(self, indices: np.ndarray, lane: int = LANE_TRAIN):
        indices = np.asarray(indices, dtype=np.int64).ravel()
        key = stream_key(self.seed, lane)
        x = _normals(key, indices, self.dimension)
        w = self.truth.model
        margin = x @ w[:-1] + w[-1]
        prob = 1.0 / (1.0 + np.exp(-np.clip(margin, -40.0, 40.0)))
        u = _uniforms(key, indices, _AUX_SLOT, 1)[:, 0]
        y = np.where(u < prob, 1, -1).astype(np.int64)
        return x, y


class ConditionalGaussianStream:
    """y uniform on {-1,+1}; x ~ N(mu_y, noise_var * I_d).

    Class means are standard normal draws keyed by the seed.
    """

    kind = "conditional_gaussian"

    def __init__(self, dimension: int, seed: int, noise_var: float = 2.0):
        if noise_var <= 0:
            raise ValueError("noise_var must be positive")
        self.dimension = dimension
        self.seed = seed
        key = stream_key(seed, LANE_TRUTH)
        means = _normals(key, np.asarray([1, 2], dtype=np.int64), dimension)
        self.truth = ConditionalGaussianTruth(mean_neg=means[0], mean_pos=means[1],
                                              noise_var=float(noise_var))

    def fetch(self, indices: np.ndarray, lane: int = LANE_TRAIN):
        indices = np.asarray(indices, dtype=np.int64).ravel()
        key = stream_key(self.seed, lane)
        g = _normals(key, indices, self.dimension)
        u = _uniforms(key, indices, _AUX_SLOT, 1)[:, 0]
        y = np.where(u < 0.5, -1, 1).astype(np.int64)
        t = self.truth
        centers = np.where((y == 1)[:, None], t.mean_pos[None, :], t.mean_neg[None, :])
        x = centers + math.sqrt(t.noise_var) * g
        return x, y


class GaussianCovarianceStream:
    """z ~ N(0, Sigma) with Sigma = basis diag(lam) basis'.

    Only the top eigenvalue and the gap are usually pinned by an experiment;
    the remaining spectrum defaults to a linear decay from lambda_2 down to
    0.1 (or stays flat at lambda_2 when lambda_2 < 0.1).  The basis is a
    seeded orthonormal frame (QR of a Gaussian matrix with a fixed sign
    convention) unless ``basis="identity"`` is requested.
    """

    kind = "gaussian_covariance"

    def __init__(self, dimension: int, seed: int, top: float = 1.0, gap: float = 0.1,
                 eigenvalues=None, basis: str = "random"):
        self.dimension = dimension
        self.seed = seed
        if eigenvalues is None:
            if not 0.0 < gap <= top:
                raise ValueError("need 0 < gap <= top eigenvalue")
            second = top - gap
            tail = np.linspace(second, min(second, 0.1), dimension - 1)
            lam = np.concatenate([[top], tail])
        else:
            lam = np.asarray(eigenvalues, dtype=np.float64)
            if lam.shape[0] != dimension:
                raise ValueError("eigenvalue list length must equal dimension")
        spectrum = SpectrumSpec(eigenvalues=tuple(float(v) for v in lam))
        if basis == "identity":
            q = np.eye(dimension)
        elif basis == "random":
            key = stream_key(seed, LANE_TRUTH)
            g = _normals(key, np.arange(1, dimension + 1, dtype=np.int64), dimension)
            q, r = np.linalg.qr(g)
            q = q * np.sign(np.diag(r))  # fix the sign ambiguity for reproducibility
        else:
            raise ValueError(f"unknown basis choice {basis!r}")
        self.truth = CovarianceTruth(spectrum=spectrum, basis=q)
        self._scale = np.sqrt(spectrum.as_array())

    def fetch(self, indices: np.ndarray, lane: int = LANE_TRAIN) -> np.ndarray:
        indices = np.asarray(indices, dtype=np.int64).ravel()
        key = stream_key(self.seed, lane)
        g = _normals(key, indices, self.dimension)
        # einsum keeps each sample a bit-exact pure function of (seed, index)
        # regardless of how the fetch is batched (BLAS matmul does not)
        return np.einsum("md,kd->mk", g * self._scale, self.truth.basis)


def init_unit_vector(seed: int, dimension: int) -> np.ndarray:
    """Seed-deterministic point on the unit sphere (shared across nodes)."""
    g = _normals(stream_key(seed, LANE_INIT), np.asarray([1], dtype=np.int64), dimension)[0]
    return g / np.linalg.norm(g)


# ---------------------------------------------------------------------------
# File-backed streams
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FileFormat:
    """CSV layout: one sample per row, optional final label column."""

    label_column: bool = False
    header: bool = False
    delimiter: str = ","


class FileStream:
    """Single-pass reader over a CSV sample file.

    Rows are consumed strictly in file order; requesting an index at or
    behind the cursor violates the single-pass contract and raises.  Skipped
    indices (the splitter's discarded samples) advance the cursor without
    returning data.
    """

    kind = "file"

    def __init__(self, path: str | Path, fmt: FileFormat = FileFormat(),
                 dimension: int | None = None):
        self.path = Path(path)
        self.fmt = fmt
        self._handle = open(self.path, "r", newline="")
        self._reader = csv.reader(self._handle, delimiter=fmt.delimiter)
        if fmt.header:
            next(self._reader, None)
        self._cursor = 0  # index of the last row handed out or skipped
        self.dimension: int | None = dimension or None
        self._pinned = dimension is not None
        self.truth = None

    def close(self) -> None:
        if not self._handle.closed:
            self._handle.close()

    def _next_row(self) -> list[float]:
        try:
            row = next(self._reader)
        except StopIteration:
            raise EndOfStreamError(f"{self.path}: stream exhausted after {self._cursor} samples")
        try:
            values = [float(v) for v in row]
        except ValueError as exc:
            raise ValueError(f"{self.path}: non-numeric field at row {self._cursor + 1}: {exc}")
        width = len(values) - (1 if self.fmt.label_column else 0)
        if self.dimension is None:
            if width < 1:
                raise ValueError(f"{self.path}: rows must have at least one feature")
            self.dimension = width
        elif width != self.dimension:
            what = "dimension mismatch at" if self._pinned and self._cursor == 0 else "ragged"
            raise ValueError(f"{self.path}: {what} row {self._cursor + 1} "
                             f"(expected {self.dimension} features, got {width})")
        self._cursor += 1
        return values

    def fetch(self, indices: np.ndarray, lane: int = LANE_TRAIN):
        if lane != LANE_TRAIN:
            raise ValueError("file streams only provide the training lane")
        indices = np.asarray(indices, dtype=np.int64).ravel()
        order = np.sort(indices)
        if order.shape[0] and order[0] <= self._cursor:
            raise ValueError("file streams are single-pass; indices must advance")
        rows = []
        for idx in order:
            while self._cursor < idx - 1:
                self._next_row()  # discarded by the splitter
            rows.append(self._next_row())
        data = np.asarray(rows, dtype=np.float64)
        if self.fmt.label_column:
            return data[:, :-1], data[:, -1].astype(np.int64)
        return data


def open_file_stream(path: str | Path, fmt: FileFormat = FileFormat(),
                     dimension: int | None = None) -> FileStream:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return FileStream(path, fmt, dimension=dimension)


def write_samples(path: str | Path, x: np.ndarray, y: np.ndarray | None = None,
                  fmt: FileFormat = FileFormat()) -> None:
    """Write a sample block in the CSV layout, 17 significant digits."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, delimiter=fmt.delimiter)
        if fmt.header:
            cols = [f"x{j}" for j in range(x.shape[1])]
            if y is not None:
                cols.append("y")
            writer.writerow(cols)
        for i in range(x.shape[0]):
            row = [f"{v:.17g}" for v in x[i]]
            if y is not None:
                row.append(str(int(y[i])))
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Splitter
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    """Network mini-batch geometry: B per iteration over N nodes, mu dropped."""

    batch: int
    nodes: int
    discarded: int = 0

    def __post_init__(self) -> None:
        if self.nodes < 1 or self.batch < 1 or self.batch % self.nodes != 0:
            raise ValueError(f"batch must be a positive multiple of nodes "
                             f"(B={self.batch}, N={self.nodes})")
        if self.discarded < 0:
            raise ValueError("discarded must be nonnegative")

    @property
    def local_batch(self) -> int:
        return self.batch // self.nodes

    @property
    def stride(self) -> int:
        return self.batch + self.discarded


def split_index(plan: SplitPlan, t: int, n: int, b: int) -> int:
    """Global stream index for within-batch slot b at node n, iteration t.

    All of t, n, b are 1-based.  With mu > 0 the trailing mu indices of each
    (B+mu)-block are never produced: they are dropped at the splitter.
    """
    if not 1 <= b <= plan.local_batch:
        raise ValueError(f"b out of range: {b}")
    if not 1 <= n <= plan.nodes:
        raise ValueError(f"n out of range: {n}")
    if t < 1:
        raise ValueError(f"t out of range: {t}")
    return b + (n - 1) * plan.local_batch + (t - 1) * plan.stride


def kept_block(plan: SplitPlan, t: int) -> np.ndarray:
    """(N, B/N) global indices consumed at iteration t, node-major."""
    start = (t - 1) * plan.stride
    return start + np.arange(1, plan.batch + 1, dtype=np.int64).reshape(plan.nodes,
                                                                        plan.local_batch)


def kept_span(plan: SplitPlan, t_first: int, t_count: int) -> np.ndarray:
    """(t_count, N, B/N) kept indices for a run of consecutive iterations."""
    starts = ((np.arange(t_first, t_first + t_count, dtype=np.int64) - 1)
              * plan.stride)[:, None, None]
    block = np.arange(1, plan.batch + 1, dtype=np.int64).reshape(1, plan.nodes,
                                                                 plan.local_batch)
    return starts + block


def generate(source, t_prime: int):
    """Single sample at global index t_prime: (x, y) or a raw vector z."""
    if t_prime < 1:
        raise ValueError("t_prime must be >= 1")
    out = source.fetch(np.asarray([t_prime], dtype=np.int64))
    if isinstance(out, tuple):
        x, y = out
        return x[0], int(y[0])
    return out[0]


def make_stream(kind: str, dimension: int, seed: int, **params):
    """Factory wiring a config-level stream spec to its generator class."""
    if kind == "logistic_gaussian":
        return LogisticGaussianStream(dimension, seed)
    if kind == "conditional_gaussian":
        return ConditionalGaussianStream(dimension, seed, **params)
    if kind == "gaussian_covariance":
        return GaussianCovarianceStream(dimension, seed, **params)
    if kind == "file":
        fmt = FileFormat(label_column=bool(params.get("label_column", False)),
                         header=bool(params.get("header", False)),
                         delimiter=params.get("delimiter", ","))
        return open_file_stream(params["path"], fmt, dimension=dimension or None)
    raise ValueError(f"unknown stream kind {kind!r}")
