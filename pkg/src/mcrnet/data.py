"""Quantized phase-shift data: grids, sample generators, task sampling, dataset files.

Phase values live on the K-bit grid Q = {0, step, ..., (2^K - 1) * step} with
step = 2*pi / 2^K.  Samples store both the grid radians and the normalized
[0, 1) view used as network input; normalized is defined as phases / (2*pi)
and the file format stores the normalized view as float32 (lossless for the
grid, since i / 2^K fits a 24-bit mantissa for K <= 16).
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, ShapeError, ZeroReferenceError

TWO_PI = 2.0 * math.pi

DATASET_MAGIC = b"PSID"
DATASET_VERSION = 1

GENERATORS = ("ramp-beam", "iid-uniform")


@dataclass(frozen=True)
class QuantizationSpec:
    """K-bit uniform grid on [0, 2*pi)."""

    bits: int = 4

    def __post_init__(self):
        if not 1 <= int(self.bits) <= 16:
            raise ConfigError(f"bits must be in [1, 16], got {self.bits}")

    @property
    def levels(self) -> int:
        return 1 << self.bits

    @property
    def step(self) -> float:
        return TWO_PI / self.levels

    def grid(self) -> np.ndarray:
        """The canonical grid values, shape (levels,), float64."""
        return np.arange(self.levels, dtype=np.float64) * self.step


def quantize_index(theta, spec: QuantizationSpec) -> np.ndarray:
    """Nearest grid index after wrapping theta into [0, 2*pi).

    Half-step ties round up; index 2^K wraps back to 0.  Works on scalars
    and arrays; returns int64 of the input shape.
    """
    t = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise ValueError("quantize: theta must be finite")
    wrapped = np.mod(t, TWO_PI)  # can land exactly on 2*pi for tiny negatives
    idx = np.floor(wrapped / spec.step + 0.5).astype(np.int64)
    return np.mod(idx, spec.levels)


def quantize(theta, spec: QuantizationSpec):
    """Map theta (radians, any shape) onto the grid. Scalar in, float out."""
    idx = quantize_index(theta, spec)
    out = idx.astype(np.float64) * spec.step
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class PhaseShiftSample:
    """One flattened phase matrix: grid radians plus the normalized view."""

    phases: np.ndarray      # (height*width,) float64, every entry on the grid
    normalized: np.ndarray  # phases / (2*pi), float64 in [0, 1)
    meta: dict = field(default_factory=dict)


def _make_sample(phases: np.ndarray, meta: dict) -> PhaseShiftSample:
    # normalized is defined by division so the pair is exactly consistent
    normalized = phases / TWO_PI
    phases.setflags(write=False)
    normalized.setflags(write=False)
    return PhaseShiftSample(phases=phases, normalized=normalized, meta=meta)


@dataclass(frozen=True)
class TaskSpec:
    """Distribution over phase matrices for one meta-learning task family."""

    height: int
    width: int
    bits: int = 4
    generator: str = "ramp-beam"
    n_ramps: int = 2
    freq_lo: float = 0.05
    freq_hi: float = 0.8

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"height and width must be >= 1, got {self.height}x{self.width}")
        if self.generator not in GENERATORS:
            raise ConfigError(f"unknown generator {self.generator!r}; expected one of {GENERATORS}")
        if self.n_ramps < 1:
            raise ConfigError(f"n_ramps must be >= 1, got {self.n_ramps}")
        if not (0.0 <= self.freq_lo <= self.freq_hi):
            raise ConfigError(f"need 0 <= freq_lo <= freq_hi, got [{self.freq_lo}, {self.freq_hi}]")
        QuantizationSpec(self.bits)  # range check

    @property
    def hw(self) -> int:
        return self.height * self.width

    @property
    def quantization(self) -> QuantizationSpec:
        return QuantizationSpec(self.bits)

    @classmethod
    def square(cls, hw: int, **kwargs) -> "TaskSpec":
        side = math.isqrt(hw)
        if side * side != hw:
            raise ConfigError(f"hw={hw} is not a perfect square; give height/width explicitly")
        return cls(height=side, width=side, **kwargs)


@dataclass(frozen=True)
class Task:
    """Support/query split drawn from one realization of a TaskSpec."""

    support: tuple
    query: tuple
    spec: TaskSpec
    ramp_slopes: np.ndarray | None = None  # (n_ramps, 2) for ramp-beam, else None


def draw_ramp_slopes(spec: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Per-task ramp slopes: magnitude uniform on [freq_lo, freq_hi], random sign."""
    mag = rng.uniform(spec.freq_lo, spec.freq_hi, size=(spec.n_ramps, 2))
    sign = np.where(rng.random(size=(spec.n_ramps, 2)) < 0.5, -1.0, 1.0)
    return mag * sign


def _ramp_field(height: int, width: int, slopes: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Phase of a superposition of unit phasors with linear phase ramps.

    Each ramp j contributes exp(i * (a_j*r + b_j*c + phi_j)); the field is the
    angle of their sum, wrapped into [0, 2*pi).  A single ramp reduces to a
    plain wrapped linear ramp; several produce interference fringes.
    """
    r = np.arange(height, dtype=np.float64)[None, :, None]
    c = np.arange(width, dtype=np.float64)[None, None, :]
    a = slopes[:, 0][:, None, None]
    b = slopes[:, 1][:, None, None]
    phi = offsets[:, None, None]
    acc = np.exp(1j * (a * r + b * c + phi)).sum(axis=0)
    return np.mod(np.angle(acc), TWO_PI)


def ramp_beam_samples(spec: TaskSpec, slopes: np.ndarray,
                      count: int, rng: np.random.Generator) -> list:
    """Generate `count` samples sharing the given slopes; offsets fresh per sample."""
    slopes = np.asarray(slopes, dtype=np.float64)
    if slopes.ndim != 2 or slopes.shape[1] != 2:
        raise ShapeError(f"slopes must have shape (n_ramps, 2), got {slopes.shape}")
    qspec = spec.quantization
    grid = qspec.grid()
    out = []
    for _ in range(count):
        offsets = rng.uniform(0.0, TWO_PI, size=slopes.shape[0])
        theta = _ramp_field(spec.height, spec.width, slopes, offsets)
        idx = quantize_index(theta, qspec)
        meta = {"generator": "ramp-beam", "height": spec.height,
                "width": spec.width, "bits": spec.bits}
        out.append(_make_sample(grid[idx].ravel(), meta))
    return out


def _iid_uniform_samples(spec: TaskSpec, count: int, rng: np.random.Generator) -> list:
    qspec = spec.quantization
    grid = qspec.grid()
    out = []
    for _ in range(count):
        idx = rng.integers(0, qspec.levels, size=spec.hw)
        meta = {"generator": "iid-uniform", "height": spec.height,
                "width": spec.width, "bits": spec.bits}
        out.append(_make_sample(grid[idx], meta))
    return out


def generate_psi(spec: TaskSpec, count: int, seed) -> list:
    """Draw `count` samples from one task realization.

    For ramp-beam the slopes are drawn once per call, so all returned samples
    belong to the same task; offsets vary per sample.  `seed` is anything
    np.random.default_rng accepts.
    """
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    rng = np.random.default_rng(seed)
    if spec.generator == "ramp-beam":
        slopes = draw_ramp_slopes(spec, rng)
        return ramp_beam_samples(spec, slopes, count, rng)
    return _iid_uniform_samples(spec, count, rng)


def sample_task(spec: TaskSpec, k_support: int = 100, k_query: int = 64, seed=0) -> Task:
    """Support and query sets from one task, on disjoint RNG streams.

    Ramp slopes come from a third stream so support/query share the exact
    task parameters while their sample draws never overlap.
    """
    if k_support < 0 or k_query < 0:
        raise ValueError(f"set sizes must be >= 0, got {k_support}/{k_query}")
    params_ss, support_ss, query_ss = np.random.SeedSequence(seed).spawn(3)
    slopes = None
    if spec.generator == "ramp-beam":
        slopes = draw_ramp_slopes(spec, np.random.default_rng(params_ss))
        support = ramp_beam_samples(spec, slopes, k_support, np.random.default_rng(support_ss))
        query = ramp_beam_samples(spec, slopes, k_query, np.random.default_rng(query_ss))
    else:
        support = _iid_uniform_samples(spec, k_support, np.random.default_rng(support_ss))
        query = _iid_uniform_samples(spec, k_query, np.random.default_rng(query_ss))
    return Task(support=tuple(support), query=tuple(query), spec=spec, ramp_slopes=slopes)


def as_batch(samples, dtype=np.float32) -> np.ndarray:
    """Stack normalized views into the (batch, length, 1) layout the model eats."""
    if not samples:
        raise ValueError("as_batch: need at least one sample")
    flat = np.stack([s.normalized for s in samples])
    return flat.astype(dtype)[..., None]


def nmse(x_hat, x) -> float:
    """Mean squared error normalized by reference power: E||x_hat-x||^2 / E||x||^2."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_hat.shape != x.shape:
        raise ShapeError(f"nmse: shapes differ, {x_hat.shape} vs {x.shape}")
    denom = float(np.sum(np.square(x)))
    if denom == 0.0:
        raise ZeroReferenceError("nmse: reference batch is all zeros")
    num = float(np.sum(np.square(x_hat - x)))
    return num / denom


_HEADER = struct.Struct("<4sHIIBI")  # magic, version, height, width, bits, count


def save_dataset(samples, path, spec: TaskSpec | None = None) -> None:
    """Write samples to a PSID file.

    Geometry comes from `spec` when given, else from the sample metadata;
    an empty dataset needs the explicit spec.
    """
    samples = list(samples)
    if spec is not None:
        height, width, bits = spec.height, spec.width, spec.bits
    elif samples:
        meta = samples[0].meta
        try:
            height, width, bits = int(meta["height"]), int(meta["width"]), int(meta["bits"])
        except KeyError as exc:
            raise FormatError(f"save_dataset: sample meta lacks {exc}") from None
    else:
        raise ValueError("save_dataset: empty sample list needs an explicit spec")
    hw = height * width
    for i, s in enumerate(samples):
        if s.normalized.shape != (hw,):
            raise ShapeError(f"sample {i}: expected length {hw}, got {s.normalized.shape}")
    payload = np.stack([s.normalized for s in samples]).astype("<f4") if samples \
        else np.zeros((0, hw), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, height, width, bits, len(samples)))
        fh.write(payload.tobytes())


def load_dataset(path) -> list:
    """Read a PSID file back into samples, validating grid membership."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"dataset file truncated: {len(raw)} bytes, header needs {_HEADER.size}")
    magic, version, height, width, bits, count = _HEADER.unpack_from(raw, 0)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}")
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    qspec = QuantizationSpec(bits)
    hw = height * width
    expected = count * hw * 4
    body = raw[_HEADER.size:]
    if len(body) != expected:
        raise FormatError(f"dataset payload truncated or oversized: "
                          f"expected {expected} bytes for {count} samples, found {len(body)}")
    values = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(count, hw)
    scaled = values * qspec.levels  # exact: multiply by a power of two
    if values.size and (not np.all((values >= 0.0) & (values < 1.0))
                        or not np.array_equal(scaled, np.floor(scaled))):
        raise FormatError(f"dataset values are not on the {bits}-bit grid")
    out = []
    for row in values:
        meta = {"generator": "file", "height": height, "width": width, "bits": bits}
        out.append(_make_sample(row * TWO_PI, meta))
    return out


def export_csv(samples, path) -> None:
    """Debug dump: one row of normalized values per sample."""
    samples = list(samples)
    if not samples:
        raise ValueError("export_csv: nothing to write")
    width = samples[0].normalized.shape[0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"v{i}" for i in range(width)])
        for s in samples:
            writer.writerow([repr(float(v)) for v in s.normalized])
