"""Labeled dataset production: sampling, generation, standardization, splits.

A record is one solved parameter set: a pair of 100x100 out-of-plane
magnetization images (top and bottom layer) plus the labels
(theta in degrees, J and D in meV) and the solver seed that produced it.
Datasets round-trip through a little-endian binary format with magic "SFDG".
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np

from .lattice import (
    CouplingProfile,
    LatticeGraph,
    build_superlattice,
    commensurate_angle,
    commensurate_indices_in_range,
)
from .spinsim import HamiltonianParams, SolverConfig, ground_state, rasterize

log = logging.getLogger(__name__)

MAGIC = b"SFDG"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIQII")  # magic, version, flags, count, height, width
_FLAG_STANDARDIZED = 1

J_RANGE = (1.0, 10.0)
D_RANGE = (0.01, 0.3)
THETA_RANGE_DEG = (1.01, 3.89)  # quoted sampling bounds; actual grid is commensurate

FM_THRESHOLD = 0.99
LABEL_NAMES = ("theta", "J", "D")


class DatasetFormatError(ValueError):
    pass


class DegenerateDataError(ValueError):
    pass


def default_m_indices() -> list[int]:
    return commensurate_indices_in_range(*THETA_RANGE_DEG)


def label_ranges(m_indices=None) -> dict[str, tuple[float, float]]:
    """Min-max normalization ranges per label.

    theta uses the exact commensurate endpoints of the sampled index set so
    normalized labels span [0, 1] exactly.
    """
    ms = list(m_indices) if m_indices is not None else default_m_indices()
    thetas = [commensurate_angle(m) for m in ms]
    lo, hi = min(thetas), max(thetas)
    if lo == hi:
        # single-angle dataset: theta is a constant label; pad the span so
        # normalization stays well-defined (target = 0.5 everywhere)
        lo, hi = lo - 0.5, hi + 0.5
    return {"theta": (lo, hi), "J": J_RANGE, "D": D_RANGE}


@dataclass(frozen=True)
class ParamSample:
    m: int
    J: float
    D: float

    @property
    def theta_deg(self) -> float:
        return commensurate_angle(self.m)


def _draw_sample(rng: np.random.Generator, m_indices) -> ParamSample:
    m = int(m_indices[rng.integers(len(m_indices))])
    j = float(rng.uniform(*J_RANGE))
    d = float(rng.uniform(*D_RANGE))
    return ParamSample(m=m, J=j, D=d)


def sample_params(rng_seed: int, count: int, m_indices=None) -> list[ParamSample]:
    """Independent uniform draws: m over the commensurate grid, J and D over
    their sampling ranges.  Deterministic per seed."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if m_indices is None:
        m_indices = default_m_indices()
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    return [_draw_sample(rng, m_indices) for _ in range(count)]


def is_ferromagnetic(graph: LatticeGraph, spins, threshold: float = FM_THRESHOLD) -> bool:
    """True iff every layer present in the graph is uniformly polarized:
    |per-layer mean S_z| > threshold."""
    s = np.asarray(spins, dtype=float)
    for code in np.unique(graph.layers):
        mz = s[graph.layers == code, 2].mean()
        if abs(mz) <= threshold:
            return False
    return True


@dataclass(frozen=True)
class SampleRecord:
    """One solved sample: both layer images plus its labels and solve seed."""

    top: np.ndarray
    bottom: np.ndarray
    theta_deg: float
    J: float
    D: float
    seed: int


@dataclass
class Dataset:
    """In-memory dataset: images (n, 2, h, w) float32 with channel 0 = top
    layer, labels (n, 3) float64 ordered (theta, J, D), per-record seeds."""

    images: np.ndarray
    labels: np.ndarray
    seeds: np.ndarray
    standardized: bool = False
    pixel_stats: tuple[float, float] | None = None

    def __len__(self) -> int:
        return len(self.images)

    def record(self, i: int) -> SampleRecord:
        theta, j, d = self.labels[i]
        return SampleRecord(
            top=self.images[i, 0], bottom=self.images[i, 1],
            theta_deg=float(theta), J=float(j), D=float(d),
            seed=int(self.seeds[i]),
        )

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(
            images=self.images[idx].copy(),
            labels=self.labels[idx].copy(),
            seeds=self.seeds[idx].copy(),
            standardized=self.standardized,
            pixel_stats=self.pixel_stats,
        )

    def flat_inputs(self) -> np.ndarray:
        """(n, 2*h*w) float32 view for network input."""
        return self.images.reshape(len(self), -1)


@dataclass
class DatasetManifest:
    record_count: int
    image_shape: tuple[int, int]
    pixel_stats: tuple[float, float]
    label_stats: dict
    generation_seed: int
    format_version: int = FORMAT_VERSION
    standardized: bool = False
    m_indices: list | None = None
    profile: dict | None = None
    solver: dict | None = None
    fm_excluded: int = 0
    nonconverged_dropped: int = 0

    def to_json(self) -> str:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        d["pixel_stats"] = list(self.pixel_stats)
        return json.dumps(d, sort_keys=True, indent=2)

    def hash(self) -> str:
        payload = json.dumps(json.loads(self.to_json()), sort_keys=True,
                             separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def load_manifest(path) -> DatasetManifest:
    d = json.loads(Path(path).read_text())
    d["image_shape"] = tuple(d["image_shape"])
    d["pixel_stats"] = tuple(d["pixel_stats"])
    return DatasetManifest(**d)


def manifest_path(dataset_path) -> Path:
    return Path(str(dataset_path) + ".manifest.json")


# solver settings used for record generation: the image is insensitive to
# torque below ~1e-3 meV, and a slightly longer anneal avoids metastable drops
GENERATION_SOLVER = SolverConfig(
    anneal_per_site=300, torque_tol=1e-3, max_descent_iters=6000
)


def _record_seed(master_seed: int, index: int, attempt: int) -> int:
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(index, attempt))
    return int(ss.generate_state(1, np.uint64)[0])


def generate_dataset(samples, out_path, master_seed: int,
                     solver_cfg: SolverConfig | None = None,
                     profile: CouplingProfile | None = None,
                     m_indices=None,
                     image_shape: tuple[int, int] = (100, 100),
                     max_attempts_per_record: int = 50) -> DatasetManifest:
    """Solve every sample, rasterize both layers, and persist the dataset.

    Ferromagnetic ground states carry no domain structure and are replaced by
    fresh parameter draws until the requested count is met; non-converged
    solves are likewise dropped (and logged).  Fully deterministic per
    ``master_seed``: record solve seeds and replacement draws all derive
    from it.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one sample")
    if solver_cfg is None:
        solver_cfg = GENERATION_SOLVER
    if profile is None:
        profile = CouplingProfile()
    if m_indices is None:
        m_indices = sorted({s.m for s in samples})

    replacement_rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(entropy=master_seed, spawn_key=(1,)))
    )
    graphs: dict[int, LatticeGraph] = {}
    h, w = image_shape
    n = len(samples)
    images = np.empty((n, 2, h, w), dtype=np.float32)
    labels = np.empty((n, 3), dtype=np.float64)
    seeds = np.empty(n, dtype=np.uint64)
    fm_excluded = 0
    nonconverged = 0

    for i in range(n):
        sample = samples[i]
        for attempt in range(max_attempts_per_record):
            graph = graphs.get(sample.m)
            if graph is None:
                graph = graphs.setdefault(sample.m, build_superlattice(sample.m, profile))
            seed = _record_seed(master_seed, i, attempt)
            params = HamiltonianParams(J=sample.J, D=sample.D)
            result = ground_state(graph, params, replace(solver_cfg, seed=seed))
            if not result.converged:
                nonconverged += 1
                sample = _draw_sample(replacement_rng, m_indices)
                continue
            if is_ferromagnetic(graph, result.spins):
                fm_excluded += 1
                sample = _draw_sample(replacement_rng, m_indices)
                continue
            images[i, 0] = rasterize(graph, result.spins, "top", image_shape).pixels
            images[i, 1] = rasterize(graph, result.spins, "bottom", image_shape).pixels
            labels[i] = (sample.theta_deg, sample.J, sample.D)
            seeds[i] = seed
            break
        else:
            raise RuntimeError(
                f"record {i}: no usable ground state in {max_attempts_per_record} attempts"
            )
        if (i + 1) % 200 == 0:
            log.info("generated %d/%d records", i + 1, n)

    if fm_excluded or nonconverged:
        log.info("excluded %d ferromagnetic and %d non-converged solves",
                 fm_excluded, nonconverged)

    ds = Dataset(images=images, labels=labels, seeds=seeds)
    write_dataset(ds, out_path)
    pixels = images.astype(np.float64)
    manifest = DatasetManifest(
        record_count=n,
        image_shape=image_shape,
        pixel_stats=(float(pixels.mean()), float(pixels.std())),
        label_stats={k: list(v) for k, v in label_ranges(m_indices).items()},
        generation_seed=master_seed,
        m_indices=[int(m) for m in m_indices],
        profile=asdict(profile),
        solver=asdict(solver_cfg),
        fm_excluded=fm_excluded,
        nonconverged_dropped=nonconverged,
    )
    manifest.save(manifest_path(out_path))
    return manifest


def standardize(ds: Dataset) -> tuple[Dataset, tuple[float, float]]:
    """Shift and scale all pixels to zero mean, unit variance (global stats).

    The returned stats must be reused verbatim for validation/test data via
    :func:`apply_standardization`.  Standardizing twice is rejected.
    """
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    if ds.standardized:
        raise DatasetFormatError("dataset is already standardized")
    pixels = ds.images.astype(np.float64)
    mean = float(pixels.mean())
    std = float(pixels.std())
    if std == 0.0:
        raise DegenerateDataError("all pixels are equal; cannot standardize")
    out = apply_standardization(ds, (mean, std))
    return out, (mean, std)


def apply_standardization(ds: Dataset, stats: tuple[float, float]) -> Dataset:
    if ds.standardized:
        raise DatasetFormatError("dataset is already standardized")
    mean, std = stats
    if std <= 0.0:
        raise DegenerateDataError(f"standardization std must be > 0, got {std}")
    return Dataset(
        images=((ds.images - np.float32(mean)) / np.float32(std)).astype(np.float32),
        labels=ds.labels.copy(),
        seeds=ds.seeds.copy(),
        standardized=True,
        pixel_stats=(float(mean), float(std)),
    )


@dataclass(frozen=True)
class SplitSpec:
    """Subset-then-split: n_total records drawn without replacement, divided
    7/8 train and 1/8 validation."""

    n_total: int
    seed: int

    TRAIN_FRACTION = 7.0 / 8.0

    def __post_init__(self):
        if self.n_total < 8 or self.n_total % 8:
            raise ValueError(f"n_total must be a positive multiple of 8, got {self.n_total}")

    @property
    def n_train(self) -> int:
        return (self.n_total * 7) // 8

    @property
    def n_val(self) -> int:
        return self.n_total - self.n_train


def split_indices(pool_size: int, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    if pool_size < spec.n_total:
        raise ValueError(f"pool of {pool_size} records cannot supply n_total={spec.n_total}")
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    chosen = rng.choice(pool_size, size=spec.n_total, replace=False)
    return chosen[:spec.n_train], chosen[spec.n_train:]


def make_split(pool: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    train_idx, val_idx = split_indices(len(pool), spec)
    return pool.subset(train_idx), pool.subset(val_idx)


def write_dataset(ds: Dataset, path) -> None:
    """Binary layout: 28-byte header, then per record two little-endian
    float32 images, three float64 labels (theta, J, D) and one uint64 seed."""
    h, w = ds.image_shape
    flags = _FLAG_STANDARDIZED if ds.standardized else 0
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, flags, len(ds), h, w))
        for i in range(len(ds)):
            f.write(ds.images[i].astype("<f4").tobytes())
            f.write(ds.labels[i].astype("<f8").tobytes())
            f.write(ds.seeds[i:i + 1].astype("<u8").tobytes())


def record_nbytes(image_shape: tuple[int, int] = (100, 100)) -> int:
    h, w = image_shape
    return 2 * h * w * 4 + 3 * 8 + 8


def header_nbytes() -> int:
    return _HEADER.size


def read_dataset(path, validate: bool = True) -> Dataset:
    """Inverse of :func:`write_dataset`; checks magic, version and size, and
    (for raw datasets) the image and label range invariants."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, flags, count, h, w = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported format version {version}")
    per = record_nbytes((h, w))
    expected = _HEADER.size + count * per
    if len(raw) != expected:
        raise DatasetFormatError(
            f"{path}: size {len(raw)} != expected {expected} for {count} records"
        )

    images = np.empty((count, 2, h, w), dtype=np.float32)
    labels = np.empty((count, 3), dtype=np.float64)
    seeds = np.empty(count, dtype=np.uint64)
    off = _HEADER.size
    img_bytes = 2 * h * w * 4
    for i in range(count):
        images[i] = np.frombuffer(raw, "<f4", 2 * h * w, off).reshape(2, h, w)
        off += img_bytes
        labels[i] = np.frombuffer(raw, "<f8", 3, off)
        off += 24
        seeds[i] = np.frombuffer(raw, "<u8", 1, off)[0]
        off += 8

    standardized = bool(flags & _FLAG_STANDARDIZED)
    ds = Dataset(images=images, labels=labels, seeds=seeds, standardized=standardized)
    if validate:
        _validate_ranges(ds, path)
    return ds


def _validate_ranges(ds: Dataset, path) -> None:
    if not ds.standardized and len(ds):
        lo, hi = float(ds.images.min()), float(ds.images.max())
        if lo < -1.0 or hi > 1.0:
            raise DatasetFormatError(f"{path}: pixels outside [-1, 1] ({lo}, {hi})")
    if len(ds):
        # theta depends on the indices the dataset was generated with: use
        # its manifest when present, any commensurate angle otherwise
        mpath = manifest_path(path)
        if mpath.exists():
            stats = load_manifest(mpath).label_stats
            ranges = {k: tuple(v) for k, v in stats.items()}
        else:
            ranges = dict(label_ranges())
            ranges["theta"] = (0.0, 60.0)
        tol = 1e-9
        for k, name in enumerate(LABEL_NAMES):
            lo, hi = ranges[name]
            vmin, vmax = float(ds.labels[:, k].min()), float(ds.labels[:, k].max())
            if vmin < lo - tol or vmax > hi + tol:
                raise DatasetFormatError(
                    f"{path}: label {name} outside [{lo}, {hi}]: ({vmin}, {vmax})"
                )


def normalized_targets(ds: Dataset, target: str, m_indices=None) -> np.ndarray:
    """Regression targets min-max scaled to [0, 1] over the sampling range."""
    if target not in LABEL_NAMES:
        raise ValueError(f"target must be one of {LABEL_NAMES}, got {target!r}")
    lo, hi = label_ranges(m_indices)[target]
    col = LABEL_NAMES.index(target)
    return ((ds.labels[:, col] - lo) / (hi - lo)).astype(np.float64)
