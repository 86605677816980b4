"""Loss-ensemble statistics and scaling-curve fits.

Losses across network realizations are summarized by arithmetic mean,
geometric mean and median (the geometric mean is the robust headline
statistic).  Scaling exponents come from ordinary least squares in log-log
space: loss ~ N^(-alpha); exponent-versus-size trends from a log-linear fit
alpha = a ln(N) + b.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AverageReport:
    n: int
    arith_mean: float
    arith_se: float
    geo_mean: float
    geo_se: float
    median: float
    mad: float


@dataclass(frozen=True)
class PowerLawFit:
    alpha: float            # exponent: loss ~ N^(-alpha)
    alpha_se: float         # nan when only 2 points were fit
    log_prefactor: float    # intercept of ln(loss) on ln(N)
    log_prefactor_se: float
    r_squared: float
    n_points: int
    n_range: tuple[float, float]  # (min N, max N) actually fit


@dataclass(frozen=True)
class LogFit:
    slope: float
    slope_se: float
    intercept: float
    intercept_se: float
    n_points: int


@dataclass(frozen=True)
class LossRecord:
    """One realization's test result; the CSV interchange row."""

    target: str
    arch_id: str
    n_m: int
    n_d: int
    seed: int
    test_mse: float


@dataclass(frozen=True)
class LossEnsemble:
    """Losses of one configuration across network realizations."""

    target: str
    arch_id: str
    n_m: int
    n_d: int
    losses: tuple

    def __post_init__(self):
        _as_positive(self.losses)

    def summary(self) -> "AverageReport":
        return summarize(self.losses)


def _as_positive(losses) -> np.ndarray:
    if isinstance(losses, LossEnsemble):
        losses = losses.losses
    x = np.asarray(losses, dtype=np.float64)
    if x.ndim != 1 or len(x) == 0:
        raise ValueError("need a non-empty 1-d loss array")
    if np.any(x <= 0) or not np.all(np.isfinite(x)):
        raise ValueError("losses must be positive and finite")
    return x


def summarize(losses) -> AverageReport:
    """Three location estimates with dispersion.  The geometric standard
    error is geo_mean * std(log losses) / sqrt(n); the median is paired with
    the (unscaled) median absolute deviation."""
    x = _as_positive(losses)
    n = len(x)
    logs = np.log(x)
    geo = float(np.exp(logs.mean()))
    if n > 1:
        arith_se = float(x.std(ddof=1) / math.sqrt(n))
        geo_se = float(geo * logs.std(ddof=1) / math.sqrt(n))
    else:
        arith_se = geo_se = 0.0
    med = float(np.median(x))
    return AverageReport(
        n=n,
        arith_mean=float(x.mean()),
        arith_se=arith_se,
        geo_mean=geo,
        geo_se=geo_se,
        median=med,
        mad=float(np.median(np.abs(x - med))),
    )


def bootstrap_geomean(losses, subset_size: int, n_subsets: int = 50,
                      seed: int = 0) -> tuple[float, float]:
    """Mean and spread of geometric means over random subsets, each drawn
    without replacement.  Deterministic per seed."""
    x = _as_positive(losses)
    if subset_size < 1 or subset_size > len(x):
        raise ValueError(f"subset_size must be in [1, {len(x)}], got {subset_size}")
    rng = np.random.Generator(np.random.PCG64(seed))
    geo = np.empty(n_subsets)
    logs = np.log(x)
    for k in range(n_subsets):
        idx = np.sort(rng.choice(len(x), size=subset_size, replace=False))
        geo[k] = math.exp(logs[idx].mean())
    if n_subsets > 1 and not np.all(geo == geo[0]):
        spread = float(geo.std(ddof=1))
    else:
        spread = 0.0  # identical subset estimates: exactly zero spread
    return float(geo.mean()), spread


@dataclass(frozen=True)
class _Ols:
    slope: float
    intercept: float
    slope_se: float
    intercept_se: float
    r_squared: float
    n: int


def _ols(x: np.ndarray, y: np.ndarray) -> _Ols:
    n = len(x)
    xm, ym = x.mean(), y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    if sxx == 0.0:
        raise ValueError("degenerate fit: all abscissae equal")
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = ym - slope * xm
    resid = y - (slope * x + intercept)
    rss = float(np.sum(resid ** 2))
    tss = float(np.sum((y - ym) ** 2))
    if n > 2:
        s2 = rss / (n - 2)
        slope_se = math.sqrt(s2 / sxx)
        intercept_se = math.sqrt(s2 * (1.0 / n + xm * xm / sxx))
    else:
        slope_se = intercept_se = math.nan  # exact 2-point fit, flagged
    if tss > 0.0:
        r2 = 1.0 - rss / tss
    else:
        r2 = 1.0 if rss <= 1e-30 else math.nan
    return _Ols(slope, float(intercept), slope_se, intercept_se, r2, n)


def _masked_points(points, mask) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be a sequence of (N, value) pairs")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (len(pts),):
            raise ValueError(f"mask length {mask.shape} != {len(pts)} points")
        pts = pts[mask]
    # sort for exact invariance under input ordering
    return pts[np.lexsort((pts[:, 1], pts[:, 0]))]


def fit_power_law(points, mask=None) -> PowerLawFit:
    """OLS of ln(loss) on ln(N); alpha is the negated slope.

    ``points`` are (N, loss) pairs, both strictly positive; ``mask`` selects
    the rows to fit (True = include).  Needs at least two in-range points.
    """
    pts = _masked_points(points, mask)
    if len(pts) < 2:
        raise ValueError(f"need >= 2 points to fit, got {len(pts)}")
    if np.any(pts <= 0):
        raise ValueError("power-law fit requires positive N and loss")
    fit = _ols(np.log(pts[:, 0]), np.log(pts[:, 1]))
    return PowerLawFit(
        alpha=-fit.slope,
        alpha_se=fit.slope_se,
        log_prefactor=fit.intercept,
        log_prefactor_se=fit.intercept_se,
        r_squared=fit.r_squared,
        n_points=fit.n,
        n_range=(float(pts[0, 0]), float(pts[-1, 0])),
    )


def fit_log_linear(points, mask=None) -> LogFit:
    """OLS of value on ln(N): value = slope * ln(N) + intercept."""
    pts = _masked_points(points, mask)
    if len(pts) < 2:
        raise ValueError(f"need >= 2 points to fit, got {len(pts)}")
    if np.any(pts[:, 0] <= 0):
        raise ValueError("log-linear fit requires positive N")
    fit = _ols(np.log(pts[:, 0]), pts[:, 1])
    return LogFit(
        slope=fit.slope,
        slope_se=fit.slope_se,
        intercept=fit.intercept,
        intercept_se=fit.intercept_se,
        n_points=fit.n,
    )


def histogram(losses, bin_edges) -> np.ndarray:
    """Counts per half-open bin [lo, hi); a value on an edge lands in the
    upper bin.  Every value must fall inside some bin so counts sum to n."""
    x = np.asarray(losses, dtype=np.float64)
    edges = np.asarray(bin_edges, dtype=np.float64)
    if len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly ascending")
    if len(x) and (x.min() < edges[0] or x.max() >= edges[-1]):
        raise ValueError("values outside the binned range")
    idx = np.searchsorted(edges, x, side="right") - 1
    counts = np.zeros(len(edges) - 1, dtype=np.int64)
    np.add.at(counts, idx, 1)
    return counts


_CSV_COLUMNS = ("target", "arch_id", "n_m", "n_d", "seed", "test_mse")


def write_records(records, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(_CSV_COLUMNS)
        for r in records:
            writer.writerow(
                [r.target, r.arch_id, r.n_m, r.n_d, r.seed, repr(float(r.test_mse))]
            )


def read_records(path) -> list[LossRecord]:
    """Parse the interchange CSV; malformed rows raise with their line number."""
    rows, errors = read_rows(path)
    if errors:
        line, msg = errors[0]
        raise ValueError(f"{path}:{line}: {msg}")
    return [rec for _, rec in rows]


def read_records_lenient(path) -> tuple[list[LossRecord], list[tuple[int, str]]]:
    """Like :func:`read_records`, but collects (line, reason) for bad rows."""
    rows, errors = read_rows(path)
    return [rec for _, rec in rows], errors


def read_rows(path) -> tuple[list[tuple[int, LossRecord]], list[tuple[int, str]]]:
    """Parse the CSV into (line, record) pairs plus (line, reason) rejects."""
    records: list[tuple[int, LossRecord]] = []
    errors: list[tuple[int, str]] = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:6]] != list(_CSV_COLUMNS):
            raise ValueError(f"{path}: expected header {','.join(_CSV_COLUMNS)}")
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rec = LossRecord(
                    target=row[0].strip(),
                    arch_id=row[1].strip(),
                    n_m=int(row[2]),
                    n_d=int(row[3]),
                    seed=int(row[4]),
                    test_mse=float(row[5]),
                )
                if not rec.target or not rec.arch_id:
                    raise ValueError("empty target or arch_id")
                if rec.n_m <= 0 or rec.n_d <= 0:
                    raise ValueError("n_m and n_d must be positive")
                if not (rec.test_mse > 0 and math.isfinite(rec.test_mse)):
                    raise ValueError("test_mse must be positive and finite")
                records.append((line, rec))
            except (ValueError, IndexError) as exc:
                errors.append((line, str(exc)))
    return records, errors
