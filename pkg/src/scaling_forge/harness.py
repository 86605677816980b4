"""Manifest-driven experiment grids over (architecture, dataset size, seed).

A grid cell draws a fresh train/validation subset, standardizes with the
cell's train statistics, trains one network and evaluates it on the store's
fixed held-out test split.  Results accumulate in an append-only CSV keyed by
(arch_id, n_d, seed); completed cells are skipped on resume.  Wall times go
to a separate sidecar so the results CSV is byte-reproducible for a fixed
manifest and master seed in single-threaded mode.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import datagen, mlp, scalestats
from .datagen import read_dataset, load_manifest, manifest_path
from .mlp import MlpSpec, TrainConfig, PRECISION_FLOOR_MSE

log = logging.getLogger(__name__)

THREAD_ENV_VAR = "SCALING_FORGE_THREADS"
DEFAULT_TEST_RECORDS = 20_000
DEFAULT_TEST_FRACTION = 0.12

RESULTS_CSV = "results.csv"
TIMINGS_CSV = "timings.csv"
MANIFEST_JSON = "manifest.json"
ERRORS_LOG = "errors.log"

_RESULT_COLUMNS = (
    "target", "arch_id", "n_m", "n_d", "seed", "test_mse",
    "best_epoch", "best_val_loss", "epochs_run", "precision_floor",
    "manifest_hash",
)


@dataclass(frozen=True)
class FitConfig:
    """Explicit fit-range masks; None means no restriction on that side."""

    nd_min: int | None = None
    nd_max: int | None = None
    nm_min: int | None = None
    nm_max: int | None = None
    logfit_nm_min: int | None = None
    logfit_nm_max: int | None = None
    logfit_nd_min: int | None = None
    logfit_nd_max: int | None = None
    exclude_precision_floor: bool = True

    def nd_mask(self, nd_values) -> np.ndarray:
        return _range_mask(nd_values, self.nd_min, self.nd_max)

    def nm_mask(self, nm_values) -> np.ndarray:
        return _range_mask(nm_values, self.nm_min, self.nm_max)


def _range_mask(values, lo, hi) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    mask = np.ones(len(v), dtype=bool)
    if lo is not None:
        mask &= v >= lo
    if hi is not None:
        mask &= v <= hi
    return mask


@dataclass(frozen=True)
class ExperimentManifest:
    dataset: str
    target: str
    architectures: tuple
    nd_grid: tuple
    seeds_per_cell: int = 20
    master_seed: int = 0
    test_records: int | None = None
    parallelism: int = 1
    train: dict = field(default_factory=dict)
    fit: FitConfig = field(default_factory=FitConfig)

    def __post_init__(self):
        if self.target not in datagen.LABEL_NAMES:
            raise ValueError(f"target must be one of {datagen.LABEL_NAMES}, got {self.target!r}")
        if not self.architectures:
            raise ValueError("architecture grid is empty")
        if not self.nd_grid:
            raise ValueError("dataset-size grid is empty")
        for nd in self.nd_grid:
            if nd < 8 or nd % 8:
                raise ValueError(f"every N_D must be a positive multiple of 8, got {nd}")
        if self.seeds_per_cell < 1:
            raise ValueError(f"seeds_per_cell must be >= 1, got {self.seeds_per_cell}")
        if self.parallelism < 1:
            raise ValueError(f"parallelism must be >= 1, got {self.parallelism}")
        object.__setattr__(
            self, "architectures",
            tuple((int(nl), int(nn)) for nl, nn in self.architectures),
        )
        object.__setattr__(self, "nd_grid", tuple(int(n) for n in self.nd_grid))

    def specs(self) -> list[MlpSpec]:
        return [MlpSpec(n_l=nl, n_n=nn) for nl, nn in self.architectures]

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **self.train)

    def to_json(self) -> str:
        d = asdict(self)
        d["fit"] = asdict(self.fit)
        return json.dumps(d, sort_keys=True, indent=2)

    def hash(self) -> str:
        canon = json.dumps(json.loads(self.to_json()), sort_keys=True,
                           separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_json(cls, text: str) -> "ExperimentManifest":
        d = json.loads(text)
        d["architectures"] = tuple(tuple(a) for a in d["architectures"])
        d["nd_grid"] = tuple(d["nd_grid"])
        d["fit"] = FitConfig(**d.get("fit", {}))
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentManifest":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class RunRecord:
    target: str
    arch_id: str
    n_m: int
    n_d: int
    seed: int                    # realization index within the cell
    test_mse: float
    best_epoch: int
    best_val_loss: float
    epochs_run: int
    precision_floor: bool
    manifest_hash: str
    wall_time_s: float = 0.0

    @property
    def key(self) -> tuple:
        return (self.target, self.arch_id, self.n_d, self.seed)


def _fmt(x: float) -> str:
    # shortest exact-roundtrip representation; deterministic for equal bits
    return repr(float(x))


class ResultsStore:
    """Append-only run records in a directory: results.csv (deterministic
    columns only), timings.csv (volatile), manifest.json sidecar."""

    def __init__(self, root):
        self.root = Path(root)

    @property
    def results_path(self) -> Path:
        return self.root / RESULTS_CSV

    @property
    def timings_path(self) -> Path:
        return self.root / TIMINGS_CSV

    @property
    def manifest_json_path(self) -> Path:
        return self.root / MANIFEST_JSON

    def prepare(self, manifest: ExperimentManifest) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        if self.manifest_json_path.exists():
            stored = ExperimentManifest.load(self.manifest_json_path)
            if stored.hash() != manifest.hash():
                raise ValueError(
                    f"store {self.root} belongs to manifest {stored.hash()}, "
                    f"not {manifest.hash()}; refusing to mix experiments"
                )
        else:
            manifest.save(self.manifest_json_path)
        if not self.results_path.exists():
            with open(self.results_path, "w", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow(_RESULT_COLUMNS)
        if not self.timings_path.exists():
            with open(self.timings_path, "w", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow(
                    ["target", "arch_id", "n_d", "seed", "wall_time_s"]
                )

    def load_records(self) -> list[RunRecord]:
        if not self.results_path.exists():
            return []
        out = []
        with open(self.results_path, newline="") as f:
            for row in csv.DictReader(f):
                out.append(RunRecord(
                    target=row["target"],
                    arch_id=row["arch_id"],
                    n_m=int(row["n_m"]),
                    n_d=int(row["n_d"]),
                    seed=int(row["seed"]),
                    test_mse=float(row["test_mse"]),
                    best_epoch=int(row["best_epoch"]) if row["best_epoch"] else -1,
                    best_val_loss=float(row["best_val_loss"]) if row["best_val_loss"] else float("nan"),
                    epochs_run=int(row["epochs_run"]) if row["epochs_run"] else 0,
                    precision_floor=row["precision_floor"] == "1",
                    manifest_hash=row["manifest_hash"],
                ))
        return out

    def completed_keys(self) -> set:
        return {r.key for r in self.load_records()}

    def append(self, record: RunRecord) -> None:
        with open(self.results_path, "a", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow([
                record.target, record.arch_id, record.n_m, record.n_d,
                record.seed, _fmt(record.test_mse),
                record.best_epoch if record.best_epoch >= 0 else "",
                _fmt(record.best_val_loss) if np.isfinite(record.best_val_loss) else "",
                record.epochs_run, int(record.precision_floor),
                record.manifest_hash,
            ])
        with open(self.timings_path, "a", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow([
                record.target, record.arch_id, record.n_d, record.seed,
                f"{record.wall_time_s:.3f}",
            ])

    def log_error(self, key, message: str) -> None:
        with open(self.root / ERRORS_LOG, "a") as f:
            f.write(f"{key}: {message}\n")


@dataclass
class _GridContext:
    """Everything a cell needs; shared read-only across workers."""

    inputs: np.ndarray        # (n, 2*h*w) float32, raw pixels
    targets: np.ndarray       # (n,) float64, normalized to [0, 1]
    pool_idx: np.ndarray
    test_idx: np.ndarray
    target: str
    master_seed: int
    manifest_hash: str
    train_overrides: dict


def _test_split_indices(n_records: int, test_records: int | None,
                        master_seed: int) -> np.ndarray:
    if test_records is None:
        test_records = min(DEFAULT_TEST_RECORDS,
                           max(1, int(DEFAULT_TEST_FRACTION * n_records)))
    if test_records >= n_records:
        raise ValueError(
            f"test split of {test_records} exhausts the {n_records}-record dataset"
        )
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=master_seed, spawn_key=(0x7E57,))
    ))
    return rng.choice(n_records, size=test_records, replace=False)


def _build_context(manifest: ExperimentManifest) -> _GridContext:
    ds = read_dataset(manifest.dataset)
    if ds.standardized:
        raise ValueError("grid expects a raw dataset; standardization is per cell")
    mpath = manifest_path(manifest.dataset)
    m_indices = None
    if mpath.exists():
        m_indices = load_manifest(mpath).m_indices
    targets = datagen.normalized_targets(ds, manifest.target, m_indices)

    test_idx = _test_split_indices(len(ds), manifest.test_records, manifest.master_seed)
    pool_idx = np.setdiff1d(np.arange(len(ds)), test_idx)
    max_nd = max(manifest.nd_grid)
    if len(pool_idx) < max_nd:
        raise ValueError(
            f"pool of {len(pool_idx)} records cannot cover N_D={max_nd} "
            f"plus the {len(test_idx)}-record test split"
        )
    return _GridContext(
        inputs=ds.flat_inputs(),
        targets=targets,
        pool_idx=pool_idx,
        test_idx=test_idx,
        target=manifest.target,
        master_seed=manifest.master_seed,
        manifest_hash=manifest.hash(),
        train_overrides=dict(manifest.train),
    )


def _execute_cell(ctx: _GridContext, cell) -> RunRecord:
    n_l, n_n, n_d, rep = cell
    spec = MlpSpec(n_i=ctx.inputs.shape[1], n_l=n_l, n_n=n_n)
    ss = np.random.SeedSequence(
        entropy=ctx.master_seed, spawn_key=(n_l, n_n, n_d, rep)
    )
    split_seed, train_seed = (int(s.generate_state(1, np.uint64)[0]) for s in ss.spawn(2))

    t0 = time.perf_counter()
    tr, va = datagen.split_indices(len(ctx.pool_idx), datagen.SplitSpec(n_d, split_seed))
    train_g, val_g = ctx.pool_idx[tr], ctx.pool_idx[va]

    x_train = ctx.inputs[train_g]
    mean = float(x_train.astype(np.float64).mean())
    std = float(x_train.astype(np.float64).std())
    if std == 0.0:
        raise datagen.DegenerateDataError(f"cell {cell}: constant train pixels")
    mean32, std32 = np.float32(mean), np.float32(std)

    def norm(idx):
        return (ctx.inputs[idx] - mean32) / std32

    cfg = TrainConfig(seed=train_seed, **ctx.train_overrides)
    _, rep_out = mlp.train(
        spec,
        norm(train_g), ctx.targets[train_g],
        norm(val_g), ctx.targets[val_g],
        cfg,
        norm(ctx.test_idx), ctx.targets[ctx.test_idx],
    )
    return RunRecord(
        target=ctx.target,
        arch_id=spec.arch_id,
        n_m=mlp.param_count(spec),
        n_d=n_d,
        seed=rep,
        test_mse=rep_out.test_mse,
        best_epoch=rep_out.best_epoch,
        best_val_loss=rep_out.best_val_loss,
        epochs_run=rep_out.epochs_run,
        precision_floor=rep_out.at_precision_floor,
        manifest_hash=ctx.manifest_hash,
        wall_time_s=time.perf_counter() - t0,
    )


_WORKER_CTX: list = [None]


def _worker_init(manifest_json: str) -> None:
    manifest = ExperimentManifest.from_json(manifest_json)
    _WORKER_CTX[0] = _build_context(manifest)


def _worker_run(cell):
    try:
        return _execute_cell(_WORKER_CTX[0], cell), None
    except Exception as exc:  # grid keeps going; the error is recorded
        return None, f"{type(exc).__name__}: {exc}"


@dataclass
class GridRunResult:
    store: ResultsStore
    cells_total: int
    cells_prior: int
    cells_run: int
    cells_failed: int

    @property
    def complete(self) -> bool:
        return self.cells_failed == 0 and (
            self.cells_prior + self.cells_run == self.cells_total
        )


def effective_parallelism(requested: int) -> int:
    cap = os.environ.get(THREAD_ENV_VAR)
    if cap:
        try:
            requested = min(requested, max(1, int(cap)))
        except ValueError:
            log.warning("ignoring non-integer %s=%r", THREAD_ENV_VAR, cap)
    return requested


def grid_cells(manifest: ExperimentManifest) -> list[tuple]:
    return [
        (nl, nn, nd, rep)
        for nl, nn in manifest.architectures
        for nd in manifest.nd_grid
        for rep in range(manifest.seeds_per_cell)
    ]


def run_grid(manifest: ExperimentManifest, store_dir,
             max_cells: int | None = None) -> GridRunResult:
    """Execute every pending grid cell; resumable and idempotent.

    ``max_cells`` bounds how many new cells run this call (used to exercise
    interrupted-resume behavior).  Per-cell failures are logged to the store
    and do not stop the grid.
    """
    store = ResultsStore(store_dir)
    store.prepare(manifest)
    done = store.completed_keys()

    cells = grid_cells(manifest)
    pending = []
    for cell in cells:
        nl, nn, nd, rep = cell
        key = (manifest.target, MlpSpec(n_l=nl, n_n=nn).arch_id, nd, rep)
        if key not in done:
            pending.append(cell)
    n_prior = len(cells) - len(pending)
    if max_cells is not None:
        pending = pending[:max_cells]

    n_failed = 0
    n_run = 0
    workers = effective_parallelism(manifest.parallelism)
    if pending:
        if workers > 1:
            with ProcessPoolExecutor(
                max_workers=workers,
                initializer=_worker_init,
                initargs=(manifest.to_json(),),
            ) as pool:
                for cell, (record, err) in zip(
                    pending, pool.map(_worker_run, pending, chunksize=1)
                ):
                    if err is None:
                        store.append(record)
                        n_run += 1
                    else:
                        store.log_error(cell, err)
                        n_failed += 1
        else:
            ctx = _build_context(manifest)
            for cell in pending:
                try:
                    record = _execute_cell(ctx, cell)
                except Exception as exc:
                    store.log_error(cell, f"{type(exc).__name__}: {exc}")
                    n_failed += 1
                    continue
                store.append(record)
                n_run += 1

    result = GridRunResult(
        store=store,
        cells_total=len(cells),
        cells_prior=n_prior,
        cells_run=n_run,
        cells_failed=n_failed,
    )
    log.info(
        "grid %s: %d/%d cells done (%d new, %d failed)",
        manifest.hash(), result.cells_prior + result.cells_run,
        result.cells_total, n_run, n_failed,
    )
    return result


def ingest_external(store_dir, csv_path) -> tuple[int, list[tuple[int, str]]]:
    """Merge externally produced loss records into a store.

    The CSV must follow the interchange schema (target, arch_id, n_m, n_d,
    seed, test_mse).  Malformed rows and duplicate cell keys are rejected
    with their line numbers; everything else is appended.
    """
    store = ResultsStore(store_dir)
    if not store.results_path.exists():
        store.root.mkdir(parents=True, exist_ok=True)
        with open(store.results_path, "w", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(_RESULT_COLUMNS)
        with open(store.timings_path, "w", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(
                ["target", "arch_id", "n_d", "seed", "wall_time_s"]
            )
    rows, rejects = scalestats.read_rows(csv_path)
    seen = store.completed_keys()
    accepted = 0
    for line, rec in rows:
        key = (rec.target, rec.arch_id, rec.n_d, rec.seed)
        if key in seen:
            rejects.append((line, f"duplicate cell key {key}"))
            continue
        seen.add(key)
        store.append(RunRecord(
            target=rec.target, arch_id=rec.arch_id, n_m=rec.n_m, n_d=rec.n_d,
            seed=rec.seed, test_mse=rec.test_mse,
            best_epoch=-1, best_val_loss=float("nan"), epochs_run=0,
            precision_floor=rec.test_mse <= PRECISION_FLOOR_MSE,
            manifest_hash="external",
        ))
        accepted += 1
    rejects.sort()
    return accepted, rejects


# ---------------------------------------------------------------------------
# reporting


@dataclass
class ReportBundle:
    out_dir: Path
    averages: list[dict]
    alpha_d: list[dict]
    alpha_m: list[dict]
    log_fits: list[dict]


def _geo_points(records_by_cell, keys):
    """(N, geometric-mean loss, n, floor-flag) per key, in key order."""
    rows = []
    for key in keys:
        losses = records_by_cell.get(key)
        if not losses:
            continue
        rep = scalestats.summarize(losses)
        rows.append((key, rep))
    return rows


def report(store_dir, manifest: ExperimentManifest, out_dir) -> ReportBundle:
    """Summaries, scaling fits and plot-ready curve files for one store.

    Pure with respect to the store: everything is written under ``out_dir``.
    Cells with fewer than two realizations are flagged in the averages table
    (column ``low_n``) but still reported and fit.
    """
    store = ResultsStore(store_dir)
    records = store.load_records()
    if not records:
        raise ValueError(f"store {store_dir} has no records to report")

    out = Path(out_dir)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    fitcfg = manifest.fit
    target = manifest.target

    by_cell: dict[tuple, list[float]] = {}
    any_floor: dict[tuple, bool] = {}
    nm_seen: dict[tuple, int] = {}
    for r in sorted(records, key=lambda r: (r.target, r.arch_id, r.n_d, r.seed)):
        cell = (r.target, r.arch_id, r.n_d)
        by_cell.setdefault(cell, []).append(r.test_mse)
        any_floor[cell] = any_floor.get(cell, False) or r.precision_floor
        prior = nm_seen.setdefault((r.target, r.arch_id), r.n_m)
        if prior != r.n_m:
            raise ValueError(
                f"store has inconsistent n_m for {r.target}/{r.arch_id}: "
                f"{prior} vs {r.n_m}"
            )

    averages = []
    for cell in sorted(by_cell):
        rep = scalestats.summarize(by_cell[cell])
        averages.append({
            "target": cell[0], "arch_id": cell[1],
            "n_m": nm_seen[(cell[0], cell[1])], "n_d": cell[2],
            "n": rep.n, "geo_mean": rep.geo_mean, "geo_se": rep.geo_se,
            "arith_mean": rep.arith_mean, "arith_se": rep.arith_se,
            "median": rep.median, "mad": rep.mad,
            "low_n": int(rep.n < 2),
            "precision_floor": int(any_floor[cell]),
        })
    _write_table(out / "averages.csv", averages)

    # only the manifest's architecture grid participates in fits; ingested
    # external records show up in the averages table alone
    arch_ids = [s.arch_id for s in manifest.specs()
                if (target, s.arch_id) in nm_seen]
    nm_by_arch = {a: nm_seen[(target, a)] for a in arch_ids}

    def cell_geo(arch_id, nd):
        cell = (target, arch_id, nd)
        if cell not in by_cell:
            return None
        return scalestats.summarize(by_cell[cell]).geo_mean

    # loss vs dataset size, one fit per architecture
    alpha_d_rows = []
    fits_by_arch = {}
    for arch_id in arch_ids:
        pts, nds = [], []
        for nd in manifest.nd_grid:
            geo = cell_geo(arch_id, nd)
            if geo is not None:
                pts.append((nd, geo))
                nds.append(nd)
        if not pts:
            continue
        pts = np.asarray(pts)
        mask = fitcfg.nd_mask(pts[:, 0])
        if fitcfg.exclude_precision_floor:
            mask &= pts[:, 1] > PRECISION_FLOOR_MSE
        row = {"target": target, "arch_id": arch_id, "n_m": nm_by_arch[arch_id]}
        if mask.sum() >= 2:
            fit = scalestats.fit_power_law(pts, mask)
            fits_by_arch[arch_id] = fit
            row.update(alpha_d=fit.alpha, alpha_se=fit.alpha_se,
                       log_prefactor=fit.log_prefactor,
                       log_prefactor_se=fit.log_prefactor_se,
                       r_squared=fit.r_squared, n_points=fit.n_points)
        else:
            row.update(alpha_d="", alpha_se="", log_prefactor="",
                       log_prefactor_se="", r_squared="", n_points=int(mask.sum()))
        alpha_d_rows.append(row)
        _write_curve(
            out / "curves" / f"loss_vs_nd_{arch_id}.dat",
            "n_d", pts, mask, fits_by_arch.get(arch_id),
            header=f"target={target} arch={arch_id} n_m={nm_by_arch[arch_id]}",
        )
    _write_table(out / "alpha_d.csv", alpha_d_rows)

    # loss vs model size, one fit per dataset size
    alpha_m_rows = []
    fits_by_nd = {}
    for nd in manifest.nd_grid:
        pts = []
        for arch_id in arch_ids:
            geo = cell_geo(arch_id, nd)
            if geo is not None:
                pts.append((nm_by_arch[arch_id], geo))
        if not pts:
            continue
        pts = np.asarray(sorted(pts))
        mask = fitcfg.nm_mask(pts[:, 0])
        if fitcfg.exclude_precision_floor:
            mask &= pts[:, 1] > PRECISION_FLOOR_MSE
        row = {"target": target, "n_d": nd}
        if mask.sum() >= 2:
            fit = scalestats.fit_power_law(pts, mask)
            fits_by_nd[nd] = fit
            row.update(alpha_m=fit.alpha, alpha_se=fit.alpha_se,
                       log_prefactor=fit.log_prefactor,
                       log_prefactor_se=fit.log_prefactor_se,
                       r_squared=fit.r_squared, n_points=fit.n_points)
        else:
            row.update(alpha_m="", alpha_se="", log_prefactor="",
                       log_prefactor_se="", r_squared="", n_points=int(mask.sum()))
        alpha_m_rows.append(row)
        _write_curve(
            out / "curves" / f"loss_vs_nm_nd{nd}.dat",
            "n_m", pts, mask, fits_by_nd.get(nd),
            header=f"target={target} n_d={nd}",
        )
    _write_table(out / "alpha_m.csv", alpha_m_rows)

    # exponent trends: alpha_d vs ln(n_m) and alpha_m vs ln(n_d)
    log_fit_rows = []
    pts = [(row["n_m"], row["alpha_d"]) for row in alpha_d_rows
           if row["alpha_d"] != ""]
    if len(pts) >= 2:
        pts = np.asarray(pts)
        mask = _range_mask(pts[:, 0], fitcfg.logfit_nm_min, fitcfg.logfit_nm_max)
        if mask.sum() >= 2:
            lf = scalestats.fit_log_linear(pts, mask)
            log_fit_rows.append({
                "name": "alpha_d_vs_ln_nm", "target": target,
                "slope": lf.slope, "slope_se": lf.slope_se,
                "intercept": lf.intercept, "intercept_se": lf.intercept_se,
                "n_points": lf.n_points,
            })
    pts = [(row["n_d"], row["alpha_m"]) for row in alpha_m_rows
           if row["alpha_m"] != ""]
    if len(pts) >= 2:
        pts = np.asarray(pts)
        mask = _range_mask(pts[:, 0], fitcfg.logfit_nd_min, fitcfg.logfit_nd_max)
        if mask.sum() >= 2:
            lf = scalestats.fit_log_linear(pts, mask)
            log_fit_rows.append({
                "name": "alpha_m_vs_ln_nd", "target": target,
                "slope": lf.slope, "slope_se": lf.slope_se,
                "intercept": lf.intercept, "intercept_se": lf.intercept_se,
                "n_points": lf.n_points,
            })
    _write_table(out / "log_fits.csv", log_fit_rows)
    _write_gnuplot_stub(out, arch_ids, manifest.nd_grid)

    return ReportBundle(
        out_dir=out,
        averages=averages,
        alpha_d=alpha_d_rows,
        alpha_m=alpha_m_rows,
        log_fits=log_fit_rows,
    )


def _write_table(path, rows) -> None:
    with open(path, "w", newline="") as f:
        if not rows:
            f.write("")
            return
        writer = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({
                k: (_fmt(v) if isinstance(v, float) else v) for k, v in row.items()
            })


def _write_curve(path, xname, pts, mask, fit, header="") -> None:
    """Gnuplot-ready columns: x, geo-mean loss, in_fit flag, fit line."""
    with open(path, "w") as f:
        f.write(f"# {header}\n")
        if fit is not None:
            f.write(
                f"# fit: loss = exp({_fmt(fit.log_prefactor)}) * "
                f"{xname}^(-{_fmt(fit.alpha)})\n"
            )
        f.write(f"# {xname} geo_mean_loss in_fit fit_line\n")
        for (x, yv), inc in zip(pts, mask):
            if fit is not None:
                line = _fmt(np.exp(fit.log_prefactor) * x ** (-fit.alpha))
            else:
                line = "nan"
            f.write(f"{int(x)} {_fmt(yv)} {int(inc)} {line}\n")


def _write_gnuplot_stub(out: Path, arch_ids, nd_grid) -> None:
    lines = [
        "# gnuplot script stub for the emitted curve files",
        "set logscale xy",
        "set xlabel 'N'",
        "set ylabel 'geometric-mean test MSE'",
        "set key outside",
    ]
    plot = [
        f"'curves/loss_vs_nd_{a}.dat' using 1:2 with points title '{a}', "
        f"'' using 1:4 with lines notitle"
        for a in arch_ids
    ]
    lines.append("plot \\")
    lines.append(", \\\n".join("    " + p for p in plot))
    (out / "plots.gp").write_text("\n".join(lines) + "\n")
