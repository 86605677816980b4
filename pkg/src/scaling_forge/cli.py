"""Command-line entry point.

Subcommands: ``generate`` (build a dataset), ``grid`` (run an experiment
manifest), ``ingest`` (merge external loss CSVs), ``report`` (tables and plot
data), ``train`` (one network on one dataset).  Exit codes: 0 success,
2 partial grid, 1 error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

import numpy as np


def _parse_m_range(text: str) -> list[int]:
    if ":" in text:
        lo, hi = text.split(":", 1)
        lo, hi = int(lo), int(hi)
    else:
        lo = hi = int(text)
    if lo < 1 or hi < lo:
        raise argparse.ArgumentTypeError(f"bad m range {text!r}")
    return list(range(lo, hi + 1))


def _parse_spec(text: str):
    from .mlp import MlpSpec

    try:
        n_l, n_n = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"spec must be 'n_l,n_n' (e.g. 3,16), got {text!r}"
        ) from None
    return MlpSpec(n_l=n_l, n_n=n_n)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scaling-forge")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate and persist a labeled dataset")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--m-range", type=_parse_m_range, default=None,
                   help="commensuration indices, e.g. 8 or 8:32 (default: full range)")
    g.add_argument("--out", required=True)
    g.add_argument("--image-size", type=int, default=100)
    g.add_argument("--j-perp-scale", type=float, default=None)
    g.add_argument("--cutoff-radius", type=float, default=None)
    g.add_argument("--registry-harmonic", type=float, default=None)

    r = sub.add_parser("grid", help="run the experiment grid of a manifest")
    r.add_argument("--manifest", required=True)
    r.add_argument("--store", required=True)
    r.add_argument("--max-cells", type=int, default=None)

    i = sub.add_parser("ingest", help="merge an external loss CSV into a store")
    i.add_argument("--store", required=True)
    i.add_argument("--csv", required=True)

    t = sub.add_parser("report", help="emit tables, fits and curve files")
    t.add_argument("--store", required=True)
    t.add_argument("--manifest", default=None,
                   help="defaults to the manifest stored with the grid")
    t.add_argument("--out", required=True)

    o = sub.add_parser("train", help="train a single network")
    o.add_argument("--spec", type=_parse_spec, required=True, metavar="N_L,N_N")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--data", required=True)
    o.add_argument("--target", choices=("theta", "J", "D"), required=True)
    o.add_argument("--out", default=None, help="checkpoint path")
    o.add_argument("--batch-size", type=int, default=64)
    o.add_argument("--max-epochs", type=int, default=200)
    return p


def _cmd_generate(args) -> int:
    from . import datagen
    from .lattice import CouplingProfile

    profile = CouplingProfile()
    overrides = {
        "j_perp_scale": args.j_perp_scale,
        "cutoff_radius": args.cutoff_radius,
        "registry_harmonic": args.registry_harmonic,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides:
        profile = replace(profile, **overrides)

    m_indices = args.m_range or datagen.default_m_indices()
    samples = datagen.sample_params(args.seed, args.count, m_indices)
    manifest = datagen.generate_dataset(
        samples, args.out, master_seed=args.seed, profile=profile,
        m_indices=m_indices, image_shape=(args.image_size, args.image_size),
    )
    print(f"wrote {manifest.record_count} records to {args.out} "
          f"(manifest {datagen.manifest_path(args.out)})")
    print(f"excluded: {manifest.fm_excluded} ferromagnetic, "
          f"{manifest.nonconverged_dropped} non-converged")
    return 0


def _cmd_grid(args) -> int:
    from .harness import ExperimentManifest, run_grid

    manifest = ExperimentManifest.load(args.manifest)
    result = run_grid(manifest, args.store, max_cells=args.max_cells)
    done = result.cells_prior + result.cells_run
    print(f"grid {manifest.hash()}: {done}/{result.cells_total} cells complete "
          f"({result.cells_run} new, {result.cells_failed} failed)")
    return 0 if result.complete else 2


def _cmd_ingest(args) -> int:
    from .harness import ingest_external

    accepted, rejects = ingest_external(args.store, args.csv)
    print(f"ingested {accepted} records from {args.csv}")
    for line, reason in rejects:
        print(f"  rejected line {line}: {reason}", file=sys.stderr)
    return 0


def _cmd_report(args) -> int:
    from .harness import ExperimentManifest, ResultsStore, report

    manifest_file = args.manifest or ResultsStore(args.store).manifest_json_path
    manifest = ExperimentManifest.load(manifest_file)
    bundle = report(args.store, manifest, args.out)
    print(f"report written to {bundle.out_dir}: {len(bundle.averages)} cells, "
          f"{len(bundle.alpha_d)} dataset-scaling fits, "
          f"{len(bundle.alpha_m)} model-scaling fits")
    return 0


def _cmd_train(args) -> int:
    from . import datagen, mlp

    ds = datagen.read_dataset(args.data)
    mpath = datagen.manifest_path(args.data)
    m_indices = datagen.load_manifest(mpath).m_indices if mpath.exists() else None

    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=args.seed, spawn_key=(0x7E57,))
    ))
    n_test = max(1, int(0.12 * len(ds)))
    test_idx = rng.choice(len(ds), size=n_test, replace=False)
    pool_idx = np.setdiff1d(np.arange(len(ds)), test_idx)
    n_total = (len(pool_idx) // 8) * 8
    if n_total < 8:
        print(f"dataset too small: pool of {len(pool_idx)} records", file=sys.stderr)
        return 1
    tr, va = datagen.split_indices(len(pool_idx), datagen.SplitSpec(n_total, args.seed))

    inputs = ds.flat_inputs()
    targets = datagen.normalized_targets(ds, args.target, m_indices)
    x_train = inputs[pool_idx[tr]]
    mean = float(x_train.astype(np.float64).mean())
    std = float(x_train.astype(np.float64).std())
    norm = lambda idx: (inputs[idx] - np.float32(mean)) / np.float32(std)

    cfg = mlp.TrainConfig(seed=args.seed, batch_size=args.batch_size,
                          max_epochs=args.max_epochs)
    model, report_out = mlp.train(
        args.spec, norm(pool_idx[tr]), targets[pool_idx[tr]],
        norm(pool_idx[va]), targets[pool_idx[va]], cfg,
        norm(test_idx), targets[test_idx],
    )
    floor = " (at precision floor)" if report_out.at_precision_floor else ""
    print(f"arch {args.spec.arch_id} ({mlp.param_count(args.spec)} params) "
          f"target {args.target}: test MSE {report_out.test_mse:.6e}{floor}")
    print(f"best epoch {report_out.best_epoch} "
          f"(val {report_out.best_val_loss:.6e}), "
          f"{report_out.epochs_run} epochs in {report_out.wall_time_s:.1f}s")
    if args.out:
        mlp.save_model(model, args.out)
        print(f"checkpoint written to {args.out}")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "grid": _cmd_grid,
    "ingest": _cmd_ingest,
    "report": _cmd_report,
    "train": _cmd_train,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
