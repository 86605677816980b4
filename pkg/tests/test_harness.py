import csv
import math

import numpy as np
import pytest

from scaling_forge import cli, harness, mlp, scalestats
from scaling_forge.datagen import Dataset, label_ranges, write_dataset
from scaling_forge.harness import (
    ExperimentManifest,
    FitConfig,
    ResultsStore,
    RunRecord,
    effective_parallelism,
    grid_cells,
    ingest_external,
    report,
    run_grid,
)


def synthetic_dataset_file(path, n, seed=0, h=6, w=6):
    """Learnable toy data: J is encoded linearly in the pixel mean."""
    rng = np.random.Generator(np.random.PCG64(seed))
    ranges = label_ranges()
    labels = np.column_stack([
        rng.uniform(*ranges["theta"], size=n),
        rng.uniform(*ranges["J"], size=n),
        rng.uniform(*ranges["D"], size=n),
    ])
    j_norm = (labels[:, 1] - 1.0) / 9.0
    images = rng.uniform(-0.3, 0.3, size=(n, 2, h, w))
    images += (j_norm - 0.5)[:, None, None, None]
    images = np.clip(images, -1, 1).astype(np.float32)
    seeds = rng.integers(0, 2**63, size=n, dtype=np.uint64)
    write_dataset(Dataset(images=images, labels=labels, seeds=seeds), path)
    return path


def small_manifest(dataset, **overrides) -> ExperimentManifest:
    kw = dict(
        dataset=str(dataset),
        target="J",
        architectures=((1, 4), (1, 8)),
        nd_grid=(16, 24, 32),
        seeds_per_cell=5,
        master_seed=3,
        test_records=20,
        train={"max_epochs": 4, "batch_size": 8},
    )
    kw.update(overrides)
    return ExperimentManifest(**kw)


@pytest.fixture()
def toy_dataset(tmp_path):
    return synthetic_dataset_file(tmp_path / "toy.bin", n=120)


class TestManifest:
    def test_validation(self, tmp_path):
        with pytest.raises(ValueError):
            small_manifest("x", nd_grid=(100,))       # not divisible by 8
        with pytest.raises(ValueError):
            small_manifest("x", seeds_per_cell=0)
        with pytest.raises(ValueError):
            small_manifest("x", target="K")
        with pytest.raises(ValueError):
            small_manifest("x", architectures=())
        with pytest.raises(ValueError):
            small_manifest("x", parallelism=0)

    def test_json_roundtrip_and_hash(self, tmp_path):
        m = small_manifest("ds.bin", fit=FitConfig(nd_max=28672))
        path = tmp_path / "m.json"
        m.save(path)
        back = ExperimentManifest.load(path)
        assert back == m
        assert back.hash() == m.hash()
        other = small_manifest("ds.bin", master_seed=4)
        assert other.hash() != m.hash()

    def test_grid_cells_cardinality(self):
        m = small_manifest("x", architectures=((1, 4), (1, 8)), nd_grid=(16, 24, 32),
                           seeds_per_cell=5)
        assert len(grid_cells(m)) == 2 * 3 * 5 == 30


class TestRunGrid:
    def test_cardinality_and_complete(self, toy_dataset, tmp_path):
        m = small_manifest(toy_dataset, seeds_per_cell=2, nd_grid=(16, 32))
        res = run_grid(m, tmp_path / "store")
        assert res.cells_total == 2 * 2 * 2
        assert res.cells_run == 8 and res.complete
        records = res.store.load_records()
        assert len(records) == 8
        keys = {r.key for r in records}
        assert len(keys) == 8
        for r in records:
            assert r.test_mse > 0 and math.isfinite(r.test_mse)
            # toy images are 6x6 pairs: n_i = 72
            spec = mlp.MlpSpec(n_i=72, n_l=1, n_n=int(r.arch_id.split("nn")[1]))
            assert r.n_m == mlp.param_count(spec)

    def test_interrupt_and_resume(self, toy_dataset, tmp_path):
        m = small_manifest(toy_dataset, seeds_per_cell=2, nd_grid=(16, 24, 32))
        store = tmp_path / "store"
        first = run_grid(m, store, max_cells=5)
        assert first.cells_run == 5 and not first.complete
        second = run_grid(m, store)
        assert second.cells_prior == 5
        assert second.cells_run == 12 - 5
        assert second.complete
        # resumed store is byte-identical to a one-shot run
        oneshot = run_grid(m, tmp_path / "store2")
        assert oneshot.complete
        assert (store / "results.csv").read_bytes() == (tmp_path / "store2" / "results.csv").read_bytes()

    def test_rerun_is_noop(self, toy_dataset, tmp_path):
        m = small_manifest(toy_dataset, seeds_per_cell=1, nd_grid=(16,))
        store = tmp_path / "store"
        run_grid(m, store)
        before = (store / "results.csv").read_bytes()
        res = run_grid(m, store)
        assert res.cells_run == 0 and res.complete
        assert (store / "results.csv").read_bytes() == before

    def test_deterministic_across_fresh_runs(self, toy_dataset, tmp_path):
        m = small_manifest(toy_dataset)
        run_grid(m, tmp_path / "a")
        run_grid(m, tmp_path / "b")
        assert (tmp_path / "a" / "results.csv").read_bytes() == \
               (tmp_path / "b" / "results.csv").read_bytes()

    def test_wrong_manifest_for_store_rejected(self, toy_dataset, tmp_path):
        m = small_manifest(toy_dataset)
        run_grid(m, tmp_path / "store", max_cells=1)
        other = small_manifest(toy_dataset, master_seed=99)
        with pytest.raises(ValueError):
            run_grid(other, tmp_path / "store")

    def test_pool_must_cover_grid(self, toy_dataset):
        m = small_manifest(toy_dataset, nd_grid=(128,))  # pool is only 100
        with pytest.raises(ValueError):
            run_grid(m, "unused")

    def test_cell_failure_recorded_and_grid_continues(self, toy_dataset, tmp_path, monkeypatch):
        m = small_manifest(toy_dataset, seeds_per_cell=1, nd_grid=(16, 24))
        real_train = mlp.train

        def flaky_train(spec, *args, **kwargs):
            if spec.n_n == 8:
                raise RuntimeError("injected failure")
            return real_train(spec, *args, **kwargs)

        monkeypatch.setattr(mlp, "train", flaky_train)
        res = run_grid(m, tmp_path / "store")
        assert res.cells_failed == 2
        assert res.cells_run == 2
        assert not res.complete
        assert (tmp_path / "store" / "errors.log").exists()

    def test_test_split_disjoint_from_training_pool(self, toy_dataset):
        m = small_manifest(toy_dataset)
        ctx = harness._build_context(m)
        assert not set(ctx.test_idx) & set(ctx.pool_idx)
        assert len(ctx.test_idx) == 20
        assert len(ctx.test_idx) + len(ctx.pool_idx) == 120

    def test_parallel_matches_sequential(self, toy_dataset, tmp_path):
        m_seq = small_manifest(toy_dataset, seeds_per_cell=2, nd_grid=(16,))
        m_par = small_manifest(toy_dataset, seeds_per_cell=2, nd_grid=(16,), parallelism=2)
        run_grid(m_seq, tmp_path / "seq")
        run_grid(m_par, tmp_path / "par")
        seq = {r.key: r.test_mse for r in ResultsStore(tmp_path / "seq").load_records()}
        par = {r.key: r.test_mse for r in ResultsStore(tmp_path / "par").load_records()}
        assert seq == par

    def test_thread_env_caps_parallelism(self, monkeypatch):
        monkeypatch.setenv(harness.THREAD_ENV_VAR, "2")
        assert effective_parallelism(8) == 2
        monkeypatch.setenv(harness.THREAD_ENV_VAR, "junk")
        assert effective_parallelism(8) == 8
        monkeypatch.delenv(harness.THREAD_ENV_VAR)
        assert effective_parallelism(8) == 8


class TestIngest:
    def write_csv(self, path, rows):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["target", "arch_id", "n_m", "n_d", "seed", "test_mse"])
            w.writerows(rows)

    def test_valid_rows_ingested(self, tmp_path):
        path = tmp_path / "ext.csv"
        self.write_csv(path, [
            ["J", "resnet18", 11173889, 224 * 2 ** k, s, f"{1e-3 * 2**-k}"]
            for k in range(5) for s in range(2)
        ])
        accepted, rejects = ingest_external(tmp_path / "store", path)
        assert accepted == 10 and rejects == []
        records = ResultsStore(tmp_path / "store").load_records()
        assert len(records) == 10
        assert all(r.manifest_hash == "external" for r in records)

    def test_bad_rows_rejected_with_line_numbers(self, tmp_path):
        path = tmp_path / "ext.csv"
        self.write_csv(path, [
            ["J", "vit", 225601, 224, 0, "1e-3"],
            ["J", "vit", 225601, 448, 0, "-1e-3"],   # non-positive
            ["J", "vit", 225601, 896, 0, "1e-4"],
        ])
        accepted, rejects = ingest_external(tmp_path / "store", path)
        assert accepted == 2
        assert [line for line, _ in rejects] == [3]

    def test_duplicate_key_rejected(self, tmp_path):
        path = tmp_path / "ext.csv"
        self.write_csv(path, [
            ["J", "vit", 225601, 224, 0, "1e-3"],
            ["J", "vit", 225601, 224, 0, "2e-3"],   # same cell key
        ])
        accepted, rejects = ingest_external(tmp_path / "store", path)
        assert accepted == 1
        assert len(rejects) == 1 and "duplicate" in rejects[0][1]
        # and across calls
        accepted2, rejects2 = ingest_external(tmp_path / "store", path)
        assert accepted2 == 0 and len(rejects2) == 2


def inject_power_law_store(store_dir, manifest, alphas, prefactors, sigma=0.0, seed=0):
    """Store whose geo-mean losses follow exact power laws per architecture."""
    store = ResultsStore(store_dir)
    store.prepare(manifest)
    rng = np.random.Generator(np.random.PCG64(seed))
    for (nl, nn), alpha, pref in zip(manifest.architectures, alphas, prefactors):
        spec = mlp.MlpSpec(n_l=nl, n_n=nn)
        for nd in manifest.nd_grid:
            for rep in range(manifest.seeds_per_cell):
                noise = rng.lognormal(0.0, sigma) if sigma else 1.0
                store.append(RunRecord(
                    target=manifest.target, arch_id=spec.arch_id,
                    n_m=mlp.param_count(spec), n_d=nd, seed=rep,
                    test_mse=pref * nd ** (-alpha) * noise,
                    best_epoch=0, best_val_loss=1.0, epochs_run=1,
                    precision_floor=False, manifest_hash=manifest.hash(),
                ))
    return store


class TestReport:
    def manifest(self, **kw):
        base = dict(
            dataset="unused.bin", target="J",
            architectures=((3, 4), (3, 16)),
            nd_grid=(256, 512, 1024, 2048, 4096),
            seeds_per_cell=3, master_seed=0,
        )
        base.update(kw)
        return ExperimentManifest(**base)

    def test_synthetic_injection_recovers_exponents(self, tmp_path):
        m = self.manifest()
        inject_power_law_store(tmp_path / "store", m, alphas=(0.9, 1.7),
                               prefactors=(5.0, 11.0))
        bundle = report(tmp_path / "store", m, tmp_path / "report")
        assert [row["alpha_d"] for row in bundle.alpha_d] == \
            [pytest.approx(0.9, abs=1e-10), pytest.approx(1.7, abs=1e-10)]
        for row, pref in zip(bundle.alpha_d, (5.0, 11.0)):
            assert math.exp(row["log_prefactor"]) == pytest.approx(pref, rel=1e-9)

    def test_geo_mean_column_matches_summarize(self, tmp_path):
        m = self.manifest()
        inject_power_law_store(tmp_path / "store", m, alphas=(1.0, 1.5),
                               prefactors=(2.0, 3.0), sigma=0.3)
        bundle = report(tmp_path / "store", m, tmp_path / "report")
        records = ResultsStore(tmp_path / "store").load_records()
        for row in bundle.averages:
            losses = [r.test_mse for r in records
                      if (r.arch_id, r.n_d) == (row["arch_id"], row["n_d"])]
            rep = scalestats.summarize(losses)
            assert row["geo_mean"] == pytest.approx(rep.geo_mean, rel=1e-12)
            assert row["n"] == rep.n

    def test_mask_excludes_rows_from_fit_but_not_curves(self, tmp_path):
        m = self.manifest(fit=FitConfig(nd_max=2048))
        store_dir = tmp_path / "store"
        inject_power_law_store(store_dir, m, alphas=(1.2, 1.2), prefactors=(1.0, 1.0))
        # corrupt the largest size so an unmasked fit would miss 1.2
        store = ResultsStore(store_dir)
        records = store.load_records()
        with open(store.results_path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(harness._RESULT_COLUMNS)
        for r in records:
            if r.n_d == 4096:
                r = RunRecord(**{**r.__dict__, "test_mse": r.test_mse * 50})
            store.append(r)
        bundle = report(store_dir, m, tmp_path / "report")
        for row in bundle.alpha_d:
            assert row["alpha_d"] == pytest.approx(1.2, abs=1e-10)
            assert row["n_points"] == 4
        curve = (tmp_path / "report" / "curves" / "loss_vs_nd_fcn_nl3_nn4.dat").read_text()
        rows = [l for l in curve.splitlines() if not l.startswith("#")]
        assert len(rows) == 5                      # masked rows still plotted
        assert rows[-1].split()[2] == "0"          # but flagged out of the fit

    def test_log_fit_of_exponent_trend(self, tmp_path):
        # alpha_d(n_m) = a ln(n_m) + b exactly, via per-arch power laws
        archs = ((3, 4), (3, 16), (3, 64), (3, 256))
        a, b = 0.151, -0.59
        nms = [mlp.param_count(mlp.MlpSpec(n_l=nl, n_n=nn)) for nl, nn in archs]
        alphas = [a * math.log(nm) + b for nm in nms]
        m = self.manifest(architectures=archs)
        inject_power_law_store(tmp_path / "store", m, alphas=alphas,
                               prefactors=[1.0] * len(archs))
        bundle = report(tmp_path / "store", m, tmp_path / "report")
        trend = [r for r in bundle.log_fits if r["name"] == "alpha_d_vs_ln_nm"][0]
        assert trend["slope"] == pytest.approx(a, abs=1e-9)
        assert trend["intercept"] == pytest.approx(b, abs=1e-8)

    def test_low_n_flagged_not_dropped(self, tmp_path):
        m = self.manifest(seeds_per_cell=1)
        inject_power_law_store(tmp_path / "store", m, alphas=(1.0, 1.0),
                               prefactors=(1.0, 2.0))
        bundle = report(tmp_path / "store", m, tmp_path / "report")
        assert all(row["low_n"] == 1 for row in bundle.averages)
        assert len(bundle.alpha_d) == 2

    def test_empty_store_rejected(self, tmp_path):
        m = self.manifest()
        ResultsStore(tmp_path / "store").prepare(m)
        with pytest.raises(ValueError):
            report(tmp_path / "store", m, tmp_path / "report")

    def test_report_does_not_mutate_store(self, tmp_path):
        m = self.manifest()
        inject_power_law_store(tmp_path / "store", m, alphas=(1.0, 1.5),
                               prefactors=(1.0, 1.0))
        before = (tmp_path / "store" / "results.csv").read_bytes()
        report(tmp_path / "store", m, tmp_path / "report")
        report(tmp_path / "store", m, tmp_path / "report2")
        assert (tmp_path / "store" / "results.csv").read_bytes() == before
        a = (tmp_path / "report" / "alpha_d.csv").read_bytes()
        b = (tmp_path / "report2" / "alpha_d.csv").read_bytes()
        assert a == b

    def test_ingested_records_appear_in_averages_not_fits(self, tmp_path):
        m = self.manifest()
        store_dir = tmp_path / "store"
        inject_power_law_store(store_dir, m, alphas=(1.0, 1.5), prefactors=(1.0, 1.0))
        ext = tmp_path / "ext.csv"
        with open(ext, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["target", "arch_id", "n_m", "n_d", "seed", "test_mse"])
            w.writerow(["J", "resnet18", 11173889, 256, 0, "3e-4"])
        ingest_external(store_dir, ext)
        bundle = report(store_dir, m, tmp_path / "report")
        assert any(r["arch_id"] == "resnet18" for r in bundle.averages)
        assert all(r["arch_id"] != "resnet18" for r in bundle.alpha_d)


class TestCli:
    def test_generate_and_train(self, tmp_path, capsys):
        out = tmp_path / "tiny.bin"
        rc = cli.main([
            "generate", "--count", "10", "--seed", "4", "--m-range", "2",
            "--out", str(out),
        ])
        assert rc == 0
        assert out.exists()
        rc = cli.main([
            "train", "--spec", "1,4", "--seed", "1", "--data", str(out),
            "--target", "J", "--max-epochs", "3",
            "--out", str(tmp_path / "model.ckpt"),
        ])
        assert rc == 0
        assert (tmp_path / "model.ckpt").exists()
        assert "test MSE" in capsys.readouterr().out

    def test_grid_exit_codes(self, toy_dataset, tmp_path):
        m = small_manifest(toy_dataset, seeds_per_cell=1, nd_grid=(16,))
        mpath = tmp_path / "m.json"
        m.save(mpath)
        rc = cli.main(["grid", "--manifest", str(mpath), "--store",
                       str(tmp_path / "s"), "--max-cells", "1"])
        assert rc == 2  # partial
        rc = cli.main(["grid", "--manifest", str(mpath), "--store", str(tmp_path / "s")])
        assert rc == 0
        rc = cli.main(["report", "--store", str(tmp_path / "s"),
                       "--out", str(tmp_path / "rep")])
        assert rc == 0
        assert (tmp_path / "rep" / "averages.csv").exists()

    def test_ingest_cli(self, tmp_path):
        ext = tmp_path / "ext.csv"
        with open(ext, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["target", "arch_id", "n_m", "n_d", "seed", "test_mse"])
            w.writerow(["D", "vit", 225601, 224, 0, "5e-3"])
        rc = cli.main(["ingest", "--store", str(tmp_path / "s"), "--csv", str(ext)])
        assert rc == 0

    def test_error_exit_code(self, tmp_path):
        rc = cli.main(["report", "--store", str(tmp_path / "nope"),
                       "--out", str(tmp_path / "rep")])
        assert rc == 1
