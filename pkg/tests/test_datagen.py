import numpy as np
import pytest

from scaling_forge import datagen
from scaling_forge.datagen import (
    Dataset,
    DatasetFormatError,
    DegenerateDataError,
    ParamSample,
    SplitSpec,
    apply_standardization,
    generate_dataset,
    is_ferromagnetic,
    label_ranges,
    load_manifest,
    make_split,
    manifest_path,
    normalized_targets,
    read_dataset,
    sample_params,
    split_indices,
    standardize,
    write_dataset,
)
from scaling_forge.lattice import CouplingProfile, build_superlattice


def synthetic_dataset(n, seed=0, h=8, w=8) -> Dataset:
    """Random records with valid ranges; no spin simulation involved."""
    rng = np.random.Generator(np.random.PCG64(seed))
    images = rng.uniform(-1, 1, size=(n, 2, h, w)).astype(np.float32)
    ranges = label_ranges()
    labels = np.column_stack([
        rng.uniform(*ranges["theta"], size=n),
        rng.uniform(*ranges["J"], size=n),
        rng.uniform(*ranges["D"], size=n),
    ])
    seeds = rng.integers(0, 2**63, size=n, dtype=np.uint64)
    return Dataset(images=images, labels=labels, seeds=seeds)


class TestSampleParams:
    def test_range_containment(self):
        samples = sample_params(0, 10_000)
        j = np.array([s.J for s in samples])
        d = np.array([s.D for s in samples])
        m = np.array([s.m for s in samples])
        assert j.min() >= 1.0 and j.max() <= 10.0
        assert d.min() >= 0.01 and d.max() <= 0.3
        assert set(m) <= set(range(8, 33))
        th = np.array([s.theta_deg for s in samples])
        assert th.min() >= 1.01 - 0.005 and th.max() <= 3.89 + 0.005

    def test_deterministic(self):
        assert sample_params(123, 50) == sample_params(123, 50)
        assert sample_params(123, 50) != sample_params(124, 50)

    def test_uniform_marginals_ks(self):
        # KS statistic below the 1% critical value 1.63/sqrt(n)
        n = 10_000
        samples = sample_params(7, n)
        crit = 1.63 / np.sqrt(n)
        for values, lo, hi in [
            (np.array([s.J for s in samples]), 1.0, 10.0),
            (np.array([s.D for s in samples]), 0.01, 0.3),
        ]:
            u = np.sort((values - lo) / (hi - lo))
            grid = np.arange(1, n + 1) / n
            ks = max(np.abs(grid - u).max(), np.abs(u - (grid - 1.0 / n)).max())
            assert ks < crit

    def test_restricted_m(self):
        samples = sample_params(0, 100, m_indices=[8])
        assert all(s.m == 8 for s in samples)

    def test_count_validation(self):
        with pytest.raises(ValueError):
            sample_params(0, 0)


class TestFerromagnetCheck:
    def test_uniform_up(self):
        g = build_superlattice(2)
        s = np.zeros((g.n_sites, 3))
        s[:, 2] = 1.0
        assert is_ferromagnetic(g, s) is True

    def test_layer_flipped_still_ferromagnetic(self):
        g = build_superlattice(2)
        s = np.zeros((g.n_sites, 3))
        s[:, 2] = 1.0
        s[g.layer_ids("bottom"), 2] = -1.0
        assert is_ferromagnetic(g, s) is True

    def test_half_flipped_layer_is_not(self):
        g = build_superlattice(2)
        s = np.zeros((g.n_sites, 3))
        s[:, 2] = 1.0
        top = g.layer_ids("top")
        s[top[: len(top) // 2], 2] = -1.0
        assert is_ferromagnetic(g, s) is False


class TestGenerate:
    def test_exact_count_and_validity(self, tmp_path):
        samples = sample_params(11, 12, m_indices=[3])
        out = tmp_path / "ds.bin"
        man = generate_dataset(samples, out, master_seed=11, m_indices=[3])
        assert man.record_count == 12
        ds = read_dataset(out)
        assert len(ds) == 12
        assert ds.images.shape == (12, 2, 100, 100)
        assert not ds.standardized

    def test_byte_reproducible(self, tmp_path):
        samples = sample_params(5, 6, m_indices=[2])
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        ma = generate_dataset(samples, a, master_seed=5, m_indices=[2])
        mb = generate_dataset(samples, b, master_seed=5, m_indices=[2])
        assert a.read_bytes() == b.read_bytes()
        assert ma.hash() == mb.hash()

    def test_different_seed_differs(self, tmp_path):
        samples = sample_params(5, 4, m_indices=[2])
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        generate_dataset(samples, a, master_seed=5, m_indices=[2])
        generate_dataset(samples, b, master_seed=6, m_indices=[2])
        assert a.read_bytes() != b.read_bytes()

    def test_fm_exclusion_rate_rises_with_weak_coupling_and_large_d(self, tmp_path):
        # default coupling, random draws
        samples = sample_params(11, 10, m_indices=[3])
        man_a = generate_dataset(samples, tmp_path / "a.bin", master_seed=11, m_indices=[3])
        # weak interlayer coupling and forced large D (and J): domains can
        # no longer pay for their walls, so most draws are excluded
        forced = [
            ParamSample(3, float(j), float(d))
            for j, d in zip(np.linspace(8, 10, 10), np.linspace(0.25, 0.3, 10))
        ]
        man_b = generate_dataset(
            forced, tmp_path / "b.bin", master_seed=11,
            profile=CouplingProfile(j_perp_scale=0.4), m_indices=[3],
            max_attempts_per_record=200,
        )
        assert man_b.fm_excluded > man_a.fm_excluded
        assert man_b.record_count == 10

    def test_manifest_sidecar(self, tmp_path):
        samples = sample_params(3, 4, m_indices=[2])
        out = tmp_path / "ds.bin"
        man = generate_dataset(samples, out, master_seed=3, m_indices=[2])
        loaded = load_manifest(manifest_path(out))
        assert loaded.hash() == man.hash()
        assert loaded.pixel_stats[1] > 0
        assert loaded.label_stats["J"] == [1.0, 10.0]


class TestStandardize:
    def test_zero_mean_unit_variance(self):
        ds = synthetic_dataset(50)
        out, (mean, std) = standardize(ds)
        px = out.images.astype(np.float64)
        assert abs(px.mean()) < 1e-6
        assert abs(px.var() - 1.0) < 1e-4
        assert std > 0
        assert out.standardized and not ds.standardized

    def test_double_application_rejected(self):
        ds = synthetic_dataset(10)
        out, stats = standardize(ds)
        with pytest.raises(DatasetFormatError):
            standardize(out)
        with pytest.raises(DatasetFormatError):
            apply_standardization(out, stats)

    def test_flag_survives_roundtrip(self, tmp_path):
        ds, _ = standardize(synthetic_dataset(10))
        path = tmp_path / "std.bin"
        write_dataset(ds, path)
        back = read_dataset(path)
        assert back.standardized
        with pytest.raises(DatasetFormatError):
            standardize(back)

    def test_degenerate_pixels(self):
        ds = synthetic_dataset(5)
        ds.images[:] = 0.25
        with pytest.raises(DegenerateDataError):
            standardize(ds)

    def test_stored_stats_apply_to_other_split(self):
        ds = synthetic_dataset(60)
        train, val = make_split(ds, SplitSpec(n_total=48, seed=0))
        train_std, stats = standardize(train)
        val_std = apply_standardization(val, stats)
        expect = (val.images - np.float32(stats[0])) / np.float32(stats[1])
        assert np.array_equal(val_std.images, expect)


class TestSplit:
    def test_sizes_from_quoted_grid(self):
        assert SplitSpec(n_total=256, seed=0).n_train == 224
        assert SplitSpec(n_total=256, seed=0).n_val == 32
        assert SplitSpec(n_total=131072, seed=0).n_train == 114688

    def test_disjoint_and_exact(self):
        tr, va = split_indices(300, SplitSpec(n_total=256, seed=3))
        assert len(tr) == 224 and len(va) == 32
        assert not set(tr) & set(va)
        assert len(set(tr) | set(va)) == 256

    def test_deterministic(self):
        a = split_indices(100, SplitSpec(n_total=64, seed=9))
        b = split_indices(100, SplitSpec(n_total=64, seed=9))
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_pool_too_small(self):
        with pytest.raises(ValueError):
            split_indices(100, SplitSpec(n_total=128, seed=0))

    def test_divisibility(self):
        with pytest.raises(ValueError):
            SplitSpec(n_total=100, seed=0)
        with pytest.raises(ValueError):
            SplitSpec(n_total=0, seed=0)

    def test_make_split_copies(self):
        ds = synthetic_dataset(40)
        train, val = make_split(ds, SplitSpec(n_total=32, seed=1))
        assert len(train) == 28 and len(val) == 4


class TestFileFormat:
    def test_roundtrip_exact(self, tmp_path):
        ds = synthetic_dataset(9, h=100, w=100)
        path = tmp_path / "ds.bin"
        write_dataset(ds, path)
        back = read_dataset(path)
        assert np.array_equal(back.images, ds.images)
        assert np.array_equal(back.labels, ds.labels)
        assert np.array_equal(back.seeds, ds.seeds)

    def test_file_size_formula(self, tmp_path):
        ds = synthetic_dataset(7, h=100, w=100)
        path = tmp_path / "ds.bin"
        write_dataset(ds, path)
        per_record = 2 * 10_000 * 4 + 3 * 8 + 8
        assert datagen.record_nbytes((100, 100)) == per_record
        assert path.stat().st_size == datagen.header_nbytes() + 7 * per_record

    def test_bad_magic(self, tmp_path):
        ds = synthetic_dataset(2)
        path = tmp_path / "ds.bin"
        write_dataset(ds, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(raw)
        with pytest.raises(DatasetFormatError):
            read_dataset(path)

    def test_truncation(self, tmp_path):
        ds = synthetic_dataset(3)
        path = tmp_path / "ds.bin"
        write_dataset(ds, path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(DatasetFormatError):
            read_dataset(path)

    def test_bad_version(self, tmp_path):
        ds = synthetic_dataset(1)
        path = tmp_path / "ds.bin"
        write_dataset(ds, path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(raw)
        with pytest.raises(DatasetFormatError):
            read_dataset(path)

    def test_label_range_validated_on_read(self, tmp_path):
        ds = synthetic_dataset(4)
        ds.labels[2, 1] = 55.0  # J outside [1, 10]
        path = tmp_path / "ds.bin"
        write_dataset(ds, path)
        with pytest.raises(DatasetFormatError):
            read_dataset(path)
        assert len(read_dataset(path, validate=False)) == 4

    def test_pixel_range_validated_on_read(self, tmp_path):
        ds = synthetic_dataset(4)
        ds.images[1, 0, 0, 0] = 1.5
        path = tmp_path / "ds.bin"
        write_dataset(ds, path)
        with pytest.raises(DatasetFormatError):
            read_dataset(path)


class TestTargets:
    def test_normalized_targets_in_unit_interval(self):
        ds = synthetic_dataset(200)
        for target in ("theta", "J", "D"):
            y = normalized_targets(ds, target)
            assert y.min() >= 0.0 and y.max() <= 1.0

    def test_normalization_is_minmax(self):
        ds = synthetic_dataset(10)
        y = normalized_targets(ds, "J")
        assert np.allclose(y, (ds.labels[:, 1] - 1.0) / 9.0)

    def test_unknown_target(self):
        with pytest.raises(ValueError):
            normalized_targets(synthetic_dataset(5), "K")


class TestRecordAccessor:
    def test_record_fields(self):
        ds = synthetic_dataset(5)
        rec = ds.record(2)
        assert np.array_equal(rec.top, ds.images[2, 0])
        assert np.array_equal(rec.bottom, ds.images[2, 1])
        assert rec.J == ds.labels[2, 1]
        assert rec.seed == int(ds.seeds[2])
