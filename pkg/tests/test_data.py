"""Synthetic task generation and the band-energy oracle."""

import numpy as np
import pytest

from arrn.data import (
    SynthDatasetSpec,
    band_rms,
    generate_dataset,
    load_dataset,
    oracle_predict,
    save_dataset,
)
from arrn.resample import resample_perfect_array


class TestGeneration:
    def test_same_seed_is_bit_identical(self):
        spec = SynthDatasetSpec(classes=3, samples_per_class=8, seed=5)
        a = generate_dataset(spec)
        b = generate_dataset(spec)
        np.testing.assert_array_equal(a.train.inputs, b.train.inputs)
        np.testing.assert_array_equal(a.test.inputs, b.test.inputs)
        np.testing.assert_array_equal(a.signatures, b.signatures)

    def test_different_seed_differs(self):
        a = generate_dataset(SynthDatasetSpec(samples_per_class=4, seed=1))
        b = generate_dataset(SynthDatasetSpec(samples_per_class=4, seed=2))
        assert np.max(np.abs(a.train.inputs - b.train.inputs)) > 0

    def test_split_sizes_and_balance(self):
        spec = SynthDatasetSpec(classes=4, samples_per_class=10, train_fraction=0.8)
        ds = generate_dataset(spec)
        assert len(ds.train) == 32 and len(ds.test) == 8
        for cls in range(4):
            assert np.sum(ds.train.labels == cls) == 8
            assert np.sum(ds.test.labels == cls) == 2

    def test_coarse_band_signatures_are_separated(self):
        for seed in range(5):
            ds = generate_dataset(SynthDatasetSpec(classes=4, samples_per_class=2, seed=seed))
            coarse = np.sort(ds.signatures[:, 0])
            assert np.min(np.diff(coarse)) > 0.1

    def test_band_rms_matches_signature_when_noiseless(self):
        spec = SynthDatasetSpec(
            classes=2, samples_per_class=4, noise=0.0, seed=3,
            signatures=((0.5, 1.0, 0.25), (1.5, 0.1, 0.9)),
        )
        ds = generate_dataset(spec)
        rms = band_rms(ds.train.inputs, spec.level_extents, 1).mean(axis=1)
        for i, label in enumerate(ds.train.labels):
            np.testing.assert_allclose(rms[i], ds.signatures[label], atol=1e-10)

    def test_signature_shape_validation(self):
        with pytest.raises(ValueError):
            SynthDatasetSpec(classes=2, signatures=((1.0, 2.0),))


class TestOracle:
    def test_perfect_accuracy_on_disjoint_noiseless_classes(self):
        spec = SynthDatasetSpec(
            classes=2, samples_per_class=16, noise=0.0, seed=7,
            signatures=((1.0, 0.0, 0.0), (0.0, 0.0, 1.0)),
        )
        ds = generate_dataset(spec)
        pred = oracle_predict(ds.test.inputs, ds.signatures, spec.level_extents)
        assert np.mean(pred == ds.test.labels) == 1.0

    def test_oracle_stays_above_chance_at_quarter_resolution(self):
        spec = SynthDatasetSpec(classes=4, samples_per_class=16, noise=0.1, seed=8)
        ds = generate_dataset(spec)
        low = resample_perfect_array(ds.test.inputs, (16,), 1)
        pred = oracle_predict(low, ds.signatures, spec.level_extents)
        assert np.mean(pred == ds.test.labels) > 0.5  # chance is 0.25

    def test_oracle_uses_only_available_bands(self):
        spec = SynthDatasetSpec(classes=2, samples_per_class=8, noise=0.0, seed=9,
                                signatures=((0.4, 1.0, 1.0), (1.2, 1.0, 1.0)))
        ds = generate_dataset(spec)
        low = resample_perfect_array(ds.test.inputs, (16,), 1)
        pred = oracle_predict(low, ds.signatures, spec.level_extents)
        assert np.mean(pred == ds.test.labels) == 1.0


class TestCache:
    def test_directory_roundtrip(self, tmp_path):
        spec = SynthDatasetSpec(classes=3, samples_per_class=6, seed=11)
        ds = generate_dataset(spec)
        save_dataset(tmp_path / "cache", ds)
        again = load_dataset(tmp_path / "cache")
        assert again.spec == spec
        np.testing.assert_array_equal(again.train.inputs, ds.train.inputs)
        np.testing.assert_array_equal(again.train.labels, ds.train.labels)
        np.testing.assert_array_equal(again.test.inputs, ds.test.inputs)
        np.testing.assert_array_equal(again.signatures, ds.signatures)
