import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stpam.filters import filter_zero_phase
from stpam.pipeline import (Dataset, DatasetFormatError, PreprocessConfig, RawRecording, balance, decimate,
                            filter_and_decimate, filter_spec, load_arrays, preprocess, read_dataset, segment,
                            stratified_split, write_dataset, zscore, zscore_by_subject)


def recording(n_channels=3, seconds=4.0, fs=1024.0, onsets=(0, 1024, 2000), labels=(0, 1, 0), seed=0):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((n_channels, int(seconds * fs)))
    return RawRecording(data, fs, tuple(f"C{i}" for i in range(n_channels)), np.array(onsets), np.array(labels))


class TestRecording:
    def test_onsets_must_increase(self):
        with pytest.raises(ValueError):
            recording(onsets=(10, 5, 20))

    def test_label_per_onset(self):
        with pytest.raises(ValueError):
            recording(labels=(0, 1))

    def test_channel_names(self):
        with pytest.raises(ValueError):
            RawRecording(np.zeros((2, 10)), 10.0, ("A",), np.array([0]), np.array([0]))


class TestSegment:
    def test_one_second_at_1024(self):
        ep, lab, on, skipped = segment(recording(onsets=(0,), labels=(1,)))
        assert ep.shape == (1, 3, 1024) and skipped == 0
        assert lab.tolist() == [1] and on.tolist() == [0]

    def test_window_contents(self):
        rec = recording()
        ep, _, _, _ = segment(rec)
        np.testing.assert_array_equal(ep[2], rec.data[:, 2000:3024])

    def test_events_past_end_are_skipped(self):
        ep, lab, _, skipped = segment(recording(onsets=(0, 3500), labels=(0, 1)))
        assert len(ep) == 1 and skipped == 1 and lab.tolist() == [0]

    def test_empty(self):
        ep, lab, on, skipped = segment(recording(onsets=(), labels=()))
        assert ep.shape == (0, 3, 1024) and skipped == 0

    def test_forty_five_events(self):
        onsets = 100 + np.arange(45) * 205
        labels = np.zeros(45, int)
        labels[[5, 20, 33]] = 1
        rec = RawRecording(np.zeros((2, 12000)), 1024.0, ("A", "B"), onsets, labels)
        ep, lab, _, _ = segment(rec)
        assert len(ep) == 45 and lab.sum() == 3


class TestZscore:
    def test_example(self):
        np.testing.assert_allclose(zscore(np.array([1.0, 2.0, 3.0])), [-1.224745, 0, 1.224745], atol=1e-6)

    def test_constant_channel(self):
        np.testing.assert_array_equal(zscore(np.full((2, 5), 3.0)), 0.0)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 40), elements=st.floats(-1e3, 1e3)))
    def test_idempotent_and_standard(self, x):
        z = zscore(x)
        np.testing.assert_allclose(zscore(z), z, atol=1e-9)
        for row, orig in zip(z, x):
            if np.ptp(orig) > 1e-6:
                assert abs(row.mean()) < 1e-9
                assert abs(row.var() - 1) < 1e-6

    def test_by_subject(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((6, 2, 50)) * 3 + 1
        Z = zscore_by_subject(X, ["a", "a", "a", "b", "b", "b"])
        np.testing.assert_allclose(Z[:3].mean(axis=(0, 2)), 0, atol=1e-12)
        np.testing.assert_allclose(Z[3:].std(axis=(0, 2)), 1, atol=1e-12)


class TestDecimate:
    def test_length(self):
        assert decimate(np.zeros((2, 1024)), 4).shape == (2, 256)
        assert decimate(np.zeros(1023), 4).shape == (255,)

    def test_identity(self):
        x = np.arange(10.0)
        assert decimate(x, 1) is x

    def test_ten_hz_tone_survives(self):
        t = np.arange(4096) / 1024.0
        x = np.sin(2 * np.pi * 10 * t)
        spec = filter_spec(PreprocessConfig(), 1024.0)
        y = decimate(filter_zero_phase(x, spec), 4)
        mid = y[200:-200]
        spectrum = np.abs(np.fft.rfft(mid * np.hanning(len(mid))))
        freqs = np.fft.rfftfreq(len(mid), 1 / 256.0)
        assert freqs[np.argmax(spectrum)] == pytest.approx(10.0, abs=freqs[1])
        amp = np.sqrt(2) * mid.std()
        assert amp == pytest.approx(1.0, abs=0.01)

    def test_filter_and_decimate_matches_steps(self):
        rng = np.random.default_rng(1)
        ep = rng.standard_normal((3, 2, 1024))
        cfg = PreprocessConfig()
        ref = decimate(filter_zero_phase(ep, filter_spec(cfg, 1024.0)), 4)
        np.testing.assert_allclose(filter_and_decimate(ep, cfg, 1024.0), ref, atol=1e-9)


class TestPreprocess:
    def test_shapes_and_standardization(self):
        ds, skipped = preprocess(recording())
        assert ds.X.shape == (3, 3, 256) and ds.fs == 256.0 and skipped == 0
        X = ds.X.astype(np.float64)
        np.testing.assert_allclose(X.mean(axis=-1), 0, atol=1e-6)
        np.testing.assert_allclose(X.var(axis=-1), 1, atol=1e-5)

    def test_float64_path_meets_tight_tolerances(self):
        ep, _, _, _ = segment(recording())
        Z = zscore(filter_and_decimate(ep, PreprocessConfig(), 1024.0))
        assert np.abs(Z.mean(axis=-1)).max() < 1e-9
        assert np.abs(Z.var(axis=-1) - 1).max() < 1e-6

    def test_order_matters(self):
        rec = recording()
        ep, _, _, _ = segment(rec)
        cfg = PreprocessConfig()
        spec = filter_spec(cfg, rec.fs)
        standard = zscore(decimate(filter_zero_phase(ep, spec), 4))
        swapped = decimate(filter_zero_phase(zscore(ep), spec), 4)
        assert np.abs(standard - swapped).max() > 1e-3

    def test_golden_values(self):
        ds, _ = preprocess(recording(seed=42))
        X = ds.X.astype(np.float64)
        # locked values, cross-checked against scipy butter + sosfiltfilt + zscore
        np.testing.assert_allclose([X[0, 0, 0], X[1, 2, 100], X[2, 1, 255], np.abs(X).sum()],
                                   GOLDEN, rtol=1e-6)

    def test_subject_scope(self):
        ds, _ = preprocess(recording(), PreprocessConfig(zscore_scope="subject"))
        X = ds.X.astype(np.float64)
        np.testing.assert_allclose(X.mean(axis=(0, 2)), 0, atol=1e-6)

    def test_bad_config(self):
        with pytest.raises(ValueError):
            PreprocessConfig(zscore_scope="global")
        with pytest.raises(ValueError):
            PreprocessConfig(decimation=0)


GOLDEN = [1.156245231628418, 0.4471273422241211, 1.7449711561203003, 1799.64353161]


class TestSplits:
    def test_stratified(self):
        y = np.array([0] * 40 + [1] * 8)
        tr, te = stratified_split(y, 0.75, seed=3)
        assert len(np.intersect1d(tr, te)) == 0 and len(tr) + len(te) == 48
        assert (y[tr] == 1).sum() == 6 and (y[te] == 1).sum() == 2

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            stratified_split(np.zeros(4), 1.0)

    def test_balance(self):
        y = np.array([0] * 30 + [1] * 5)
        idx = balance(y, seed=1)
        assert (y[idx] == 1).sum() == 5 and (y[idx] == 0).sum() == 5
        np.testing.assert_array_equal(idx, np.sort(idx))


def make_dataset(n=10, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.standard_normal((n, 3, 16)), rng.integers(0, 2, n), 256.0, ("A", "B", "C"),
                   subjects=["S1"] * n, onsets=list(range(0, 100 * n, 100)), provenance={"seed": seed})


class TestContainer:
    def test_round_trip(self, tmp_path):
        ds = make_dataset()
        write_dataset(ds, tmp_path / "d")
        back = read_dataset(tmp_path / "d")
        np.testing.assert_array_equal(back.X, ds.X)
        np.testing.assert_array_equal(back.y, ds.y)
        assert back.channel_names == ds.channel_names and back.onsets == ds.onsets
        assert back.provenance == {"seed": 0} and back.fs == 256.0

    def test_layout_on_disk(self, tmp_path):
        ds = make_dataset(4)
        write_dataset(ds, tmp_path / "d")
        raw = np.fromfile(tmp_path / "d" / "data.bin", dtype="<f4")
        np.testing.assert_array_equal(raw.reshape(4, 3, 16), ds.X)
        assert (tmp_path / "d" / "labels.bin").read_bytes() == ds.y.tobytes()
        meta = json.loads((tmp_path / "d" / "meta.json").read_text())
        assert (meta["n_samples"], meta["n_channels"], meta["n_times"]) == (4, 3, 16)

    def test_empty(self, tmp_path):
        ds = Dataset(np.zeros((0, 2, 8)), np.zeros(0), 256.0, ("A", "B"))
        write_dataset(ds, tmp_path / "e")
        assert len(read_dataset(tmp_path / "e")) == 0

    def test_bad_format_tag(self, tmp_path):
        write_dataset(make_dataset(), tmp_path / "d")
        meta = json.loads((tmp_path / "d" / "meta.json").read_text())
        meta["format"] = "other"
        (tmp_path / "d" / "meta.json").write_text(json.dumps(meta))
        with pytest.raises(DatasetFormatError):
            read_dataset(tmp_path / "d")

    def test_bad_version(self, tmp_path):
        write_dataset(make_dataset(), tmp_path / "d")
        meta = json.loads((tmp_path / "d" / "meta.json").read_text())
        meta["schema_version"] = 99
        (tmp_path / "d" / "meta.json").write_text(json.dumps(meta))
        with pytest.raises(DatasetFormatError):
            read_dataset(tmp_path / "d")

    def test_truncated(self, tmp_path):
        write_dataset(make_dataset(), tmp_path / "d")
        p = tmp_path / "d" / "data.bin"
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(DatasetFormatError):
            read_dataset(tmp_path / "d")

    def test_missing(self, tmp_path):
        with pytest.raises(DatasetFormatError):
            read_dataset(tmp_path / "nothing")
        write_dataset(make_dataset(), tmp_path / "d")
        (tmp_path / "d" / "labels.bin").unlink()
        with pytest.raises(DatasetFormatError):
            read_dataset(tmp_path / "d")

    def test_take_and_concat(self):
        ds = make_dataset(6)
        part = ds.take([1, 3])
        assert part.onsets == [100, 300]
        both = Dataset.concat([part, ds.take([0])])
        assert len(both) == 3 and both.subjects == ["S1"] * 3

    def test_load_arrays(self):
        X, y = load_arrays(make_dataset(3))
        assert X.dtype == np.float64 and y.dtype == np.int64
