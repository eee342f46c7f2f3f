import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal

from stpam.filters import (FilterConfigError, design_butterworth, filter_zero_phase, sos_zi, sosfilt,
                           zero_phase_matrix)

FS = 1024.0


@pytest.fixture(scope="module")
def spec():
    return design_butterworth(6, 1.0, 40.0, FS)


def db(h):
    return 20 * np.log10(np.abs(h))


class TestDesign:
    def test_sections_are_stable(self, spec):
        assert spec.n_sections == 6
        assert np.all(np.abs(spec.poles()) < 1)

    def test_matches_scipy_design(self, spec):
        ref = signal.butter(6, [1.0, 40.0], btype="bandpass", fs=FS, output="sos")
        freqs = np.linspace(0.05, 511, 2000)
        _, h_ref = signal.sosfreqz(ref, worN=freqs, fs=FS)
        np.testing.assert_allclose(np.abs(spec.response(freqs)), np.abs(h_ref), atol=1e-9)
        np.testing.assert_allclose(np.sort_complex(spec.poles()),
                                   np.sort_complex(np.concatenate([np.roots(s[3:]) for s in ref])), atol=1e-9)

    def test_response_oracle_is_independent(self, spec):
        # evaluate H(e^jw) from zeros, poles and gain rather than the section product
        # (a single expanded polynomial is too ill-conditioned at a 1 Hz edge)
        z, p, k = signal.sos2zpk(spec.sos)
        w = 2 * np.pi * np.array([1.0, 40.0]) / FS
        _, h = signal.freqz_zpk(z, p, k, worN=w)
        np.testing.assert_allclose(db(h), -3.0103, atol=0.3)

    def test_cutoffs_minus_3db(self, spec):
        np.testing.assert_allclose(db(spec.response([1.0, 40.0])), -3.0103, atol=0.3)

    def test_passband_centre(self, spec):
        assert abs(db(spec.response([np.sqrt(40.0)]))[0]) < 0.05

    def test_stopband(self, spec):
        assert np.all(db(spec.response([0.1, 120.0])) <= -40)

    @pytest.mark.parametrize("low,high", [(0, 40), (40, 1), (1, 512), (1, 600), (-1, 40)])
    def test_bad_cutoffs(self, low, high):
        with pytest.raises(FilterConfigError):
            design_butterworth(6, low, high, FS)

    def test_bad_order(self):
        with pytest.raises(FilterConfigError):
            design_butterworth(0, 1, 40, FS)


class TestApplication:
    def test_causal_matches_scipy(self, spec):
        x = np.random.default_rng(0).standard_normal((3, 500))
        np.testing.assert_allclose(sosfilt(spec.sos, x), signal.sosfilt(spec.sos, x), atol=1e-10)

    def test_initial_state_matches_scipy(self, spec):
        np.testing.assert_allclose(sos_zi(spec.sos), signal.sosfilt_zi(spec.sos), atol=1e-10)

    def test_zero_phase_matches_scipy(self, spec):
        x = np.random.default_rng(1).standard_normal((4, 1024))
        ref = signal.sosfiltfilt(spec.sos, x, padtype="odd", padlen=spec.padlen)
        np.testing.assert_allclose(filter_zero_phase(x, spec), ref, atol=1e-9)

    def test_impulse_peak_does_not_move(self, spec):
        for k in (300, 512, 700):
            x = np.zeros(1024)
            x[k] = 1.0
            y = filter_zero_phase(x, spec)
            assert abs(int(np.argmax(y)) - k) <= 1

    def test_net_response_squares(self, spec):
        t = np.arange(8192) / FS
        x = np.sin(2 * np.pi * 40.0 * t)
        y = filter_zero_phase(x, spec)
        mid = slice(2048, 6144)
        gain = np.std(y[mid]) / np.std(x[mid])
        assert 20 * np.log10(gain) == pytest.approx(-6.02, abs=0.3)

    def test_matrix_form(self, spec):
        x = np.random.default_rng(2).standard_normal((5, 256))
        M = zero_phase_matrix(spec, 256)
        np.testing.assert_allclose(x @ M, filter_zero_phase(x, spec), atol=1e-10)
        np.testing.assert_allclose(x @ zero_phase_matrix(spec, 256, 4), filter_zero_phase(x, spec)[:, ::4],
                                   atol=1e-10)

    def test_too_short(self, spec):
        with pytest.raises(FilterConfigError):
            filter_zero_phase(np.zeros(spec.padlen), spec)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-5, 5), st.floats(-5, 5))
    def test_linear(self, seed, a, b):
        spec = design_butterworth(6, 1.0, 40.0, 256.0)
        rng = np.random.default_rng(seed)
        x, y = rng.standard_normal((2, 300))
        lhs = filter_zero_phase(a * x + b * y, spec)
        rhs = a * filter_zero_phase(x, spec) + b * filter_zero_phase(y, spec)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)
