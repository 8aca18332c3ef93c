import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neurophysnet.errors import ConfigurationError, DataError, DesignError, FormatError
from neurophysnet.sigproc import (EEGB_MAGIC, FilterBankSpec, TrialSet, WindowSpec, apply_filter_bank,
                                  default_bands, design_cheby2_bandpass, design_filter_bank,
                                  load_eegb, parse_eegb, preprocess, save_eegb, segment_temporal)

FS = 250.0


def db(h):
    return 20 * np.log10(np.abs(h))


def freqz_oracle(cascade, freqs, fs):
    """Independent response: polynomial evaluation of the expanded transfer function."""
    b, a = np.array([cascade.gain]), np.array([1.0])
    for b0, b1, b2, a1, a2 in cascade.sections:
        b = np.convolve(b, [b0, b1, b2])
        a = np.convolve(a, [1.0, a1, a2])
    z = np.exp(-2j * np.pi * np.asarray(freqs) / fs)
    return np.polyval(b[::-1], z) / np.polyval(a[::-1], z)


def direct_form_filter(cascade, x):
    """Plain difference-equation oracle, one biquad after another."""
    y = np.asarray(x, dtype=float) * cascade.gain
    for b0, b1, b2, a1, a2 in cascade.sections:
        out = np.zeros_like(y)
        for n in range(len(y)):
            acc = b0 * y[n]
            if n >= 1:
                acc += b1 * y[n - 1] - a1 * out[n - 1]
            if n >= 2:
                acc += b2 * y[n - 2] - a2 * out[n - 2]
            out[n] = acc
        y = out
    return y


# segmentation ---------------------------------------------------------------

@pytest.mark.parametrize("stride, expected", [(250, 4), (125, 7)])
def test_window_count(stride, expected):
    assert WindowSpec(250, stride).n_windows(1000) == expected


def test_segments_partition_the_signal(rng):
    x = rng.standard_normal((2, 3, 1010))
    seg = segment_temporal(x, WindowSpec(250, 250))
    assert seg.shape == (2, 4, 3, 250)
    rebuilt = seg.transpose(0, 2, 1, 3).reshape(2, 3, -1)
    np.testing.assert_array_equal(rebuilt, x[..., :1000])


def test_overlapping_windows_share_samples(rng):
    x = rng.standard_normal((1, 1, 20))
    seg = segment_temporal(x, WindowSpec(8, 4))
    np.testing.assert_array_equal(seg[0, 1, 0], x[0, 0, 4:12])


def test_window_longer_than_trial():
    with pytest.raises(ConfigurationError):
        segment_temporal(np.zeros((1, 1, 10)), WindowSpec(20, 10))


@pytest.mark.parametrize("window, stride", [(0, 1), (10, 0), (10, 11)])
def test_bad_window_spec(window, stride):
    with pytest.raises(ConfigurationError):
        WindowSpec(window, stride)


def test_default_window_is_one_second():
    assert WindowSpec.default(250) == WindowSpec(250, 125)


# filter design --------------------------------------------------------------

def test_default_bank_layout():
    bands = default_bands()
    assert len(bands) == 9
    assert bands[0] == (4.0, 8.0) and bands[-1] == (36.0, 40.0)
    assert all(hi - lo == 4 for lo, hi in bands)


def test_mu_band_response():
    c = design_cheby2_bandpass((8, 12), 4, 30, FS)
    grid = np.linspace(0, FS / 2, 4096)
    h = db(freqz_oracle(c, grid, FS))
    at = lambda f: h[np.argmin(np.abs(grid - f))]
    assert -3.0 <= at(10) <= 0.1
    assert at(4) <= -30 and at(16) <= -30


def test_response_matches_expanded_polynomial(rng):
    c = design_cheby2_bandpass((20, 24), 4, 30, FS)
    f = rng.uniform(0, FS / 2, 50)
    np.testing.assert_allclose(c.response(f, FS), freqz_oracle(c, f, FS), rtol=1e-9, atol=1e-12)


def test_filter_matches_difference_equation(rng):
    c = design_cheby2_bandpass((8, 12), 4, 30, FS)
    x = rng.standard_normal(300)
    np.testing.assert_allclose(c.filter(x), direct_form_filter(c, x), atol=1e-12)


def test_default_bank_is_stable():
    for cascade in design_filter_bank(FilterBankSpec(), FS):
        assert cascade.is_stable()
        assert np.abs(cascade.poles()).max() < 1.0


def test_impulse_response_decays():
    c = design_cheby2_bandpass((8, 12), 4, 30, FS)
    impulse = np.zeros(int(12 * FS))
    impulse[0] = 1.0
    h = c.filter(impulse)
    assert np.abs(h[int(10 * FS) + 1:]).max() < 1e-6


@pytest.mark.parametrize("band", [(8, 125), (100, 130), (0, 10), (12, 8)])
def test_band_edges_validated(band):
    with pytest.raises(DesignError):
        design_cheby2_bandpass(band, 4, 30, FS)


def test_stopband_beyond_nyquist():
    with pytest.raises(DesignError):
        design_cheby2_bandpass((118, 124), 4, 30, FS)


# filter bank application ----------------------------------------------------

def test_sinusoid_band_selectivity():
    t = np.arange(int(2 * FS)) / FS
    x = np.sin(2 * np.pi * 10 * t)[None, None, None, :]
    bank = FilterBankSpec(bands=((8, 12), (20, 24)))
    y = apply_filter_bank(x, bank, FS)[0, 0, :, 0]
    steady = slice(int(0.5 * FS), None)
    rms = lambda s: np.sqrt(np.mean(s[steady] ** 2))
    assert rms(y[0]) / rms(x[0, 0, 0]) >= 0.70
    assert rms(y[1]) / rms(x[0, 0, 0]) <= 0.03


def test_zero_in_zero_out():
    out = apply_filter_bank(np.zeros((1, 2, 3, 50)), FilterBankSpec(), FS)
    assert out.shape == (1, 2, 9, 3, 50)
    assert not out.any()


def test_bank_output_shape():
    assert apply_filter_bank(np.zeros((2, 4, 22, 250)), FilterBankSpec(), FS).shape == (2, 4, 9, 22, 250)


def test_filtering_is_linear(rng):
    x, y = rng.standard_normal((2, 1, 2, 3, 120))
    spec = FilterBankSpec()
    lhs = apply_filter_bank(2.5 * x - 0.7 * y, spec, FS)
    rhs = 2.5 * apply_filter_bank(x, spec, FS) - 0.7 * apply_filter_bank(y, spec, FS)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 99))
def test_filtering_is_causal(n):
    x = np.random.default_rng(n).standard_normal((1, 1, 1, 100))
    cut = x.copy()
    cut[..., n + 1:] = 0.0
    spec = FilterBankSpec(bands=((8, 12), (20, 24)))
    a, b = apply_filter_bank(x, spec, FS), apply_filter_bank(cut, spec, FS)
    np.testing.assert_array_equal(a[..., :n + 1], b[..., :n + 1])


def test_windows_filtered_from_zero_state(rng):
    data = TrialSet(rng.standard_normal((1, 2, 64)), [0], 64.0, 2)
    spec = FilterBankSpec(bands=((4, 8),))
    out = preprocess(data, WindowSpec(32, 16), spec)
    cascade = design_filter_bank(spec, 64.0)[0]
    for w in range(out.shape[1]):
        seg = data.trials[0, 1, 16 * w:16 * w + 32]
        np.testing.assert_allclose(out[0, w, 0, 1], direct_form_filter(cascade, seg), atol=1e-12)


def test_preprocess_golden():
    # computed once from this pipeline and frozen as a regression lock
    rng = np.random.default_rng(2024)
    data = TrialSet(rng.standard_normal((2, 3, 64)), [0, 1], 64.0, 2)
    x = preprocess(data, WindowSpec(32, 16), FilterBankSpec(bands=((4, 8), (10, 14))))
    assert x.shape == (2, 3, 2, 3, 32)
    assert x.sum() == pytest.approx(-0.9234869966766106, rel=1e-10)
    assert np.abs(x).sum() == pytest.approx(268.3826894910625, rel=1e-10)
    assert x[1, 2, 1, 2, -1] == pytest.approx(0.49206245228935724, rel=1e-10)
    assert x[0, 0, 0, 0, 5] == pytest.approx(-0.13836115513812827, rel=1e-10)


# trial sets -----------------------------------------------------------------

def test_trialset_label_range():
    with pytest.raises(DataError):
        TrialSet(np.zeros((2, 1, 4)), [0, 2], 100.0, 2)


def test_trialset_label_count():
    with pytest.raises(DataError):
        TrialSet(np.zeros((2, 1, 4)), [0], 100.0, 2)


# EEGB -----------------------------------------------------------------------

def _random_set(rng, n=3, C=4, T=17, k=3):
    return TrialSet(rng.standard_normal((n, C, T)).astype(np.float32), rng.integers(0, k, n), 128.0, k)


def test_eegb_round_trip(tmp_path, rng):
    data = _random_set(rng)
    path = tmp_path / "a.eegb"
    save_eegb(data, path)
    back = load_eegb(path)
    np.testing.assert_array_equal(back.trials, data.trials)
    np.testing.assert_array_equal(back.labels, data.labels)
    assert (back.sample_rate_hz, back.n_classes) == (128.0, 3)
    save_eegb(back, tmp_path / "b.eegb")
    assert (tmp_path / "b.eegb").read_bytes() == path.read_bytes()


def test_eegb_layout(tmp_path):
    data = TrialSet(np.arange(6, dtype=np.float32).reshape(2, 1, 3), [1, 0], 50.0, 2)
    save_eegb(data, tmp_path / "x.eegb")
    raw = (tmp_path / "x.eegb").read_bytes()
    assert struct.unpack_from("<4sIIIIIf", raw) == (b"EEGB", 1, 2, 1, 3, 2, 50.0)
    assert raw[28] == 1
    assert struct.unpack_from("<3f", raw, 29) == (0.0, 1.0, 2.0)
    assert raw[41] == 0


def test_eegb_empty(tmp_path):
    save_eegb(TrialSet(np.zeros((0, 2, 5)), [], 100.0, 2), tmp_path / "e.eegb")
    back = load_eegb(tmp_path / "e.eegb")
    assert len(back) == 0 and back.trials.shape == (0, 2, 5)


def _bytes(rng, tmp_path):
    path = tmp_path / "f.eegb"
    save_eegb(_random_set(rng, n=2, C=2, T=3, k=2), path)
    return bytearray(path.read_bytes())


def test_eegb_bad_magic(rng, tmp_path):
    raw = _bytes(rng, tmp_path)
    raw[:4] = b"XXXX"
    with pytest.raises(FormatError) as err:
        parse_eegb(bytes(raw))
    assert err.value.offset == 0


def test_eegb_bad_version(rng, tmp_path):
    raw = _bytes(rng, tmp_path)
    raw[4:8] = struct.pack("<I", 9)
    with pytest.raises(FormatError) as err:
        parse_eegb(bytes(raw))
    assert err.value.offset == 4


def test_eegb_truncated(rng, tmp_path):
    raw = _bytes(rng, tmp_path)
    record = 1 + 4 * 2 * 3
    with pytest.raises(FormatError, match="truncated") as err:
        parse_eegb(bytes(raw[:-5]))
    assert err.value.offset == 28 + record


def test_eegb_trailing_bytes(rng, tmp_path):
    raw = _bytes(rng, tmp_path)
    with pytest.raises(FormatError) as err:
        parse_eegb(bytes(raw) + b"\0")
    assert err.value.offset == len(raw)


def test_eegb_label_out_of_range(rng, tmp_path):
    raw = _bytes(rng, tmp_path)
    record = 1 + 4 * 2 * 3
    raw[28 + record] = 7
    with pytest.raises(FormatError, match="trial 1") as err:
        parse_eegb(bytes(raw))
    assert err.value.offset == 28 + record
    assert "byte offset" in str(err.value)


def test_magic_constant():
    assert EEGB_MAGIC == b"EEGB"
