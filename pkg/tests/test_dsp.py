import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rfflab import rng as rngmod
from rfflab.dsp import (DISABLED, InterferenceConfig, InterferenceKind, Window, energy_detect, frame_stream,
                        inject, inject_broadband, inject_narrowband, lowpass_filter, normalize_rms,
                        resample_cubic, selected_bins, stft)
from rfflab.errors import ConfigError, InvalidInputError


def _cnoise(rng, n):
    return rng.standard_normal(n) + 1j * rng.standard_normal(n)


def _power(x):
    return float(np.mean(np.abs(x) ** 2))


# --- energy detection ------------------------------------------------------

def _brute_force_segments(x, window, factor):
    p = np.abs(x) ** 2
    pw = np.array([p[i:i + window].mean() for i in range(len(x) - window + 1)])
    hot = pw > factor * np.median(pw)
    segs, i = [], 0
    while i < len(hot):
        if hot[i]:
            j = i
            while j + 1 < len(hot) and hot[j + 1]:
                j += 1
            segs.append((i, j + window))
            i = j + 1
        else:
            i += 1
    return segs


def test_energy_detect_single_burst():
    x = np.zeros(1000, dtype=complex)
    x[400:600] = 1.0
    segs = energy_detect(x, 32, 3.0)
    assert segs == _brute_force_segments(x, 32, 3.0)
    assert segs == [(400 - 31, 600 + 31)]


def test_energy_detect_degenerate_streams():
    assert energy_detect(np.zeros(500), 32, 3.0) == []
    assert energy_detect(np.full(500, 2.0 + 1j), 32, 3.0) == []
    with pytest.raises(InvalidInputError):
        energy_detect(np.array([]), 32)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), window=st.integers(1, 40))
def test_energy_detect_matches_brute_force(seed, window):
    r = np.random.default_rng(seed)
    x = 0.1 * _cnoise(r, 600)
    for _ in range(int(r.integers(0, 4))):
        s = int(r.integers(0, 550))
        x[s:s + int(r.integers(5, 120))] *= 30
    assert energy_detect(x, window, 3.0) == _brute_force_segments(x, window, 3.0)


# --- filtering, framing, normalization -------------------------------------

def test_lowpass_dc_gain():
    y = lowpass_filter(np.ones(400), 0.1, 63)
    np.testing.assert_allclose(y[40:-40], 1.0, atol=1e-3)


def test_lowpass_stopband_attenuation():
    n = np.arange(4000)
    x = np.exp(2j * np.pi * 0.45 * n)
    y = lowpass_filter(x, 0.1, 63)
    ratio = _power(y[100:-100]) / _power(x[100:-100])
    assert 10 * math.log10(ratio) < -30


def test_lowpass_near_allpass():
    x = np.zeros(129)
    x[64] = 1.0
    y = lowpass_filter(x, 0.499, 63)
    assert np.argmax(np.abs(y)) == 64
    assert abs(y[64] - 1.0) < 0.01
    assert np.max(np.abs(np.delete(y, 64))) < 0.01


def test_lowpass_rejects_even_taps():
    with pytest.raises(ConfigError):
        lowpass_filter(np.ones(10), 0.2, 64)


@pytest.mark.parametrize("length,L,hop,count", [(1024, 256, 256, 4), (1024, 256, 128, 7), (255, 256, 256, 0)])
def test_frame_counts(length, L, hop, count):
    assert len(frame_stream(np.arange(length), L, hop)) == count


def test_frame_hop_validation():
    with pytest.raises(ConfigError):
        frame_stream(np.arange(10), 4, 0)


@given(n_frames=st.integers(1, 6), L=st.integers(1, 20))
def test_framing_partitions_concatenation(n_frames, L):
    parts = np.arange(n_frames * L).reshape(n_frames, L)
    np.testing.assert_array_equal(frame_stream(parts.reshape(-1), L, L), parts)


def test_normalize_examples():
    x = np.full(16, 4.0 + 0j)
    np.testing.assert_allclose(normalize_rms(x), 1.0)
    u = normalize_rms(_cnoise(np.random.default_rng(0), 64))
    np.testing.assert_allclose(normalize_rms(u), u, atol=1e-12)
    with pytest.raises(InvalidInputError):
        normalize_rms(np.zeros(8))


@given(seed=st.integers(0, 10**6), scale=st.floats(1e-3, 1e3))
def test_normalize_unit_rms_and_direction(seed, scale):
    x = scale * _cnoise(np.random.default_rng(seed), 50)
    y = normalize_rms(x)
    assert abs(math.sqrt(_power(y)) - 1.0) < 1e-9
    np.testing.assert_allclose(y * math.sqrt(_power(x)), x, rtol=1e-12)


# --- STFT ------------------------------------------------------------------

def _naive_stft(x, N, hop, w):
    rows = (len(x) - N) // hop + 1
    k = np.arange(N)
    out = np.zeros((rows, N))
    for r in range(rows):
        seg = x[r * hop:r * hop + N] * w
        for f in range(N):
            out[r, f] = abs(sum(seg[n] * np.exp(-2j * np.pi * f * n / N) for n in k))
    return out


def test_stft_single_bin():
    N, k = 32, 5
    x = np.exp(2j * np.pi * k * np.arange(N) / N)
    m = stft(x, N, N, Window.RECT).magnitudes
    assert m.shape == (1, N)
    assert abs(m[0, k] - N) < 1e-9
    assert np.max(np.delete(m[0], k)) < 1e-9


def test_stft_zero_frame_and_shape():
    m = stft(np.zeros(256), 64, 32).magnitudes
    assert m.shape == ((256 - 64) // 32 + 1, 64)
    assert np.all(m == 0)


def test_stft_hop_zero():
    with pytest.raises(ConfigError):
        stft(np.zeros(64), 16, 0)


@pytest.mark.parametrize("window", list(Window))
def test_stft_matches_naive_dft(window):
    x = _cnoise(np.random.default_rng(1), 96)
    w = np.hanning(32) if window is Window.HANN else np.ones(32)
    got = stft(x, 32, 16, window).magnitudes
    assert np.max(np.abs(got - _naive_stft(x, 32, 16, w))) < 1e-9


@given(seed=st.integers(0, 10**6), L=st.integers(1, 128))
def test_parseval(seed, L):
    x = _cnoise(np.random.default_rng(seed), L)
    m = stft(x, L, L, Window.RECT).magnitudes
    assert abs(np.sum(np.abs(x) ** 2) - np.sum(m ** 2) / L) < 1e-9 * max(1.0, np.sum(np.abs(x) ** 2))


# --- interference ----------------------------------------------------------

NB = InterferenceKind.NARROWBAND
BB = InterferenceKind.BROADBAND


@pytest.mark.parametrize("kind", [NB, BB])
def test_disabled_interference_is_identity(kind):
    x = _cnoise(np.random.default_rng(2), 256)
    np.testing.assert_array_equal(inject(x, InterferenceConfig(kind, DISABLED), np.random.default_rng(0)), x)


@pytest.mark.parametrize("kind", [NB, BB])
def test_zero_db_power_ratio(kind):
    x = normalize_rms(_cnoise(np.random.default_rng(3), 256))
    y = inject(x, InterferenceConfig(kind, 0.0), np.random.default_rng(4))
    assert abs(_power(y - x) - 1.0) < 0.02


@settings(max_examples=40, deadline=None)
@given(kind=st.sampled_from([NB, BB]), isr=st.floats(-30, 30), seed=st.integers(0, 10**6),
       L=st.integers(256, 512))
def test_injected_isr_within_tolerance(kind, isr, seed, L):
    r = np.random.default_rng(seed)
    x = _cnoise(r, L) * r.uniform(0.1, 10)
    y = inject(x, InterferenceConfig(kind, isr), r)
    measured = 10 * math.log10(_power(y - x) / _power(x))
    assert abs(measured - isr) < 0.2


def test_narrowband_energy_confined_to_selected_bins():
    L = 256
    cfg = InterferenceConfig(NB, 5.0, n_bins=64, n_select=3)
    x = np.zeros(L, dtype=complex)
    x[0] = 1.0
    bins = selected_bins(cfg, rngmod.stream(9, "f"))
    d = np.fft.fft(inject_narrowband(x, cfg, rngmod.stream(9, "f")) - x)
    groups = np.array_split(np.arange(L), 64)
    inside = np.concatenate([groups[b] for b in bins])
    assert np.sum(np.abs(np.delete(d, inside)) ** 2) < 1e-20 * np.sum(np.abs(d) ** 2)


def test_narrowband_bins_redrawn_per_frame():
    cfg = InterferenceConfig(NB, 0.0)
    draws = [tuple(selected_bins(cfg, rngmod.stream(0, "interference", j))) for j in range(100)]
    repeats = sum(a == b for a, b in zip(draws, draws[1:]))
    # pairs of consecutive frames repeat their bin set with probability << (2/256)^2
    assert repeats == 0
    assert len(set(draws)) >= 98


def test_interference_deterministic_under_stream():
    x = _cnoise(np.random.default_rng(5), 256)
    for kind in (NB, BB):
        cfg = InterferenceConfig(kind, 3.0)
        a = inject(x, cfg, rngmod.stream(1, "i", 0))
        b = inject(x, cfg, rngmod.stream(1, "i", 0))
        np.testing.assert_array_equal(a, b)


def test_interference_config_errors():
    with pytest.raises(ConfigError):
        InterferenceConfig(NB, 0.0, n_bins=4, n_select=4)
    with pytest.raises(ConfigError):
        inject_narrowband(np.ones(16), InterferenceConfig(NB, 0.0, n_bins=32), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        inject_broadband(np.ones(16), InterferenceConfig(NB, 0.0), np.random.default_rng(0))


# --- resampling ------------------------------------------------------------

def test_resample_identity():
    x = _cnoise(np.random.default_rng(6), 256)
    assert np.max(np.abs(resample_cubic(x, 1.0) - x)) < 1e-9


@pytest.mark.parametrize("ratio", [0.6, 0.7, 0.8, 0.9, 1.3, 2.5])
def test_resample_reproduces_cubics_in_interior(ratio):
    L = 256
    t = np.arange(L) / L
    x = (2 * t ** 3 - t ** 2 + 0.5 * t - 0.2) + 1j * (-t ** 3 + 3 * t)
    y = resample_cubic(x, ratio)
    inner = slice(40, L - 40)
    assert np.max(np.abs(y[inner] - x[inner])) < 1e-9


def test_resample_slow_tone_accuracy():
    L = 256
    x = np.exp(2j * np.pi * 0.02 * np.arange(L))
    y = resample_cubic(x, 0.6)
    assert np.max(np.abs(y[20:-20] - x[20:-20])) < 1e-3


def test_resample_errors():
    with pytest.raises(InvalidInputError):
        resample_cubic(np.ones(3), 0.9)
    with pytest.raises(ConfigError):
        resample_cubic(np.ones(64), 0.05)
