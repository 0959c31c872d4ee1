"""Preprocessing chain (energy detection, filtering, framing, normalization),
STFT, interference injection and cubic-spline rate simulation.

Streams and frames are 1-D complex arrays unless stated otherwise.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import ConfigError, InvalidInputError

DISABLED = -math.inf


class Window(str, enum.Enum):
    HANN = "Hann"
    RECT = "Rect"


class InterferenceKind(str, enum.Enum):
    NARROWBAND = "NarrowbandHopping"
    BROADBAND = "BroadbandGaussian"


@dataclass(frozen=True)
class InterferenceConfig:
    kind: InterferenceKind = InterferenceKind.NARROWBAND
    isr_db: float = DISABLED
    n_bins: int = 256
    n_select: int = 2

    def __post_init__(self):
        object.__setattr__(self, "kind", InterferenceKind(self.kind))
        if self.n_select >= self.n_bins:
            raise ConfigError("n_select must be smaller than n_bins")
        if self.n_select < 1:
            raise ConfigError("n_select must be >= 1")


@dataclass
class Spectrogram:
    magnitudes: np.ndarray  # (time, freq)
    window_len: int
    hop: int


def _sliding_power(x, window):
    p = np.abs(x) ** 2
    c = np.concatenate([[0.0], np.cumsum(p)])
    return (c[window:] - c[:-window]) / window


def energy_detect(stream, window=32, threshold_factor=3.0):
    """Find bursts whose sliding-window mean power exceeds ``threshold_factor``
    times the median window power.

    Window ``w`` starting at ``i`` covers samples ``[i, i + window)``; a
    segment is the union of the spans of a maximal run of hot windows, so it
    extends up to ``window - 1`` samples past the burst on either side.
    The comparison is strict, so an all-zero stream yields no segments.
    """
    x = np.asarray(stream)
    if x.size == 0:
        raise InvalidInputError("empty stream")
    if window < 1 or window > x.size:
        raise InvalidInputError(f"window {window} incompatible with stream length {x.size}")
    pw = _sliding_power(x, window)
    hot = pw > threshold_factor * float(np.median(pw))
    if not hot.any():
        return []
    edges = np.diff(np.concatenate([[0], hot.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return [(int(s), int(e - 1 + window)) for s, e in zip(starts, ends)]


def lowpass_taps(cutoff, taps):
    if taps % 2 == 0 or taps < 1:
        raise ConfigError("lowpass filter needs an odd tap count")
    if not 0 < cutoff < 0.5:
        raise ConfigError("cutoff must lie in (0, 0.5) cycles/sample")
    n = np.arange(taps) - (taps - 1) / 2
    h = 2 * cutoff * np.sinc(2 * cutoff * n) * np.hamming(taps)
    return h / h.sum()


def lowpass_filter(stream, cutoff=0.25, taps=63):
    """Hamming-windowed sinc FIR with unit DC gain; output is delay-aligned."""
    h = lowpass_taps(cutoff, taps)
    x = np.asarray(stream)
    full = np.convolve(x, h)
    d = (taps - 1) // 2
    return full[d:d + x.size]


def frame_stream(stream, L=256, hop=256):
    """Cut a stream into length-L frames at offsets 0, hop, 2*hop, ...

    Returns an (n_frames, L) array; a trailing partial frame is dropped.
    """
    if hop < 1:
        raise ConfigError("hop must be >= 1")
    x = np.asarray(stream)
    if L > x.size:
        return np.empty((0, L), dtype=x.dtype)
    starts = range(0, x.size - L + 1, hop)
    return np.stack([x[s:s + L] for s in starts])


def normalize_rms(frame):
    x = np.asarray(frame)
    rms = math.sqrt(float(np.mean(np.abs(x) ** 2)))
    if rms == 0.0:
        raise InvalidInputError("cannot normalize an all-zero frame")
    return x / rms


def stft(frame, window_len=64, hop=32, window=Window.HANN):
    """Magnitude STFT; rows are time steps, columns are DFT bins 0..N-1."""
    if hop < 1:
        raise ConfigError("STFT hop must be >= 1")
    x = np.asarray(frame)
    if window_len < 1 or window_len > x.size:
        raise ConfigError(f"window_len {window_len} incompatible with frame length {x.size}")
    w = np.hanning(window_len) if Window(window) is Window.HANN else np.ones(window_len)
    n_rows = (x.size - window_len) // hop + 1
    seg = np.stack([x[i * hop:i * hop + window_len] for i in range(n_rows)]) * w
    return Spectrogram(np.abs(np.fft.fft(seg, axis=1)), window_len, hop)


def _scale_to_isr(signal, interference, isr_db):
    ps = float(np.mean(np.abs(signal) ** 2))
    pi = float(np.mean(np.abs(interference) ** 2))
    if pi == 0.0:
        return np.zeros_like(interference)
    return interference * math.sqrt(ps * 10.0 ** (isr_db / 10.0) / pi)


def inject_narrowband(frame, cfg: InterferenceConfig, rng: np.random.Generator):
    """Add Gaussian interference confined to ``n_select`` of ``n_bins`` frequency bins.

    The L-point spectrum is split into ``n_bins`` contiguous groups of DFT
    coefficients. Interference power is scaled so the frame's ISR is exact.
    """
    if cfg.kind is not InterferenceKind.NARROWBAND:
        raise ConfigError("inject_narrowband needs a NarrowbandHopping config")
    x = np.asarray(frame, dtype=complex)
    if cfg.n_bins > x.size:
        raise ConfigError("n_bins cannot exceed the frame length")
    if cfg.isr_db == DISABLED:
        return x.copy()
    groups = np.array_split(np.arange(x.size), cfg.n_bins)
    chosen = rng.choice(cfg.n_bins, cfg.n_select, replace=False)
    spec = np.zeros(x.size, dtype=complex)
    for b in sorted(chosen):
        idx = groups[b]
        spec[idx] = rng.standard_normal(idx.size) + 1j * rng.standard_normal(idx.size)
    interference = np.fft.ifft(spec)
    return x + _scale_to_isr(x, interference, cfg.isr_db)


def selected_bins(cfg: InterferenceConfig, rng: np.random.Generator):
    """The bin indices ``inject_narrowband`` would pick from this stream state."""
    return np.sort(rng.choice(cfg.n_bins, cfg.n_select, replace=False))


def inject_broadband(frame, cfg: InterferenceConfig, rng: np.random.Generator):
    """Add white complex Gaussian noise, scaled so the frame's ISR is exact."""
    if cfg.kind is not InterferenceKind.BROADBAND:
        raise ConfigError("inject_broadband needs a BroadbandGaussian config")
    x = np.asarray(frame, dtype=complex)
    if cfg.isr_db == DISABLED:
        return x.copy()
    noise = rng.standard_normal(x.size) + 1j * rng.standard_normal(x.size)
    return x + _scale_to_isr(x, noise, cfg.isr_db)


def inject(frame, cfg: InterferenceConfig, rng):
    if cfg.kind is InterferenceKind.NARROWBAND:
        return inject_narrowband(frame, cfg, rng)
    return inject_broadband(frame, cfg, rng)


def resample_cubic(frame, ratio):
    """Simulate a receiver sampling at ``ratio`` times the nominal rate.

    The nominal-rate frame is read at the slower (or faster) instants
    ``t_i = i / ratio`` covering the same time span, then a natural cubic
    spline through those samples restores L points on the nominal grid.
    I and Q are interpolated independently. ``ratio = 1`` is the identity.
    """
    if not 0.1 <= ratio <= 10:
        raise ConfigError("ratio must lie in [0.1, 10]")
    x = np.asarray(frame, dtype=complex)
    L = x.size
    if L < 4:
        raise InvalidInputError("spline resampling needs at least 4 samples")
    if ratio == 1.0:
        return x.copy()
    n = np.arange(L, dtype=float)
    t = np.arange(int(math.floor((L - 1) * ratio + 1e-9)) + 1) / ratio
    if t.size < 4:
        raise InvalidInputError("too few low-rate samples for a cubic spline")
    hi = CubicSpline(n, np.stack([x.real, x.imag], axis=1), bc_type="natural")
    lo = hi(t)
    back = CubicSpline(t, lo, bc_type="natural")(n)
    return back[:, 0] + 1j * back[:, 1]
