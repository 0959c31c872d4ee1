"""Multi-receiver impaired IQ data generator.

A frame is produced by the chain

    bits -> modulate -> apply_emitter(fp_m) -> apply_channel -> apply_receiver(sig_k)

entirely at complex baseband. Emitter fingerprints and receiver signatures
are memoryless impairment sets (odd-order polynomial, IQ imbalance, CFO,
phase) and the receiver adds an FIR response, DC offset and thermal noise.

Frames are handled as 1-D complex arrays here; ``to_iq`` packs them into the
(2, L) real layout used everywhere downstream.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, InvalidInputError

NOISE_OFF = math.inf


class Modulation(str, enum.Enum):
    BFSK = "BFSK"
    QPSK = "QPSK"


@dataclass(frozen=True)
class EmitterFingerprint:
    a3: float = 0.0
    a5: float = 0.0
    iq_gain_mismatch: float = 0.0
    iq_phase_mismatch: float = 0.0
    cfo: float = 0.0
    phase0: float = 0.0

    def __post_init__(self):
        if abs(self.a3) > 0.5 or abs(self.a5) > 0.5:
            raise ConfigError("nonlinearity coefficients must satisfy |a3|, |a5| <= 0.5")
        if abs(self.iq_gain_mismatch) > 0.2:
            raise ConfigError("|iq_gain_mismatch| must be <= 0.2")


@dataclass(frozen=True)
class ReceiverSignature(EmitterFingerprint):
    dc_offset: complex = 0j
    fir_taps: tuple = (1.0,)
    noise_figure_db: float = 0.0

    def __post_init__(self):
        super().__post_init__()
        taps = np.asarray(self.fir_taps, dtype=float)
        if taps.size == 0 or not np.all(np.isfinite(taps)):
            raise ConfigError("fir_taps must be a nonempty finite sequence")
        if abs(float(np.sum(taps ** 2)) - 1.0) > 1e-9:
            raise ConfigError("fir_taps must have unit energy")
        if self.noise_figure_db < 0:
            raise ConfigError("noise_figure_db must be >= 0")

    @classmethod
    def identity(cls):
        return cls()


@dataclass(frozen=True)
class ChannelModel:
    taps: tuple = (1.0,)

    def __post_init__(self):
        t = np.asarray(self.taps, dtype=complex)
        if t.size == 0 or not np.all(np.isfinite(t)):
            raise ConfigError("channel needs at least one finite tap")


@dataclass
class EmitterRanges:
    """Uniform sampling interval (lo, hi) for every fingerprint field."""

    a3: tuple = (-0.1, 0.1)
    a5: tuple = (-0.05, 0.05)
    iq_gain_mismatch: tuple = (-0.1, 0.1)
    iq_phase_mismatch: tuple = (-0.1, 0.1)
    cfo: tuple = (-0.005, 0.005)
    phase0: tuple = (-math.pi, math.pi)


@dataclass
class ReceiverRanges(EmitterRanges):
    dc_magnitude: tuple = (0.0, 0.1)
    fir_spread: tuple = (0.0, 0.3)
    noise_figure_db: tuple = (0.0, 3.0)


@dataclass
class SynthConfig:
    M: int = 4
    K: int = 3
    frames_per_pair: int = 100
    L: int = 256
    snr_db: float = 20.0
    modulation: Modulation = Modulation.BFSK
    seed: int = 0
    samples_per_symbol: int = 8
    freq_deviation: float = 1.0 / 32.0
    fir_length: int = 5
    emitter_ranges: EmitterRanges = field(default_factory=EmitterRanges)
    receiver_ranges: ReceiverRanges = field(default_factory=ReceiverRanges)
    emitter_gap: float = 0.1
    receiver_gap: float = 0.1
    channel: ChannelModel = field(default_factory=ChannelModel)
    reference_power: float = 1.0

    def __post_init__(self):
        self.modulation = Modulation(self.modulation)

    def validate(self):
        if self.M < 2 or self.K < 2:
            raise ConfigError("need M >= 2 emitters and K >= 2 receivers")
        if self.L < 32:
            raise ConfigError("frame length L must be >= 32")
        if self.frames_per_pair < 1:
            raise ConfigError("frames_per_pair must be >= 1")
        if self.samples_per_symbol < 1:
            raise ConfigError("samples_per_symbol must be >= 1")
        for rngs in (self.emitter_ranges, self.receiver_ranges):
            for f in fields(rngs):
                lo, hi = getattr(rngs, f.name)
                if lo > hi:
                    raise ConfigError(f"range {f.name} has lo > hi")
        return self


@dataclass
class SampleSet:
    """A batch of labeled frames.

    ``frames`` is (n, 2, L) float64 with I in row 0 and Q in row 1; labels
    are 1-based. ``index`` is a per-sample provenance tag (the frame index
    within its (emitter, receiver) pair).
    """

    frames: np.ndarray
    emitter: np.ndarray
    receiver: np.ndarray
    index: np.ndarray = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.emitter = np.asarray(self.emitter, dtype=np.int64)
        self.receiver = np.asarray(self.receiver, dtype=np.int64)
        if self.index is None:
            self.index = np.arange(len(self.emitter), dtype=np.int64)
        self.index = np.asarray(self.index, dtype=np.int64)
        n = len(self.emitter)
        if not (len(self.frames) == len(self.receiver) == len(self.index) == n):
            raise InvalidInputError("SampleSet fields must have equal lengths")

    def __len__(self):
        return len(self.emitter)

    def subset(self, mask_or_idx):
        return SampleSet(self.frames[mask_or_idx], self.emitter[mask_or_idx],
                         self.receiver[mask_or_idx], self.index[mask_or_idx])

    @staticmethod
    def concat(sets):
        sets = [s for s in sets if len(s)]
        if not sets:
            raise InvalidInputError("nothing to concatenate")
        return SampleSet(np.concatenate([s.frames for s in sets]),
                         np.concatenate([s.emitter for s in sets]),
                         np.concatenate([s.receiver for s in sets]),
                         np.concatenate([s.index for s in sets]))


def to_iq(x):
    """Complex (..., L) -> real (..., 2, L)."""
    x = np.asarray(x)
    return np.stack([x.real, x.imag], axis=-2).astype(np.float64)


def from_iq(frame):
    frame = np.asarray(frame, dtype=np.float64)
    return frame[..., 0, :] + 1j * frame[..., 1, :]


# ---------------------------------------------------------------------------
# latent factor sampling
# ---------------------------------------------------------------------------

_FP_FIELDS = ("a3", "a5", "iq_gain_mismatch", "iq_phase_mismatch", "cfo", "phase0")


def _normalized_distance(a, b, widths):
    # Chebyshev distance in range-normalized coordinates; zero-width fields carry no separation
    d = 0.0
    for x, y, w in zip(a, b, widths):
        if w > 0:
            d = max(d, abs(x - y) / w)
    return d


def _draw_separated(count, draw, widths, gap, what):
    chosen = []
    for _ in range(count):
        for _attempt in range(1000):
            cand = draw()
            if all(_normalized_distance(cand[0], c[0], widths) >= gap for c in chosen):
                chosen.append(cand)
                break
        else:
            raise ConfigError(f"could not draw {count} {what} separated by gap {gap} in 1000 attempts")
    return chosen


def sample_fingerprints(cfg: SynthConfig, rng: np.random.Generator | None = None) -> list[EmitterFingerprint]:
    """Draw M emitter fingerprints, pairwise separated by ``cfg.emitter_gap``."""
    cfg.validate()
    rng = rng if rng is not None else rngmod.stream(cfg.seed, "fingerprints")
    r = cfg.emitter_ranges
    bounds = [getattr(r, f) for f in _FP_FIELDS]
    widths = [hi - lo for lo, hi in bounds]

    def draw():
        vals = [rng.uniform(lo, hi) for lo, hi in bounds]
        return vals, None

    picks = _draw_separated(cfg.M, draw, widths, cfg.emitter_gap, "emitter fingerprints")
    return [EmitterFingerprint(*vals) for vals, _ in picks]


def _unit_energy(taps):
    taps = np.asarray(taps, dtype=float)
    return taps / math.sqrt(float(np.sum(taps ** 2)))


def sample_signatures(cfg: SynthConfig, rng: np.random.Generator | None = None) -> list[ReceiverSignature]:
    """Draw K receiver signatures, pairwise separated by ``cfg.receiver_gap``.

    The separation check covers the fingerprint-like fields plus DC magnitude
    and FIR spread.
    """
    cfg.validate()
    rng = rng if rng is not None else rngmod.stream(cfg.seed, "signatures")
    r = cfg.receiver_ranges
    bounds = [getattr(r, f) for f in _FP_FIELDS] + [r.dc_magnitude, r.fir_spread, r.noise_figure_db]
    widths = [hi - lo for lo, hi in bounds]
    n_taps = cfg.fir_length

    def draw():
        vals = [rng.uniform(lo, hi) for lo, hi in bounds]
        dc_angle = rng.uniform(-math.pi, math.pi)
        shape = rng.uniform(-1.0, 1.0, n_taps)
        return vals, (dc_angle, shape)

    picks = _draw_separated(cfg.K, draw, widths, cfg.receiver_gap, "receiver signatures")
    sigs = []
    for vals, (dc_angle, shape) in picks:
        fp = vals[:6]
        dc_mag, spread, nf = vals[6:]
        taps = np.zeros(n_taps)
        taps[n_taps // 2] = 1.0
        taps = _unit_energy(taps + spread * shape)
        sigs.append(ReceiverSignature(*fp, dc_offset=complex(dc_mag * np.exp(1j * dc_angle)),
                                      fir_taps=tuple(float(t) for t in taps), noise_figure_db=nf))
    return sigs


# ---------------------------------------------------------------------------
# signal chain
# ---------------------------------------------------------------------------

def bits_needed(scheme, L, samples_per_symbol=8):
    n_sym = -(-L // samples_per_symbol)
    return n_sym * (2 if Modulation(scheme) is Modulation.QPSK else 1)


def modulate(bits, scheme, L, samples_per_symbol=8, freq_deviation=1.0 / 32.0):
    """Map bits to a unit-RMS complex baseband frame of length L.

    BFSK is continuous-phase with tones at -freq_deviation (bit 0) and
    +freq_deviation (bit 1). QPSK uses the Gray map
    (b0, b1) -> ((1 - 2 b0) + j (1 - 2 b1)) / sqrt(2) with rectangular pulses.
    """
    scheme = Modulation(scheme)
    bits = np.asarray(bits, dtype=np.int64)
    need = bits_needed(scheme, L, samples_per_symbol)
    if bits.size < need:
        raise InvalidInputError(f"{scheme.value} frame of {L} samples needs {need} bits, got {bits.size}")
    if scheme is Modulation.BFSK:
        freqs = np.where(bits[:need] > 0, freq_deviation, -freq_deviation)
        inst = np.repeat(freqs, samples_per_symbol)[:L]
        phase = 2 * np.pi * (np.cumsum(inst) - inst)
        s = np.exp(1j * phase)
    else:
        b = bits[:need].reshape(-1, 2)
        sym = ((1 - 2 * b[:, 0]) + 1j * (1 - 2 * b[:, 1])) / math.sqrt(2)
        s = np.repeat(sym, samples_per_symbol)[:L]
    return s / np.sqrt(np.mean(np.abs(s) ** 2))


def iq_imbalance(s, gain_mismatch, phase_mismatch):
    g = 1.0 + gain_mismatch
    return g * s.real + 1j * (s.imag * math.cos(phase_mismatch) + s.real * math.sin(phase_mismatch))


def _memoryless(fp, s):
    v = iq_imbalance(s, fp.iq_gain_mismatch, fp.iq_phase_mismatch)
    p = np.abs(v) ** 2
    w = v + fp.a3 * v * p + fp.a5 * v * p * p
    n = np.arange(len(s))
    return w * np.exp(1j * (2 * np.pi * fp.cfo * n + fp.phase0))


def apply_emitter(fp: EmitterFingerprint, s):
    """Emitter hardware: IQ imbalance, odd-order nonlinearity, CFO and phase."""
    return _memoryless(fp, np.asarray(s, dtype=complex))


def apply_channel(ch: ChannelModel, u):
    """Linear convolution truncated to the input length (zero-padded head)."""
    u = np.asarray(u, dtype=complex)
    return np.convolve(u, np.asarray(ch.taps, dtype=complex))[: len(u)]


def apply_receiver(sig: ReceiverSignature, u, snr_db=NOISE_OFF, rng=None, reference_power=1.0):
    """Receiver hardware followed by thermal noise.

    Noise power is ``reference_power * 10**((noise_figure_db - snr_db) / 10)``;
    ``snr_db = inf`` disables noise.
    """
    u = np.asarray(u, dtype=complex)
    y = np.convolve(u, np.asarray(sig.fir_taps, dtype=float))[: len(u)]
    y = _memoryless(sig, y) + sig.dc_offset
    if math.isfinite(snr_db):
        if rng is None:
            raise InvalidInputError("noise enabled but no random stream given")
        power = reference_power * 10.0 ** ((sig.noise_figure_db - snr_db) / 10.0)
        noise = rng.standard_normal(len(y)) + 1j * rng.standard_normal(len(y))
        y = y + noise * math.sqrt(power / 2.0)
    return y


def generate_frame(cfg, fp, sig, m, k, i):
    """One received frame for (emitter m, receiver k, index i), all 1-based labels."""
    r = rngmod.stream(cfg.seed, "frame", m, k, i)
    bits = r.integers(0, 2, bits_needed(cfg.modulation, cfg.L, cfg.samples_per_symbol))
    s = modulate(bits, cfg.modulation, cfg.L, cfg.samples_per_symbol, cfg.freq_deviation)
    u = apply_channel(cfg.channel, apply_emitter(fp, s))
    return apply_receiver(sig, u, cfg.snr_db, r, cfg.reference_power)


def synthesize_dataset(cfg: SynthConfig, fingerprints=None, signatures=None) -> dict[int, SampleSet]:
    """Generate ``frames_per_pair`` frames for every (emitter, receiver) pair.

    Returns a map from 1-based receiver index to its SampleSet, ordered by
    emitter then frame index. Output is a pure function of ``cfg``.
    """
    cfg.validate()
    fps = fingerprints if fingerprints is not None else sample_fingerprints(cfg)
    sigs = signatures if signatures is not None else sample_signatures(cfg)
    out = {}
    for k, sig in enumerate(sigs, start=1):
        frames, em, idx = [], [], []
        for m, fp in enumerate(fps, start=1):
            for i in range(cfg.frames_per_pair):
                frames.append(generate_frame(cfg, fp, sig, m, k, i))
                em.append(m)
                idx.append(i)
        out[k] = SampleSet(to_iq(np.array(frames)), em, np.full(len(em), k), idx)
    return out
