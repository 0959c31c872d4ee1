"""Leave-one-receiver-out experiments, ablations and sweeps.

A run synthesizes (or loads) frames for every receiver, trains on all
receivers except ``held_out_receiver`` and scores ``predict`` on that
receiver's test frames after every epoch (centralized) or round
(federated). Frames with ``index < n_train`` are training frames; the rest
are test frames.

Every random draw is keyed on ``cfg.seed`` (training side) or
``cfg.synth.seed`` (data side); :meth:`ExperimentConfig.with_seed` sets
both. The ``seed`` fields inside ``train`` and ``fed`` are overridden.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import rng as rngmod
from ..dsp import InterferenceConfig, InterferenceKind, Window, inject, normalize_rms, resample_cubic, stft
from ..errors import ConfigError, InvalidInputError, RffError
from ..fed import ClientState, Compressor, FedConfig, fed_fit, write_round_log
from ..riei import Arch, RieiModel, TrainConfig, accuracy, extract_features, fit, save_checkpoint
from ..synth import ReceiverRanges, SampleSet, SynthConfig, from_iq, synthesize_dataset, to_iq
from . import diagnostics as diag
from .config import to_dict
from .io import load_dataset, write_history_csv, write_json, write_table_csv


class Scenario(str, enum.Enum):
    CENTRALIZED = "Centralized"
    FEDERATED = "Federated"


class Ablation(str, enum.Enum):
    FULL = "Full"
    BASELINE = "BaselineCE"
    IE_ONLY = "IEOnly"
    MI_ONLY = "MIOnly"


class InputKind(str, enum.Enum):
    IQ = "iq"
    STFT = "stft"


class SweepKind(str, enum.Enum):
    ISR = "ISR"
    SAMPLING_RATE = "SamplingRate"
    COMPRESSION = "Compression"


def calibrated_receiver_ranges():
    """Receiver impairments at 0.35 times the emitter ranges, plus DC and FIR.

    Chosen by ``scripts/calibrate.py`` so the CE baseline lands inside the
    0.55-0.80 held-out accuracy window on the default scenario.
    """
    s = 0.35
    return ReceiverRanges(a3=(-0.1 * s, 0.1 * s), a5=(-0.05 * s, 0.05 * s),
                          iq_gain_mismatch=(-0.1 * s, 0.1 * s), iq_phase_mismatch=(-0.1 * s, 0.1 * s),
                          cfo=(-0.005 * s, 0.005 * s), phase0=(-math.pi * s, math.pi * s),
                          dc_magnitude=(0.0, 0.1), fir_spread=(0.0, 0.3), noise_figure_db=(0.0, 3.0))


def calibrated_synth():
    return SynthConfig(M=4, K=3, frames_per_pair=500, L=256, snr_db=15.0,
                       receiver_ranges=calibrated_receiver_ranges())


def calibrated_train():
    return TrainConfig(eta_F=0.05, eta_E=0.05, eta_R=0.05, batch=64, epochs=20)


@dataclass
class PreprocConfig:
    normalize: bool = True
    input: InputKind = InputKind.IQ
    stft_window: int = 64
    stft_hop: int = 32

    def __post_init__(self):
        self.input = InputKind(self.input)


@dataclass
class ExperimentConfig:
    """Everything a run needs. Defaults describe the calibrated scenario."""

    scenario: Scenario = Scenario.CENTRALIZED
    synth: SynthConfig = field(default_factory=calibrated_synth)
    preproc: PreprocConfig = field(default_factory=PreprocConfig)
    arch: Arch = field(default_factory=Arch)
    train: TrainConfig = field(default_factory=calibrated_train)
    fed: FedConfig = field(default_factory=FedConfig)
    held_out_receiver: int | None = None
    ablation: Ablation = Ablation.FULL
    interference: InterferenceConfig | None = None
    resample_ratios: dict[int, float] | None = None
    n_train: int = 400
    seed: int = 0
    diagnostics: bool = True
    dataset: str | None = None
    out: str | None = None

    def __post_init__(self):
        self.scenario = Scenario(self.scenario)
        self.ablation = Ablation(self.ablation)

    @property
    def held_out(self):
        return self.synth.K if self.held_out_receiver is None else self.held_out_receiver

    def with_seed(self, seed):
        return replace(self, seed=int(seed), synth=replace(self.synth, seed=int(seed)))

    def validate(self):
        self.synth.validate()
        self.train.validate()
        self.fed.validate()
        if not 1 <= self.held_out <= self.synth.K:
            raise ConfigError(f"held_out_receiver {self.held_out} outside 1..{self.synth.K}")
        if self.synth.K < 3:
            raise ConfigError("leave-one-receiver-out needs K >= 3 (two training receivers)")
        if not 0 < self.n_train < self.synth.frames_per_pair:
            raise ConfigError("n_train must leave test frames: 0 < n_train < frames_per_pair")
        for k, r in (self.resample_ratios or {}).items():
            if not 1 <= int(k) <= self.synth.K:
                raise ConfigError(f"resample ratio given for unknown receiver {k}")
            if not 0.1 <= float(r) <= 10:
                raise ConfigError(f"resample ratio {r} for receiver {k} outside [0.1, 10]")
        if self.preproc.input is InputKind.STFT and self.preproc.stft_window > self.synth.L:
            raise ConfigError("STFT window longer than the frame")
        return self

    def lambdas(self):
        l1, l2 = self.train.lambda1, self.train.lambda2
        return {Ablation.FULL: (l1, l2), Ablation.BASELINE: (0.0, 0.0),
                Ablation.IE_ONLY: (0.0, l2), Ablation.MI_ONLY: (l1, 0.0)}[self.ablation]

    def fingerprint(self):
        """Stable hash of the full configuration (output location excluded)."""
        d = to_dict(replace(self, out=None))
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class MetricsReport:
    history: list
    last5_mean: float
    last5_std: float
    diagnostics: dict
    config_fingerprint: str
    seed: int
    label: str = ""
    model: RieiModel | None = field(default=None, repr=False, compare=False)
    snapshots: list = field(default_factory=list, repr=False, compare=False)
    round_logs: list = field(default_factory=list, repr=False, compare=False)

    def to_dict(self):
        return {"label": self.label, "seed": self.seed, "config_fingerprint": self.config_fingerprint,
                "last5_mean": self.last5_mean, "last5_std": self.last5_std,
                "diagnostics": self.diagnostics, "history": self.history}


def last5_metric(history):
    """Mean and population std of the final five accuracies.

    ``history`` holds floats or records with a ``test_acc`` entry.
    """
    vals = [h["test_acc"] if isinstance(h, dict) else h for h in history]
    if len(vals) < 5:
        raise InvalidInputError(f"need at least 5 history entries, got {len(vals)}")
    tail = np.asarray(vals[-5:], dtype=np.float64)
    return float(tail.mean()), float(tail.std())


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def load_frames(cfg: ExperimentConfig) -> dict[int, SampleSet]:
    if cfg.dataset:
        data = load_dataset(cfg.dataset)
        missing = set(range(1, cfg.synth.K + 1)) - set(data)
        if missing:
            raise ConfigError(f"dataset lacks receivers {sorted(missing)}")
        return data
    return synthesize_dataset(cfg.synth)


def split_frames(cfg, data):
    held = cfg.held_out
    train = {k: s.subset(s.index < cfg.n_train) for k, s in data.items() if k != held}
    test = data[held].subset(data[held].index >= cfg.n_train)
    if len(test) == 0:
        raise ConfigError("held-out receiver has no test frames")
    return train, test


def check_hygiene(train, held):
    """No training sample may carry the held-out receiver's tag."""
    for k, s in train.items():
        if np.any(s.receiver == held):
            raise ConfigError(f"held-out receiver {held} leaked into training set {k}")


def resample_set(s: SampleSet, ratio):
    if ratio == 1.0:
        return s
    frames = to_iq(np.stack([resample_cubic(x, ratio) for x in from_iq(s.frames)]))
    return SampleSet(frames, s.emitter, s.receiver, s.index)


def interfere_set(s: SampleSet, icfg: InterferenceConfig | None, seed):
    if icfg is None or icfg.isr_db == -math.inf:
        return s
    cx = from_iq(s.frames)
    out = np.stack([inject(x, icfg, rngmod.stream(seed, "interference", icfg.kind.value, j))
                    for j, x in enumerate(cx)])
    return SampleSet(to_iq(out), s.emitter, s.receiver, s.index)


def model_inputs(s: SampleSet, pre: PreprocConfig) -> SampleSet:
    """Per-frame RMS normalization, then the configured input representation."""
    cx = from_iq(s.frames)
    if pre.normalize:
        cx = np.stack([normalize_rms(x) for x in cx])
    if pre.input is InputKind.IQ:
        frames = to_iq(cx)
    else:
        frames = np.stack([stft(x, pre.stft_window, pre.stft_hop, Window.HANN).magnitudes.T for x in cx])
    return SampleSet(frames, s.emitter, s.receiver, s.index)


def prepare(cfg: ExperimentConfig, data=None, interference=None, test_ratio=None):
    """Raw frames -> (train inputs by receiver, held-out test inputs)."""
    data = load_frames(cfg) if data is None else data
    train, test = split_frames(cfg, data)
    check_hygiene(train, cfg.held_out)
    ratios = {int(k): float(v) for k, v in (cfg.resample_ratios or {}).items()}
    train = {k: resample_set(s, ratios.get(k, 1.0)) for k, s in train.items()}
    r_test = ratios.get(cfg.held_out, 1.0) if test_ratio is None else test_ratio
    test = resample_set(test, r_test)
    test = interfere_set(test, cfg.interference if interference is None else interference, cfg.seed)
    return ({k: model_inputs(s, cfg.preproc) for k, s in train.items()}, model_inputs(test, cfg.preproc))


def arch_for(cfg: ExperimentConfig, sample_shape):
    c, length = sample_shape
    a = replace(cfg.arch, n_emitters=cfg.synth.M, n_receivers=cfg.synth.K, in_channels=c,
                input_length=length, baseline=cfg.ablation is Ablation.BASELINE)
    n = length
    for out_ch, k, s in a.conv:
        n = (n - k) // s + 1
        if n < 1:
            raise ConfigError(f"conv stack does not fit an input of length {length}")
    return a


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------

def _train_cfg(cfg):
    l1, l2 = cfg.lambdas()
    return replace(cfg.train, lambda1=l1, lambda2=l2, seed=cfg.seed)


def _diagnostics(cfg, model, test, val):
    f_test = extract_features(model, test.frames)
    r = rngmod.stream(cfg.seed, "diagnostics")
    if model.rc is None:
        Z = np.concatenate([f_test.z_emitter, f_test.z_receiver], axis=1)
        a, b = diag.random_split(Z, model.arch.f_e, r)
        pair = type(f_test)(a, b)
        fv = extract_features(model, val.frames)
        ec_val = np.concatenate([fv.z_emitter, fv.z_receiver], axis=1)
        ec_test = Z
    else:
        pair = f_test
        ec_val = extract_features(model, val.frames).z_emitter
        ec_test = f_test.z_emitter
    return {"independence_score": diag.independence_score(pair),
            "cross_covariance_norm": diag.cross_covariance_norm(pair),
            "proxy_divergence": diag.proxy_divergence(ec_val, ec_test, r)}


def _validation_inputs(cfg, data):
    """Test-index frames of the training receivers, used as the in-domain reference."""
    val = [s.subset(s.index >= cfg.n_train) for k, s in data.items() if k != cfg.held_out]
    ratios = {int(k): float(v) for k, v in (cfg.resample_ratios or {}).items()}
    val = [resample_set(s, ratios.get(int(s.receiver[0]), 1.0)) for s in val if len(s)]
    return model_inputs(SampleSet.concat(val), cfg.preproc)


def run_experiment(cfg: ExperimentConfig, data=None, threads=1, write=True) -> MetricsReport:
    """Train per scenario/ablation and score the held-out receiver each epoch/round.

    Keeps the last five epoch/round snapshots on the report so test-time
    sweeps can re-evaluate without retraining.
    """
    cfg.validate()
    try:
        data = load_frames(cfg) if data is None else data
        train, test = prepare(cfg, data)
    except RffError as exc:
        raise _tagged(exc, "data")
    arch = arch_for(cfg, test.frames.shape[1:])
    model = RieiModel.build(arch, rngmod.stream(cfg.seed, "init"))
    tcfg = _train_cfg(cfg)
    snaps = deque(maxlen=5)
    evaluate = lambda m: accuracy(m, test)  # noqa: E731
    logs = []
    try:
        if cfg.scenario is Scenario.CENTRALIZED:
            _, history = fit(model, train, tcfg, rngmod.stream(cfg.seed, "shuffle"), evaluate=evaluate,
                             on_epoch=lambda e, m, rec: snaps.append((e, m.state())))
        else:
            if model.rc is None:
                raise ConfigError("federated runs train the RIEI model; BaselineCE is centralized only")
            clients = [ClientState(k, s) for k, s in sorted(train.items())]
            fcfg = replace(cfg.fed, seed=cfg.seed)
            _, logs = fed_fit(clients, model, tcfg, fcfg, evaluate=evaluate, threads=threads,
                              on_round=lambda t, m, log: snaps.append((t, m.state())))
            history = [_round_record(log) for log in logs]
    except RffError as exc:
        raise _tagged(exc, "train")
    mean, std = last5_metric(history) if len(history) >= 5 else (math.nan, math.nan)
    d = _diagnostics(cfg, model, test, _validation_inputs(cfg, data)) if cfg.diagnostics else {}
    report = MetricsReport(history, mean, std, d, cfg.fingerprint(), cfg.seed, label=cfg.ablation.value,
                           model=model, snapshots=list(snaps), round_logs=logs)
    if write and cfg.out:
        write_artifacts(report, cfg.out)
    return report


def _tagged(exc, stage):
    exc.args = (f"[{stage}] {exc}",)
    return exc


def _round_record(log):
    rec = {"round": log.round}
    for k in sorted(log.client_losses):
        for name, v in log.client_losses[k].items():
            rec[f"client{k}_{name}"] = v
    rec["cumulative_bits"] = log.cumulative_bits
    rec["test_acc"] = log.eval_accuracy
    return rec


def write_artifacts(report: MetricsReport, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_history_csv(out / "metrics.csv", report.history)
    write_json(out / "summary.json", report.to_dict())
    if report.model is not None:
        save_checkpoint(report.model, out / "model.riei")
    if report.round_logs:
        write_round_log(out / "rounds.csv", report.round_logs)


def evaluate_snapshots(report: MetricsReport, test: SampleSet):
    """Accuracy of each stored snapshot on ``test``, oldest first."""
    model = report.model.copy()
    accs = []
    for _, state in report.snapshots:
        model.load_state(state)
        accs.append(accuracy(model, test))
    return accs


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepRow:
    kind: str
    point: str
    last5_mean: float
    last5_std: float
    status: str = "ok"
    report: MetricsReport | None = field(default=None, repr=False)

    def as_row(self):
        return {"kind": self.kind, "point": self.point, "last5_mean": self.last5_mean,
                "last5_std": self.last5_std, "status": self.status}


def _isr_point(p, default_kind):
    if isinstance(p, dict):
        return InterferenceConfig(InterferenceKind(p.get("kind", default_kind)), float(p["isr_db"]))
    if isinstance(p, (tuple, list)):
        return InterferenceConfig(InterferenceKind(p[0]), float(p[1]))
    return InterferenceConfig(default_kind, float(p))


def _point_label(p):
    if isinstance(p, InterferenceConfig):
        return f"{p.kind.value}:{p.isr_db!r}"
    if isinstance(p, dict):
        return ";".join(f"{k}={v}" for k, v in sorted(p.items(), key=lambda kv: str(kv[0])))
    return str(p)


def _test_time_row(kind, label, base_report, test, seed):
    accs = evaluate_snapshots(base_report, test)
    mean, std = last5_metric(accs)
    hist = [{"snapshot": e, "test_acc": a} for (e, _), a in zip(base_report.snapshots, accs)]
    rep = MetricsReport(hist, mean, std, {}, base_report.config_fingerprint, seed, label=label)
    return SweepRow(kind, label, mean, std, report=rep)


def run_sweep(kind, base: ExperimentConfig, grid, threads=1, base_report=None, data=None):
    """One row per grid point; failures are recorded and the sweep continues.

    ISR points are an ISR in dB (using the base interference kind, or
    narrowband), a ``(kind, isr_db)`` pair or a mapping with those keys.
    SamplingRate points are a ratio applied to the held-out receiver's test
    frames, or a receiver -> ratio map. Test-time points reuse one trained
    model; maps that touch training receivers retrain. Compression points
    name a compressor and run a federated experiment each.
    """
    kind = SweepKind(kind)
    grid = list(grid)
    if not grid:
        raise InvalidInputError("empty sweep grid")
    base.validate()
    data = load_frames(base) if data is None else data
    rows = []

    def shared():
        nonlocal base_report
        if base_report is None:
            base_report = run_experiment(replace(base, interference=None, out=None), data, threads, write=False)
        return base_report

    for p in grid:
        label = _point_label(p)
        try:
            if kind is SweepKind.ISR:
                default_kind = base.interference.kind if base.interference else InterferenceKind.NARROWBAND
                icfg = _isr_point(p, default_kind)
                label = _point_label(icfg)
                _, test = prepare(base, data, interference=icfg)
                rows.append(_test_time_row(kind.value, label, shared(), test, base.seed))
            elif kind is SweepKind.SAMPLING_RATE:
                if isinstance(p, dict):
                    ratios = {int(k): float(v) for k, v in p.items()}
                    if set(ratios) - {base.held_out} and any(v != 1.0 for k, v in ratios.items()
                                                               if k != base.held_out):
                        rep = run_experiment(replace(base, resample_ratios=ratios, out=None), data, threads,
                                             write=False)
                        rows.append(SweepRow(kind.value, label, rep.last5_mean, rep.last5_std, report=rep))
                        continue
                    r = ratios.get(base.held_out, 1.0)
                else:
                    r = float(p)
                _, test = prepare(replace(base, interference=None), data, test_ratio=r)
                rows.append(_test_time_row(kind.value, label, shared(), test, base.seed))
            else:
                comp = Compressor(p)
                cfg = replace(base, scenario=Scenario.FEDERATED, fed=replace(base.fed, compressor=comp), out=None)
                rep = run_experiment(cfg, data, threads, write=False)
                rows.append(SweepRow(kind.value, label, rep.last5_mean, rep.last5_std, report=rep))
        except (RffError, ValueError) as exc:
            rows.append(SweepRow(kind.value, label, math.nan, math.nan, status=f"failed: {exc}"))
    return rows


def write_sweep(rows, path):
    write_table_csv(path, [r.as_row() for r in rows], ["kind", "point", "last5_mean", "last5_std", "status"])
