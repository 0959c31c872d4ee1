"""The twelve acceptance criteria, one test each, at their stated tolerances.

Each test records a PASS/FAIL line with the measured values before asserting;
the lines are repeated in the terminal summary. Criteria 6-9 share one set of
five-seed runs on the calibrated scenario.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest
import yaml

from rfflab import rng as rngmod
from rfflab.dsp import InterferenceConfig, Window, inject, resample_cubic, stft
from rfflab.fed import ClientState, FedConfig, bits_accounting, compress, fed_fit
from rfflab.harness import Ablation, ExperimentConfig, Scenario, SweepKind, load_dataset, run_experiment, run_sweep
from rfflab.harness import save_dataset
from rfflab.harness.cli import main
from rfflab.harness.config import to_dict
from rfflab.harness.experiment import calibrated_receiver_ranges, load_frames
from rfflab.numerics import (LayerKind, LayerSpec, Mode, ParamBlock, finite_diff_check, init_params, layer_backward,
                             layer_forward)
from rfflab.riei import (Arch, Batch, RieiModel, TrainConfig, ce_objective, classifier_step, disentangle_objective,
                         feature_step, loss_ce, loss_ie, loss_mi)
from rfflab.synth import SampleSet, SynthConfig, synthesize_dataset

SEEDS = range(5)
PP = 100  # percentage points


# --- 1. gradient suite -----------------------------------------------------

def _layer_case(kind, rng):
    n, c, length, width = 4, 2, 7, 3
    if kind is LayerKind.DENSE:
        spec, x = LayerSpec.dense(width, 4), rng.standard_normal((n, width))
    elif kind is LayerKind.CONV1D:
        spec, x = LayerSpec.conv1d(c, 3, 3, stride=int(rng.integers(1, 3))), rng.standard_normal((n, c, length))
    elif kind is LayerKind.RELU:
        x = rng.standard_normal((n, width))
        spec, x = LayerSpec.relu(), x + np.sign(x) * 0.05
    elif kind is LayerKind.BATCHNORM1D:
        spec, x = LayerSpec.batchnorm(c), rng.standard_normal((n, c, length))
    elif kind is LayerKind.GLOBALAVGPOOL:
        spec, x = LayerSpec.global_avg_pool(), rng.standard_normal((n, c, length))
    else:
        spec, x = LayerSpec.softmax(), rng.standard_normal((n, width))
    params = init_params(spec, rng)
    for p in params:
        p.values += 0.3 * rng.standard_normal(p.values.shape) if p.trainable else 0
    if kind is LayerKind.BATCHNORM1D:
        params[2].values[:] = rng.standard_normal(c)
        params[3].values[:] = rng.uniform(0.5, 2.0, c)
    return spec, params, x


def _layer_error(kind, seed):
    rng = np.random.default_rng(seed)
    spec, params, x = _layer_case(kind, rng)
    probe = None

    def loss_fn(blocks):
        nonlocal probe
        inp, ps = blocks[0].values, blocks[1:]
        for p in ps:
            p.zero_grad()
        y, cache = layer_forward(spec, ps, inp, Mode.INFER, update_running=False)
        probe = rng.standard_normal(y.shape) if probe is None else probe
        gx = layer_backward(spec, ps, cache, probe)
        return float(np.sum(probe * y)), [gx] + [p.grad.copy() for p in ps if p.trainable]

    return finite_diff_check(loss_fn, [ParamBlock("input", x.copy())] + params)


def _objective_error(which, seed):
    rng = np.random.default_rng(seed)
    arch = Arch(n_emitters=4, n_receivers=3, input_length=32, conv=((4, 5, 2), (4, 3, 2)), f_e=3, f_r=3,
                head_hidden=(5,))
    m = RieiModel.build(arch, rng)
    for b in m.fed.blocks():
        if b.name.endswith("running_mean"):
            b.values[...] = 0.1 * rng.standard_normal(b.values.shape)
        elif b.name.endswith("running_var"):
            b.values[...] = rng.uniform(0.5, 2.0, b.values.shape)
    x = rng.standard_normal((6, 2, 32))
    batch = Batch(x, rng.integers(1, 5, 6), rng.integers(1, 4, 6))
    cfg = TrainConfig(lambda1=float(rng.uniform(0.2, 2)), lambda2=float(rng.uniform(0.2, 2)),
                      reduction=("mean", "sum")[seed % 2])

    def loss_fn(blocks):
        m.zero_grad()
        if which == "ce":
            value, _ = ce_objective(m, batch, cfg, Mode.INFER, update_running=False)
        else:
            value, _, _ = disentangle_objective(m, batch, cfg, Mode.INFER)
        return value, [b.grad.copy() for b in blocks if b.trainable]

    blocks = m.blocks() if which == "ce" else m.fed.blocks()
    return finite_diff_check(loss_fn, blocks)


def test_criterion_01_gradient_suite(verdict):
    t0 = time.time()
    errors = {}
    for kind in LayerKind:
        errors[kind.value] = max(_layer_error(kind, seed) for seed in range(6))
    for which in ("ce", "disentangle"):
        errors[which] = max(_objective_error(which, seed) for seed in range(8))
    cases = 6 * len(LayerKind) + 16
    elapsed = time.time() - t0
    worst = max(errors.values())
    ok = worst < 1e-4 and cases >= 50 and elapsed < 120
    detail = ", ".join(f"{k}={v:.1e}" for k, v in errors.items())
    assert verdict(1, ok, f"{cases} cases, max rel err {worst:.2e} < 1e-4 in {elapsed:.0f}s ({detail})")


# --- 2. loss identities ----------------------------------------------------

def _identity_model(M=4, K=4):
    arch = Arch(n_emitters=M, n_receivers=K, in_channels=1, input_length=4, conv=(), batchnorm=False,
                f_e=2, f_r=2, head_hidden=())
    m = RieiModel.build(arch, np.random.default_rng(0))
    W, b = m.fed.params[-1]
    W.values[...], b.values[...] = np.eye(4), 0
    for stack in (m.ec, m.rc):
        stack.params[-1][0].values[...] = 0
        stack.params[-1][1].values[...] = 0
    return m


def test_criterion_02_loss_identities(verdict):
    sum_cfg = TrainConfig(reduction="sum")
    gaps = []
    for M, K, n in ((4, 4, 1), (4, 3, 5), (2, 5, 9)):
        m = _identity_model(M, K)
        r = np.random.default_rng(n)
        b = Batch(r.standard_normal((n, 1, 4)), r.integers(1, M + 1, n), r.integers(1, K + 1, n))
        target = n * (math.log(M) + math.log(K))
        gaps += [abs(loss_ce(m, b, sum_cfg) - target), abs(loss_ie(m, b, sum_cfg) - target)]
    m = _identity_model()
    witnesses = {"orthogonal": ([1, 0, 0, 1], 0.0), "parallel": ([1, 1, 2, 2], 1.0)}
    wgaps = [abs(loss_mi(m, Batch(np.array([[x]], float), [1], [1])) - v) for x, v in witnesses.values()]
    r = np.random.default_rng(1)
    per_sample = [loss_mi(m, Batch(r.standard_normal((1, 1, 4)) * 10, [1], [1])) for _ in range(500)]
    in_range = all(0.0 <= v <= 1.0 for v in per_sample)
    ok = max(gaps) < 1e-9 and max(wgaps) < 1e-12 and in_range
    assert verdict(2, ok, f"max |L - n(lnM+lnK)| = {max(gaps):.1e} < 1e-9; MI witnesses 0 and 1 "
                          f"(err {max(wgaps):.0e}); 500 per-sample MI values in [0,1]: {in_range}")


# --- 3. federated equals centralized ---------------------------------------

def test_criterion_03_federated_equals_centralized(verdict):
    arch = Arch(n_emitters=3, n_receivers=3, input_length=24, conv=((3, 5, 2),), f_e=2, f_r=2, head_hidden=(4,),
                batchnorm=False)
    r = np.random.default_rng(0)
    clients = []
    for k, n in enumerate((12, 8, 10), start=1):
        x = r.standard_normal((n, 2, 24))
        clients.append(ClientState(k, SampleSet(x, r.integers(1, 4, n), np.full(n, k))))
    model = RieiModel.build(arch, np.random.default_rng(4))
    cfg = TrainConfig(eta_F=1e-3, eta_E=2e-3, eta_R=3e-3)
    central = model.copy()
    pooled = Batch.from_samples(SampleSet.concat([c.data for c in clients]))
    classifier_step(central, pooled, cfg)
    feature_step(central, pooled, cfg)
    start = model.state()
    fed_fit(clients, model, cfg, FedConfig(T=1, L=1, batch=None, compressor="None"))
    fed_blocks, c_blocks = model.named_blocks(), central.named_blocks()
    diff = max(np.max(np.abs(fed_blocks[k].values - c_blocks[k].values)) for k in c_blocks)
    moved = max(np.max(np.abs(c_blocks[k].values - start[k])) for k in c_blocks)
    assert verdict(3, diff < 1e-6, f"max per-coordinate diff {diff:.1e} < 1e-6 (step size {moved:.1e})")


# --- 4. compression accounting ---------------------------------------------

def test_criterion_04_compression_accounting(verdict):
    arch = Arch(n_emitters=3, n_receivers=3, input_length=24, conv=((3, 5, 2),), f_e=2, f_r=2, head_hidden=(4,))
    r = np.random.default_rng(1)
    clients = [ClientState(k, SampleSet(r.standard_normal((8, 2, 24)), r.integers(1, 4, 8), np.full(8, k)))
               for k in (1, 2, 3)]
    K, T = len(clients), 3
    results = []
    for scheme in ("Sign", "NoisySignGaussian", "NoisySignUniform"):
        m = RieiModel.build(arch, np.random.default_rng(0))
        P = m.trainable_count()
        _, logs = fed_fit(clients, m, TrainConfig(), FedConfig(T=T, compressor=scheme, batch=4))
        results.append((scheme, bits_accounting(logs)[-1], K * T * P, logs[-1].compression_ratio_32))
    ok = all(bits == expect and ratio == 32 for _, bits, expect, ratio in results)
    detail = "; ".join(f"{s}: {b} bits (K*T*P={e}), ratio {q}" for s, b, e, q in results)
    assert verdict(4, ok, detail)


# --- 5. noisy-sign statistics ----------------------------------------------

def test_criterion_05_noisy_sign_statistics(verdict):
    sigma, n = 0.02, 100_000
    a = sigma * math.sqrt(3)
    z = []
    for i, x in enumerate((a / 2, -a / 2, a / 4, -a / 4)):
        q = compress({"w": np.full(n, x)}, "NoisySignUniform", sigma, np.random.default_rng(100 + i))
        p = x / a
        se = math.sqrt((1 - p * p) / n)
        z.append((q.blocks["w"].mean() - p) / se)
    worst = max(abs(v) for v in z)
    assert verdict(5, worst < 3, "z-scores " + ", ".join(f"{v:+.2f}" for v in z) + " (|z| < 3)")


# --- 6-9. calibrated-scenario comparisons ----------------------------------

@pytest.fixture(scope="session")
def calibrated_runs():
    """Every ablation on every seed of the calibrated scenario, with wall time per ablation."""
    runs, seconds = {}, {}
    for ab in (Ablation.BASELINE, Ablation.FULL, Ablation.IE_ONLY, Ablation.MI_ONLY):
        t0 = time.time()
        for seed in SEEDS:
            runs[ab, seed] = run_experiment(ExperimentConfig(ablation=ab).with_seed(seed), write=False)
        seconds[ab] = time.time() - t0
    return runs, seconds


def _mean_last5(runs, ab):
    return float(np.mean([runs[ab, s].last5_mean for s in SEEDS]))


def test_criterion_06_riei_beats_baseline(calibrated_runs, verdict):
    runs, seconds = calibrated_runs
    full, base = _mean_last5(runs, Ablation.FULL), _mean_last5(runs, Ablation.BASELINE)
    elapsed = seconds[Ablation.FULL] + seconds[Ablation.BASELINE]
    per_seed = ", ".join(f"{runs[Ablation.FULL, s].last5_mean:.3f}/{runs[Ablation.BASELINE, s].last5_mean:.3f}"
                         for s in SEEDS)
    ok = (full - base) * PP >= 5 and elapsed < 15 * 60
    assert verdict(6, ok, f"Full {full:.3f} vs BaselineCE {base:.3f}: gain {(full - base) * PP:+.1f} pp "
                          f"(need >= +5); runtime {elapsed / 60:.1f} min; per seed Full/Base {per_seed}")


def test_criterion_07_ablation_ordering(calibrated_runs, verdict):
    runs, _ = calibrated_runs
    m = {ab: _mean_last5(runs, ab) for ab in (Ablation.BASELINE, Ablation.FULL, Ablation.IE_ONLY, Ablation.MI_ONLY)}
    base, full, ie, mi = m[Ablation.BASELINE], m[Ablation.FULL], m[Ablation.IE_ONLY], m[Ablation.MI_ONLY]
    ok = ie >= base and mi >= base and full >= max(ie, mi) - 0.01
    assert verdict(7, ok, f"BaselineCE {base:.3f}, IEOnly {ie:.3f}, MIOnly {mi:.3f}, Full {full:.3f} "
                          f"(need IE, MI >= Base and Full >= max(IE, MI) - 1 pp)")


def test_criterion_08_independence_diagnostic(calibrated_runs, verdict):
    runs, _ = calibrated_runs
    score = {ab: float(np.mean([runs[ab, s].diagnostics["independence_score"] for s in SEEDS]))
             for ab in (Ablation.FULL, Ablation.BASELINE)}
    ok = score[Ablation.FULL] < score[Ablation.BASELINE]
    assert verdict(8, ok, f"mean |cos| RIEI {score[Ablation.FULL]:.4f} < BaselineCE random split "
                          f"{score[Ablation.BASELINE]:.4f}")


def test_criterion_09_interference_directionality(calibrated_runs, verdict):
    runs, _ = calibrated_runs
    kinds = ("NarrowbandHopping", "BroadbandGaussian")
    isrs = (-10.0, 0.0, 10.0, 20.0)
    acc = {(k, i): [] for k in kinds for i in isrs}
    for seed in SEEDS:
        cfg = ExperimentConfig(ablation=Ablation.FULL).with_seed(seed)
        grid = [(k, i) for k in kinds for i in isrs]
        rows = run_sweep(SweepKind.ISR, cfg, grid, base_report=runs[Ablation.FULL, seed])
        assert all(r.status == "ok" for r in rows), [r.status for r in rows]
        for point, row in zip(grid, rows):
            acc[point].append(row.last5_mean)
    mean = {p: float(np.mean(v)) for p, v in acc.items()}
    nb, bb = kinds
    checks = [mean[k, -10.0] >= mean[k, 20.0] for k in kinds] + [mean[nb, i] >= mean[bb, i] for i in (0.0, 10.0)]
    table = "; ".join(f"{k[:2]}: " + " ".join(f"{i:+g}dB {mean[k, i]:.3f}" for i in isrs) for k in kinds)
    assert verdict(9, all(checks), table)


# --- 10. resampling tolerance ----------------------------------------------

def _resampling_config(seed):
    synth = SynthConfig(M=4, K=5, frames_per_pair=250, L=256, snr_db=15.0, seed=seed,
                        receiver_ranges=calibrated_receiver_ranges())
    cfg = ExperimentConfig(scenario=Scenario.FEDERATED, synth=synth, held_out_receiver=5, n_train=200,
                           diagnostics=False, seed=seed)
    return replace(cfg, fed=FedConfig(T=20, L=1, batch=64, compressor="None"))


def test_criterion_10_resampling_tolerance(verdict):
    same, mixed = [], []
    for seed in SEEDS:
        cfg = _resampling_config(seed)
        data = load_frames(cfg)
        same.append(run_experiment(cfg, data, write=False).last5_mean)
        ratios = {1: 1.0, 2: 0.9, 3: 0.8, 4: 0.7, 5: 1.0}
        mixed.append(run_experiment(replace(cfg, resample_ratios=ratios), data, write=False).last5_mean)
    drop = (np.mean(same) - np.mean(mixed)) * PP
    assert verdict(10, drop <= 5, f"all-1.0 {np.mean(same):.3f}, mixed {{1.0,0.9,0.8,0.7}} {np.mean(mixed):.3f}: "
                                  f"drop {drop:+.1f} pp (need <= 5)")


# --- 11. determinism -------------------------------------------------------

def test_criterion_11_determinism(tmp_path, verdict):
    synth = SynthConfig(M=3, K=3, frames_per_pair=24, L=64, receiver_ranges=calibrated_receiver_ranges())
    cfg = ExperimentConfig(synth=synth, arch=Arch(conv=((4, 5, 2), (4, 3, 2)), f_e=4, f_r=4, head_hidden=(8,)),
                           train=TrainConfig(eta_F=0.05, eta_E=0.05, eta_R=0.05, batch=16, epochs=5), n_train=16)
    cfg = replace(cfg, fed=FedConfig(T=5, batch=8, compressor="NoisySignGaussian"))
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))
    identical = {}
    for cmd in ("train", "fedtrain"):
        outputs = []
        for i, threads in enumerate((1, 1, 4)):
            out = tmp_path / f"{cmd}{i}"
            code = main([cmd, "--config", str(path), "--seed", "11", "--out", str(out), "--threads", str(threads)])
            assert code == 0
            outputs.append((out / "metrics.csv").read_bytes())
        identical[cmd] = len(set(outputs)) == 1
    assert verdict(11, all(identical.values()), f"byte-identical metrics.csv over repeats and --threads 1/4: "
                                                f"{identical}")


# --- 12. DSP oracles -------------------------------------------------------

def _naive_stft(x, N, hop, w):
    rows = (len(x) - N) // hop + 1
    n = np.arange(N)
    basis = np.exp(-2j * np.pi * np.outer(n, n) / N)
    out = np.empty((rows, N))
    for r in range(rows):
        seg = x[r * hop:r * hop + N] * w
        out[r] = [abs(sum(seg[j] * basis[f, j] for j in range(N))) for f in range(N)]
    return out


def test_criterion_12_dsp_oracles(tmp_path, verdict):
    r = np.random.default_rng(0)
    x = r.standard_normal(128) + 1j * r.standard_normal(128)
    stft_err = max(np.max(np.abs(stft(x, 32, 16, win).magnitudes
                                 - _naive_stft(x, 32, 16, np.hanning(32) if win is Window.HANN else np.ones(32))))
                   for win in Window)

    isr_err = 0.0
    for j in range(200):
        rr = rngmod.stream(0, "acceptance", j)
        kind = ("NarrowbandHopping", "BroadbandGaussian")[j % 2]
        target = float(rr.uniform(-30, 30))
        frame = (rr.standard_normal(256) + 1j * rr.standard_normal(256)) * rr.uniform(0.1, 10)
        y = inject(frame, InterferenceConfig(kind, target), rr)
        measured = 10 * math.log10(np.mean(np.abs(y - frame) ** 2) / np.mean(np.abs(frame) ** 2))
        isr_err = max(isr_err, abs(measured - target))

    spline_err = max(np.max(np.abs(resample_cubic(f, 1.0) - f))
                     for f in (r.standard_normal(256) + 1j * r.standard_normal(256) for _ in range(10)))

    data = synthesize_dataset(SynthConfig(M=4, K=3, frames_per_pair=5, L=256))
    save_dataset(tmp_path / "d.rffd", data)
    back = load_dataset(tmp_path / "d.rffd")
    exact = all(np.array_equal(back[k].frames, data[k].frames.astype(np.float32).astype(float))
                and np.array_equal(back[k].emitter, data[k].emitter) for k in data)
    save_dataset(tmp_path / "again.rffd", back)
    exact = exact and (tmp_path / "again.rffd").read_bytes() == (tmp_path / "d.rffd").read_bytes()

    ok = stft_err < 1e-9 and isr_err <= 0.2 and spline_err < 1e-9 and exact
    assert verdict(12, ok, f"STFT vs DFT {stft_err:.1e}; ISR error {isr_err:.1e} dB over 200 frames; "
                           f"ratio-1 spline {spline_err:.1e}; dataset round trip bit-exact: {exact}")
