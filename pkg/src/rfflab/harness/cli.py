"""Command-line entry point: ``rfflab <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data/format error,
4 training diverged. Run outputs are deterministic given config and seed;
wall-clock details go to ``meta.json`` only.
"""

from __future__ import annotations

import argparse
import datetime
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .. import __version__
from ..dsp import energy_detect, frame_stream, lowpass_filter, normalize_rms
from ..errors import ConfigError, InvalidInputError, RffError
from ..riei import accuracy, extract_features, load_checkpoint
from ..synth import SampleSet, synthesize_dataset, to_iq
from .config import from_dict, load_yaml
from .experiment import ExperimentConfig, Scenario, SweepKind, model_inputs, run_experiment, run_sweep, write_sweep
from .io import export_features, load_dataset, save_dataset, write_json


def load_config(path=None, seed=None, out=None) -> ExperimentConfig:
    cfg = from_dict(ExperimentConfig, load_yaml(path)) if path else ExperimentConfig()
    if seed is not None:
        cfg = cfg.with_seed(seed)
    if out is not None:
        cfg = replace(cfg, out=str(out))
    return cfg


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_meta(out, args):
    meta = {"command": args.command, "argv": sys.argv[1:], "version": __version__, "threads": args.threads,
            "finished_utc": datetime.datetime.now(datetime.timezone.utc).isoformat()}
    (Path(out) / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def cmd_synth(args):
    cfg = load_config(args.config, args.seed)
    out = _out_dir(args)
    data = synthesize_dataset(cfg.synth)
    save_dataset(out / "dataset.rffd", data, cfg.synth.M, cfg.synth.K)
    return out


def cmd_preprocess(args):
    """Complex baseband stream (.npy) -> detected, filtered, framed, normalized records."""
    cfg = load_config(args.config, args.seed)
    try:
        stream = np.load(args.input)
    except (OSError, ValueError) as exc:
        raise InvalidInputError(f"cannot read stream {args.input}: {exc}") from None
    stream = np.asarray(stream).reshape(-1).astype(complex)
    filtered = lowpass_filter(stream, args.cutoff, args.taps)
    L = cfg.synth.L
    frames = []
    for start, end in energy_detect(filtered, args.window, args.threshold):
        seg = frame_stream(filtered[start:end], L, args.hop or L)
        frames.extend(normalize_rms(f) for f in seg)
    if not frames:
        raise InvalidInputError("no bursts long enough for a frame were detected")
    n = len(frames)
    s = SampleSet(to_iq(np.array(frames)), np.full(n, args.emitter), np.full(n, args.receiver))
    out = _out_dir(args)
    save_dataset(out / "dataset.rffd", s, max(args.emitter, cfg.synth.M), max(args.receiver, cfg.synth.K))
    return out


def _run(args, scenario):
    cfg = load_config(args.config, args.seed, args.out)
    cfg = replace(cfg, scenario=scenario)
    if args.dataset:
        cfg = replace(cfg, dataset=args.dataset)
    _out_dir(args)
    report = run_experiment(cfg, threads=args.threads)
    print(f"last5 accuracy {report.last5_mean:.4f} +/- {report.last5_std:.4f}")
    return args.out


def cmd_train(args):
    return _run(args, Scenario.CENTRALIZED)


def cmd_fedtrain(args):
    return _run(args, Scenario.FEDERATED)


def cmd_eval(args):
    cfg = load_config(args.config, args.seed)
    model = load_checkpoint(args.checkpoint)
    data = load_dataset(args.dataset)
    receivers = [args.receiver] if args.receiver else sorted(data)
    result = {}
    for k in receivers:
        if k not in data:
            raise InvalidInputError(f"dataset has no receiver {k}")
        result[f"receiver{k}"] = accuracy(model, model_inputs(data[k], cfg.preproc))
    out = _out_dir(args)
    write_json(out / "eval.json", result)
    for k, v in result.items():
        print(f"{k} accuracy {v:.4f}")
    return out


def _parse_grid(kind, text):
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise ConfigError("empty sweep grid")
    grid = []
    for t in items:
        if kind is SweepKind.COMPRESSION:
            grid.append(t)
        elif kind is SweepKind.ISR:
            if ":" in t:
                k, v = t.split(":", 1)
                grid.append((k, _num(v)))
            else:
                grid.append(_num(t))
        elif "=" in t:
            grid.append({int(k): _num(v) for k, v in (p.split("=") for p in t.split(";"))})
        else:
            grid.append(_num(t))
    return grid


def _num(s):
    try:
        return float(s)
    except ValueError:
        raise ConfigError(f"not a number: {s!r}") from None


def cmd_sweep(args):
    cfg = load_config(args.config, args.seed)
    kind = SweepKind(args.kind)
    rows = run_sweep(kind, cfg, _parse_grid(kind, args.grid), threads=args.threads)
    out = _out_dir(args)
    write_sweep(rows, out / "sweep.csv")
    for r in rows:
        print(f"{r.point}\t{r.last5_mean:.4f}\t{r.status}")
    return out


def cmd_export_features(args):
    cfg = load_config(args.config, args.seed)
    model = load_checkpoint(args.checkpoint)
    data = load_dataset(args.dataset)
    s = model_inputs(SampleSet.concat([data[k] for k in sorted(data)]), cfg.preproc)
    out = _out_dir(args)
    export_features(extract_features(model, s.frames), s, out / "features.csv")
    return out


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker threads for federated clients")

    p = argparse.ArgumentParser(prog="rfflab", description="Cross-receiver RF fingerprinting toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="write a synthetic dataset file")
    pp = sub.add_parser("preprocess", parents=[common], help="stream (.npy) -> dataset file")
    pp.add_argument("--input", required=True)
    pp.add_argument("--emitter", type=int, required=True)
    pp.add_argument("--receiver", type=int, required=True)
    pp.add_argument("--window", type=int, default=32)
    pp.add_argument("--threshold", type=float, default=3.0)
    pp.add_argument("--cutoff", type=float, default=0.25)
    pp.add_argument("--taps", type=int, default=63)
    pp.add_argument("--hop", type=int, default=None)
    for name in ("train", "fedtrain"):
        sp = sub.add_parser(name, parents=[common], help=f"{name} on the held-out-receiver protocol")
        sp.add_argument("--dataset", help="use a dataset file instead of synthesizing")
    ep = sub.add_parser("eval", parents=[common], help="accuracy of a checkpoint on a dataset")
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--dataset", required=True)
    ep.add_argument("--receiver", type=int)
    sw = sub.add_parser("sweep", parents=[common], help="ISR / sampling-rate / compression sweep")
    sw.add_argument("--kind", required=True, choices=[k.value for k in SweepKind])
    sw.add_argument("--grid", required=True, help="comma-separated grid points")
    xp = sub.add_parser("export-features", parents=[common], help="write features as CSV")
    xp.add_argument("--checkpoint", required=True)
    xp.add_argument("--dataset", required=True)
    return p


COMMANDS = {"synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train, "fedtrain": cmd_fedtrain,
            "eval": cmd_eval, "sweep": cmd_sweep, "export-features": cmd_export_features}


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return ConfigError.exit_code
    try:
        with threadpool_limits(limits=1):
            out = COMMANDS[args.command](args)
        _write_meta(out, args)
    except RffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return InvalidInputError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
