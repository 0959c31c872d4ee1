"""Pick the receiver-impairment scale for the calibrated scenario.

For each candidate scale the receiver ranges are set to ``scale`` times
the emitter ranges (DC offset and FIR spread stay fixed) and the CE
baseline is trained with the default experiment settings on several seeds.
The scenario is calibrated when the mean last-5 held-out accuracy falls in
the target window; the smallest such scale is reported.

    python scripts/calibrate.py --scales 0.2,0.35,0.5 --seeds 5
"""

import argparse
import math
import time
from dataclasses import replace

import numpy as np
from threadpoolctl import threadpool_limits

from rfflab.harness.experiment import Ablation, ExperimentConfig, run_experiment
from rfflab.synth import EmitterRanges, ReceiverRanges

WINDOW = (0.55, 0.80)


def scaled_ranges(scale, dc=0.1, fir=0.3):
    e = EmitterRanges()
    s = lambda lo_hi: (scale * lo_hi[0], scale * lo_hi[1])  # noqa: E731
    return ReceiverRanges(a3=s(e.a3), a5=s(e.a5), iq_gain_mismatch=s(e.iq_gain_mismatch),
                          iq_phase_mismatch=s(e.iq_phase_mismatch), cfo=s(e.cfo), phase0=s(e.phase0),
                          dc_magnitude=(0.0, dc), fir_spread=(0.0, fir))


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--scales", default="0.1,0.2,0.35,0.5")
    p.add_argument("--seeds", type=int, default=5)
    args = p.parse_args()
    chosen = None
    for scale in [float(x) for x in args.scales.split(",")]:
        base = ExperimentConfig(ablation=Ablation.BASELINE, diagnostics=False)
        base = replace(base, synth=replace(base.synth, receiver_ranges=scaled_ranges(scale)))
        accs = []
        for seed in range(args.seeds):
            t0 = time.time()
            with threadpool_limits(limits=1):
                rep = run_experiment(base.with_seed(seed))
            accs.append(rep.last5_mean)
            print(f"scale {scale:g} seed {seed}: last5 {rep.last5_mean:.3f} ({time.time() - t0:.0f}s)", flush=True)
        mean = float(np.mean(accs))
        inside = WINDOW[0] <= mean <= WINDOW[1]
        print(f"scale {scale:g}: mean {mean:.3f} {'inside' if inside else 'outside'} window {WINDOW}", flush=True)
        if inside and chosen is None:
            chosen = scale
    print("calibrated scale:", chosen if chosen is not None else math.nan)


if __name__ == "__main__":
    main()
