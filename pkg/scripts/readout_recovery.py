"""Seed sweep of the planted-readout recovery experiment.

    python scripts/readout_recovery.py --seeds 20 --gain 320 --scale 0.025
"""

import argparse
import time

import numpy as np

from sharedviz.experiments import RecoverySetup, readout_recovery, recovery_backbone, texture_maps

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--gain", type=float, default=RecoverySetup.feature_gain)
    ap.add_argument("--scale", type=float, default=RecoverySetup.weight_scale)
    ap.add_argument("--snr", type=float, default=RecoverySetup.snr)
    args = ap.parse_args()

    setup = RecoverySetup(feature_gain=args.gain, weight_scale=args.scale, snr=args.snr)
    backbone = recovery_backbone(setup)
    start = time.perf_counter()
    maps = texture_maps(backbone, sum(setup.split), setup.image_seed)
    rs = []
    print("seed\ttest_r\tclean_r\tceiling\tbest_epoch")
    for seed in range(args.seeds):
        res = readout_recovery(seed, setup, maps=maps, backbone=backbone)
        rs.append(res.test_r)
        print(f"{seed}\t{res.test_r:.4f}\t{res.clean_r:.4f}\t{res.oracle_r:.4f}\t{res.best_epoch}", flush=True)
    rs = np.array(rs)
    print(f"gain {args.gain} scale {args.scale}: min {rs.min():.3f} mean {rs.mean():.3f} "
          f"above 0.9: {int((rs > 0.9).sum())}/{rs.size} ({time.perf_counter() - start:.0f}s)")
