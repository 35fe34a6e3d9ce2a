"""Build a synthetic category-selective neuron for every ordered pair of texture families."""

import argparse

from sharedviz.experiments import category_selectivity
from sharedviz.synth import TEXTURES

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("-n", type=int, default=50, help="images per family, for both build and test draws")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    print("in\tout\tmean_in\tmean_out\tU\tp")
    for a in TEXTURES:
        for b in TEXTURES:
            if a != b:
                r = category_selectivity(a, b, args.n, args.seed)
                print(f"{a}\t{b}\t{r.mean_in:.4f}\t{r.mean_out:.4f}\t{r.test.u:.0f}\t{r.test.p:.2e}", flush=True)
