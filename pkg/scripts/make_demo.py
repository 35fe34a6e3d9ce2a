"""Write a small self-contained demo dataset and print the config path.

    python scripts/make_demo.py /tmp/demo
    sharedviz visualize --config /tmp/demo/config.json
"""

import argparse

from sharedviz.demo import make_demo

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("root")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    print(make_demo(args.root, seed=args.seed))
