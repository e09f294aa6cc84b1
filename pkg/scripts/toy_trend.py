#!/usr/bin/env python3
"""Train standard, deformable and clipped-deformable nets on the toy task and
print the warp-robustness and latency-control tables."""

import argparse
import dataclasses
import time
from pathlib import Path

from dtdnn.train import compare_run, load_experiment

ROOT = Path(__file__).resolve().parent.parent


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=ROOT / "configs" / "toy.cfg", help="experiment config (default: %(default)s)")
    ap.add_argument("--steps", type=int, default=None, help="override training steps (default: from config)")
    ap.add_argument("--seed", type=int, default=None, help="override train seed (default: from config)")
    args = ap.parse_args()

    cfg = load_experiment(args.config)
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, steps=args.steps)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, train_seed=args.seed)
    start = time.perf_counter()
    s = compare_run(cfg)["summary"]

    print(f"{'W':>6} {'standard':>10} {'deformable':>11} {'gap':>8}")
    for W, row in s["warp"].items():
        print(f"{W:>6} {row['standard']:>10.4f} {row['deformable']:>11.4f} {row['relative_gap']:>+8.1%}")
    lat = s["latency"]
    print()
    print(f"free train, free test   {lat['free_train_free_test']:.4f}")
    print(f"free train, clip test   {lat['free_train_clip_test']:.4f}  ({lat['rel_free_train_clip_test']:+.1%})")
    print(f"clip train, clip test   {lat['clip_train_clip_test']:.4f}  ({lat['rel_clip_train_clip_test']:+.1%})")
    print(f"\n{time.perf_counter() - start:.0f}s")


if __name__ == "__main__":
    main()
