#!/usr/bin/env python3
"""Lookahead of the seven-layer network with and without the latency clip.

Predictors are randomised so offsets are far from zero.  Without the clip
the lookahead moves with the probe input; with it, it never passes the
standard network's value.
"""

import argparse

from dtdnn.analysis import dependency_map, lookahead
from dtdnn.core import make_rng
from dtdnn.network import build_network, table1_config


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--length", type=int, default=60, help="probe length in frames (default: %(default)s)")
    ap.add_argument("--probes", type=int, default=10, help="random probe inputs per net (default: %(default)s)")
    ap.add_argument("--width", type=int, default=32, help="hidden width (default: %(default)s)")
    ap.add_argument("--seed", type=int, default=0, help="rng seed (default: %(default)s)")
    args = ap.parse_args()

    rng = make_rng(args.seed)
    T = args.length

    def audit(k, clip):
        cfg = table1_config(input_dim=8, hidden_dim=args.width, output_dim=6, deformable_last_k=k,
                            clip_mode=clip, seed=args.seed)
        net = build_network(cfg)
        for i in net.deformable_indices:
            p = net.layers[i].predictor.params
            p.weight[:] = rng.normal(size=p.weight.shape)
            p.bias[:] = rng.normal(size=p.bias.shape)
        return [lookahead(dependency_map(net, T, x=rng.normal(size=(8, T)), probes=2), 3).max
                for _ in range(args.probes)]

    print(f"standard: lookahead {audit(0, 'none')[0]} frames")
    for k in (1, 2, 3):
        for clip in ("none", "latency_controlled"):
            vals = audit(k, clip)
            print(f"last {k} deformable, clip={clip:<18} min {min(vals):>3}  max {max(vals):>3}")


if __name__ == "__main__":
    main()
