#!/usr/bin/env python3
"""Parameter counts of the seven-layer network as more layers become deformable."""

import argparse

from dtdnn.layers import param_count
from dtdnn.network import build_network, table1_config


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--hidden", type=int, default=640, help="hidden width (default: %(default)s)")
    ap.add_argument("--input", type=int, default=120, help="input feature dim (default: %(default)s)")
    ap.add_argument("--output", type=int, default=72, help="output classes (default: %(default)s)")
    args = ap.parse_args()

    per_layer = param_count(args.hidden, args.hidden, 5, deformable=True, offset_kernel=5).offset
    print(f"offset predictor per layer: {per_layer}")
    base = None
    for k in range(4):
        cfg = table1_config(input_dim=args.input, hidden_dim=args.hidden, output_dim=args.output,
                            deformable_last_k=k)
        total = build_network(cfg).param_counts()["total"]
        base = total if base is None else base
        print(f"deformable_last_k={k}: {total:>10,d} params  (+{total - base:,d}, {total / 1e6:.2f}M)")


if __name__ == "__main__":
    main()
