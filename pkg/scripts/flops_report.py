#!/usr/bin/env python3
"""Print the layer cost model across two-stream depths for a given size."""

import argparse

from blockdiff.model import flops_estimate


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--length", type=int, default=1024)
    parser.add_argument("--dim", type=int, default=768)
    parser.add_argument("--layers", type=int, default=12)
    args = parser.parse_args()

    print(f"n={args.length} d={args.dim} layers={args.layers}")
    print(f"{'two-stream layers':>18}  {'total GFLOPs':>12}  {'ratio':>6}")
    for two_stream in range(args.layers + 1):
        total, ratio = flops_estimate(args.length, args.dim, args.layers, two_stream)
        print(f"{two_stream:>18}  {total / 1e9:>12.2f}  {ratio:>6.3f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
