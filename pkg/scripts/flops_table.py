"""FLOPs of ABC-S/B/L at a few resolutions, with the per-module breakdown from an instrumented pass."""
import argparse

import numpy as np

from abcnet.model import ABC, ABCConfig, PRESETS, count_flops
from abcnet.tensor import FlopCounter, Tensor, no_grad


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", type=int, nargs="+", default=[64, 128, 256])
    ap.add_argument("--breakdown", type=int, default=64, help="resolution for the instrumented pass (0 to skip)")
    args = ap.parse_args()

    print(f"{'size':>6}" + "".join(f"{'ABC-' + k:>12}" for k in PRESETS) + f"{'B/S':>8}{'L/B':>8}")
    for size in args.sizes:
        f = [count_flops(ABCConfig(input_dim=c, input_resolution=(size, size))) for c in PRESETS.values()]
        print(f"{size:>6}" + "".join(f"{n / 1e9:>11.2f}G" for n in f) + f"{f[1] / f[0]:>8.3f}{f[2] / f[1]:>8.3f}")

    if args.breakdown:
        cfg = ABCConfig(input_dim=16, input_resolution=(args.breakdown, args.breakdown))
        with FlopCounter() as fc, no_grad():
            ABC(cfg)(Tensor(np.zeros((1, 1, args.breakdown, args.breakdown))))
        print(f"\nABC-S at {args.breakdown}x{args.breakdown}, measured {fc.total / 1e9:.3f}G "
              f"(analytic {count_flops(cfg) / 1e9:.3f}G)")
        for op, n in sorted(fc.by_op.items(), key=lambda kv: -kv[1]):
            print(f"  {op:<20}{n / fc.total:>7.1%}")


if __name__ == "__main__":
    main()
