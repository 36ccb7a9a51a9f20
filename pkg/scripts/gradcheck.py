"""Compare tape gradients with central differences on random small GCTs.

    python3 scripts/gradcheck.py [--instances 100] [--h 1e-5] [--spread 2.0]
"""
import argparse
import time

from kgroundtrip import gct, gradcheck


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--instances", type=int, default=100)
    ap.add_argument("--h", type=float, default=1e-5)
    ap.add_argument("--spread", type=float, default=2.0, help="weight scale; larger gives peakier attention")
    args = ap.parse_args()

    t0 = time.perf_counter()
    worst = {m: (0.0, None) for m in gct.LOSS_MODES}
    for seed in range(args.instances):
        inst = gradcheck.random_instance(seed, spread=args.spread)
        for mode in gct.LOSS_MODES:
            r = gradcheck.compare(inst, mode, args.h)
            err = gradcheck.max_relative_error(r["analytic"], r["numeric"])
            if err > worst[mode][0]:
                worst[mode] = (err, seed)
    for mode, (err, seed) in worst.items():
        print(f"{mode:<9} max relative error {err:.3e} (seed {seed})")
    print(f"{args.instances} instances in {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
