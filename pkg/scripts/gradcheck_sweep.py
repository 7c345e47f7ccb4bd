"""Finite-difference step-size sweep for the tiny model's analytic gradients.

Prints the worst relative error per (seed, step). Too large a step shows
truncation error, too small a step shows cancellation.
"""
import argparse

from noisyasr.gradcheck import check_model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--steps", default="1e-2,1e-3,1e-4,1e-5,1e-6")
    args = ap.parse_args()
    steps = [float(s) for s in args.steps.split(",")]
    print("seed," + ",".join(f"h={h:g}" for h in steps))
    for seed in range(args.seeds):
        errs = [check_model(seed, h=h).max_rel_error for h in steps]
        print(f"{seed}," + ",".join(f"{e:.2e}" for e in errs), flush=True)


if __name__ == "__main__":
    main()
