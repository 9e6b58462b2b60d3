"""Steps until a desk-size variant-d model is exact on one Recolor task."""

import argparse
import time

from rolesep.experiments import overfit_steps


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--max-steps", type=int, default=500)
    args = ap.parse_args()
    for s in args.seeds:
        t0 = time.time()
        n = overfit_steps(s, args.max_steps)
        verdict = f"100% after {n} steps" if n is not None else f"not exact within {args.max_steps} steps"
        print(f"seed {s}: {verdict} ({time.time() - t0:.0f}s)")


if __name__ == "__main__":
    main()
