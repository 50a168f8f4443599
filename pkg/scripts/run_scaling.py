"""Time and peak-memory sweep over sequence length, with fitted exponents.

    python scripts/run_scaling.py --out runs/scaling.csv
"""
import argparse
import sys

from coupled_ssm.bench import DEFAULT_LENGTHS, ENGINES, InsufficientDataError, fit_scaling_exponent, run_sweep, write_records


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lengths", default=",".join(map(str, DEFAULT_LENGTHS)))
    ap.add_argument("--engines", default=",".join(ENGINES))
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--out", default="scaling.csv")
    args = ap.parse_args(argv)

    lengths = [int(x) for x in args.lengths.split(",")]
    recs = run_sweep(lengths, repeats=args.repeats, engines=args.engines.split(","), log=print)
    write_records(args.out, recs)
    for engine in args.engines.split(","):
        sub = [r for r in recs if r.engine == engine]
        for metric in ("time", "memory"):
            try:
                print(f"{engine:<20} {metric:<7} exponent {fit_scaling_exponent(sub, metric):.3f}")
            except InsufficientDataError as e:
                print(f"{engine:<20} {metric:<7} exponent n/a ({e})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
