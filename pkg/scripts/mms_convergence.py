"""Spatial convergence of the manufactured solution on the unit square.

    python scripts/mms_convergence.py --q 1.5 --n 4 8 16 32
"""
import argparse
import json
import time

from hemoshape.analysis.mms import mms_error, observed_orders


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--q", type=float, default=2.0)
    ap.add_argument("--n", type=int, nargs="+", default=[4, 8, 16])
    ap.add_argument("--dt", type=float, default=1e-3)
    ap.add_argument("--steps", type=int, default=2)
    ap.add_argument("--json", help="write the table here as JSON")
    args = ap.parse_args()

    rows = []
    for n in args.n:
        t0 = time.perf_counter()
        err, state = mms_error(args.q, n, args.dt, args.steps)
        rows.append({"n": n, "error": err, "picard": max(state.info["picard_iterations"]),
                     "seconds": time.perf_counter() - t0})
        print(f"n={n:3d}  L2(L2) error={err:.4e}  picard={rows[-1]['picard']}  "
              f"{rows[-1]['seconds']:.1f} s", flush=True)
    orders = observed_orders([1.0 / n for n in args.n], [r["error"] for r in rows])
    print("observed orders:", " ".join(f"{o:.3f}" for o in orders))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"q": args.q, "dt": args.dt, "steps": args.steps, "rows": rows,
                       "orders": orders}, fh, indent=2)


if __name__ == "__main__":
    main()
