"""Observed Bogovskii constants under refinement and across admissible domains."""
import argparse

from hemoshape.analysis.suites import bogovskii_suite


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", type=int, nargs="+", default=[8, 16, 32])
    ap.add_argument("--h", type=float, default=0.05)
    args = ap.parse_args()

    r = bogovskii_suite(sizes=tuple(args.sizes), h=args.h)
    for n, c, res in zip(r["sizes"], r["constants"], r["residuals"]):
        print(f"square n={n:3d}  constant={c:.4f}  residual={res:.1e}")
    for d, c in zip(r["domains"], r["domain_constants"]):
        print(f"domain {d}  constant={c:.4f}")
    print(f"drift: refinement {r['relative_drift']:.3%}, domains {r['domain_drift']:.3%}; "
          f"passed {r['passed']}")


if __name__ == "__main__":
    main()
