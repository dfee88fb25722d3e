"""Hemolysis values on the disks of radius 1 + 1/k against the limit disk.

Also checks one energy bound against every member of the family.

    python scripts/disk_family.py --kmax 8 --rings 12 --proxy-rings 20 --json family.json
"""
import argparse
import json

from hemoshape.analysis.suites import disk_family


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--kmax", type=int, default=8)
    ap.add_argument("--rings", type=int, default=12)
    ap.add_argument("--proxy-rings", type=int, default=20)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--json")
    args = ap.parse_args()

    r = disk_family(tuple(range(1, args.kmax + 1)), args.rings, args.proxy_rings,
                    threads=args.threads)
    for k, rad, v, g in zip(r["ks"], r["radii"], r["values"], r["gaps"]):
        print(f"k={k}  radius={rad:.4f}  J={v:.6f}  gap={g:.4f}")
    print(f"proxy (limit disk, {args.proxy_rings} rings): {r['proxy']:.6f}")
    print(f"last gaps decreasing: {r['decreasing']}  continuity passed: {r['continuity_passed']}")
    print(f"energy bound {r['bound']:.4g}; all members within it: {r['energy_passed']}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(r, fh, indent=2)


if __name__ == "__main__":
    main()
