#!/usr/bin/env python3
"""Scan-kernel scaling benchmark: sequential vs parallel vs quadratic baseline."""

import argparse
import sys

from triseg.bench import bench_scan, check_scaling, doubling_ratios


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--lengths", default="4096,8192,16384")
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--check", action="store_true")
    args = ap.parse_args()

    rows = bench_scan([int(s) for s in args.lengths.split(",")], repeats=args.repeats)
    print(f"{'L':>8} {'sequential_ms':>14} {'parallel_ms':>12} {'quadratic_ms':>13}")
    for r in rows:
        print(f"{r['length']:>8} {r['sequential_ms']:>14.2f} {r['parallel_ms']:>12.2f} {r['quadratic_ms']:>13.2f}")
    print("doubling ratios, parallel: ", [round(v, 2) for v in doubling_ratios(rows, "parallel_ms")])
    print("doubling ratios, quadratic:", [round(v, 2) for v in doubling_ratios(rows, "quadratic_ms")])
    if args.check:
        check_scaling(rows)
        print("scaling check passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
