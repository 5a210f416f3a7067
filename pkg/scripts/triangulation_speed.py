"""Throughput of the two ray-intersection routines on random ray pairs."""

from __future__ import annotations

import argparse
import time

import numpy as np

from dotstereo.geometry import Ray, intersect_analytic, intersect_midpoint


def random_pairs(n: int, seed: int = 0) -> list[tuple[Ray, Ray]]:
    rng = np.random.default_rng(seed)
    o = rng.uniform(-100, 100, (n, 2, 3))
    d = rng.normal(size=(n, 2, 3))
    return [(Ray(o[i, 0], d[i, 0]), Ray(o[i, 1], d[i, 1])) for i in range(n)]


def per_second(fn, pairs, repeats: int) -> float:
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        for a, b in pairs:
            fn(a, b)
        best = min(best, time.perf_counter() - t0)
    return len(pairs) / best


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("-n", type=int, default=10_000)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    pairs = random_pairs(args.n)
    worst = max(float(np.linalg.norm(intersect_analytic(a, b)[0] - intersect_midpoint(a, b)[0]))
                for a, b in pairs)
    print(f"max point disagreement over {args.n} pairs: {worst:.3e} mm")
    for name, fn in (("analytic", intersect_analytic), ("midpoint", intersect_midpoint)):
        rate = per_second(fn, pairs, args.repeats)
        print(f"{name:<9} {rate:>12,.0f} intersections/s  {1e6 / rate:.2f} us/call")


if __name__ == "__main__":
    main()
