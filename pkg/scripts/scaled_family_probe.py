"""Trends of the scaled family of the 2nd order as omega shrinks: valley area, kappa, focal spread."""
import argparse
import math
import time

import numpy as np

from newton_sic.hierarchy import Tri, _r1_coefficient, family_report, scale_family_to_circle, tree_valley_area_bound


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--m", type=int, nargs="+", default=[1, 2, 3, 4])
    args = ap.parse_args()
    abc = Tri(np.array([1.0, -0.3]), np.array([1.0, 0.3]), np.array([0.0, 0.0]))
    c = 0.9 * _r1_coefficient(abc, 4) * abc.height
    A, B = abc.M, abc.N
    print(f"{'m':>3} {'omega':>7} {'pairs':>7} {'valley/w^2':>10} {'kappa':>6} {'alpha/|AC|':>10} {'ok':>5} {'s':>6}")
    for m in args.m:
        t0 = time.perf_counter()
        f = scale_family_to_circle(abc, c / math.sqrt(m + 0.5))
        rep = family_report(f, n_samples=4000)
        O = f.pairs.O
        t = np.clip(((O - A) @ (B - A)) / ((B - A) @ (B - A)), 0, 1)
        alpha = np.linalg.norm(O - (A + t[:, None] * (B - A)), axis=1).max() / np.linalg.norm(abc.apex - A)
        print(f"{f.m:3d} {f.omega:7.4f} {len(f.pairs):7d} {tree_valley_area_bound(f.tree) / f.omega ** 2:10.3f} "
              f"{f.pairs.kappa.max():6.3f} {alpha:10.3f} {str(rep.ok):>5} {time.perf_counter() - t0:6.1f}")


if __name__ == "__main__":
    main()
