"""F(u_eps) - phi along an epsilon ladder of composite surfaces on the unit disc."""
import argparse
import time

from newton_sic.assembly import build_composite_surface, verify_composite
from newton_sic.billiard import graph_scene
from newton_sic.domain import make_domain
from newton_sic.resistance import phi_lower_bound, resistance_analytic, resistance_billiard


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--eps", type=float, nargs="+", default=[0.3, 0.15])
    ap.add_argument("--M", type=float, default=1.0)
    ap.add_argument("--m", type=int, default=4)
    ap.add_argument("--n", type=int, default=2)
    ap.add_argument("--samples", type=int, default=4)
    ap.add_argument("--rays", type=int, default=50_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    D = make_domain({"disc": {"center": [0, 0], "radius": 1}})
    phi = phi_lower_bound(D, args.M).value
    print(f"phi = {phi:.5f}")
    print(f"{'eps':>6} {'pairs':>8} {'build_s':>8} {'F':>8} {'errF':>7} {'R':>8} {'errR':>7} {'F-phi':>8} "
          f"{'valley':>7} {'kappa':>6} {'flat':>6}")
    for eps in args.eps:
        t0 = time.perf_counter()
        s = build_composite_surface(D, args.M, eps, args.m, args.n, samples=args.samples, verify=False)
        dt = time.perf_counter() - t0
        met = verify_composite(s, 50_000, args.seed)
        F = resistance_analytic(s, n=200_000, seed=args.seed + 1)
        R = resistance_billiard(graph_scene(s), args.rays, seed=args.seed + 2)
        print(f"{eps:6.3f} {len(s):8d} {dt:8.1f} {F.value:8.4f} {F.error_estimate:7.4f} {R.value:8.4f} "
              f"{R.error_estimate:7.4f} {F.value - phi:8.4f} {met['V_area_mc']:7.3f} {met['kappa_max']:6.3f} "
              f"{met['A_uncovered_fraction']:6.3f}")


if __name__ == "__main__":
    main()
