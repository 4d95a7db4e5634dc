"""R(B_eps) of the double impact body on the unit disc against the explicit bound."""
import argparse
import time

from newton_sic.dic_body import build_dic_body, dic_verify
from newton_sic.domain import make_domain


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--eps", type=float, nargs="+", default=[0.2, 0.1, 0.05])
    ap.add_argument("--M", type=float, default=1.0)
    ap.add_argument("--rays", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    D = make_domain({"disc": {"center": [0, 0], "radius": 1}})
    print(f"{'eps':>6} {'foci':>6} {'build_s':>8} {'R':>8} {'err':>7} {'bound':>8} {'worst_v3':>9} histogram")
    for eps in args.eps:
        t0 = time.perf_counter()
        body = build_dic_body(D, args.M, eps)
        dt = time.perf_counter() - t0
        r = dic_verify(body, args.rays, args.seed, raise_on_violation=False)
        print(f"{eps:6.3f} {len(body.foci):6d} {dt:8.1f} {r.resistance:8.4f} {r.error:7.4f} {r.bound:8.4f} "
              f"{r.worst_exit_v3:9.4f} {r.histogram}")


if __name__ == "__main__":
    main()
