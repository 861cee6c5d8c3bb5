"""How the switch intensity and the post-switch rate move gamma*, pi* and V.

Sweeps lambda and r1 on the reference market and prints Phi0_0, V(1),
gamma*_0 and the initial stock weight.
"""

import argparse

import numpy as np

from regimeopt import OptimalStrategy, make_model, primal_value, solve_dual


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--p", type=float, default=0.5)
    ap.add_argument("--steps", type=int, default=1000)
    args = ap.parse_args()
    print(f"{'lambda':>7} {'r1':>6} {'Phi0_0':>10} {'V(1)':>10} {'gamma*_0':>10} {'pi*_0':>8}")
    for lam in (0.0, 0.3, 1.0, 3.0):
        for r1 in (0.0, 0.02, 0.05, 0.10):
            m = make_model(p=args.p, T=1.0, r0=0.02, r1=r1, nu=0.07, sigma=0.25, lam=lam)
            d = solve_dual(m, args.steps)
            rows = OptimalStrategy.from_dual(m, d).rows()
            V = primal_value(1.0, float(d.phi0[0]), m.p)
            print(f"{lam:>7.2f} {r1:>6.2f} {d.phi0[0]:>10.6f} {V:>10.6f} "
                  f"{rows[0, 1]:>10.6f} {rows[0, 2]:>8.4f}")
        print()
    assert np.isfinite(V)


if __name__ == "__main__":
    main()
