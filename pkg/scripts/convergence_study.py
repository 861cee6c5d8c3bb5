"""Convergence rates of the deterministic solvers and the Euler wealth scheme.

Prints error tables: RK4 for Phi0 (fourth order), LSMC bias against RK4 as the
time step shrinks, and the Euler-vs-closed-form wealth gap (strong order 1/2).
"""

import argparse

import numpy as np

from regimeopt import OptimalStrategy, SimConfig, reference_model, solve_dual
from regimeopt.dual import solve_phi0_lsmc
from regimeopt.simulate import density_path, map_blocks, wealth_path_euler


def rk4_table(model):
    exact = solve_dual(model, 8000).phi0[0]
    print("RK4 Phi0_0 error")
    print(f"{'n_steps':>8} {'error':>12} {'ratio':>8}")
    prev = None
    for n in (10, 20, 40, 80, 160):
        err = abs(solve_dual(model, n).phi0[0] - exact)
        print(f"{n:>8} {err:>12.3e} {'' if prev is None else f'{prev / err:8.2f}'}")
        prev = err


def lsmc_table(model, n_paths, seed):
    dual = solve_dual(model, 1000)
    print("\nLSMC Phi0_0 relative error (degree 3)")
    print(f"{'n_steps':>8} {'rel_err':>12}")
    for n in (5, 10, 25, 50, 100):
        est = solve_phi0_lsmc(model, dual.after, n_paths, n, 3, seed).values[0]
        print(f"{n:>8} {est / dual.phi0[0] - 1:>12.3e}")


def euler_table(model, n_paths, seed):
    print("\nEuler wealth: mean max relative gap to closed form")
    print(f"{'n_steps':>8} {'gap':>12} {'ratio':>8}")
    prev = None
    for n in (63, 126, 252, 504):
        dual = solve_dual(model, n)
        strat = OptimalStrategy.from_dual(model, dual)

        def block(paths):
            paths.L = density_path(strat.gamma, paths, model)
            X, _ = wealth_path_euler(strat.pi, strat.c, strat.x0, paths, model)
            return {"gap": np.max(np.abs(X / strat.wealth(paths) - 1.0), axis=1)}

        gap = map_blocks(block, model, SimConfig(n_paths, n, seed))["gap"].mean()
        print(f"{n:>8} {gap:>12.4e} {'' if prev is None else f'{prev / gap:8.3f}'}")
        prev = gap


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=4000)
    ap.add_argument("--lsmc-paths", type=int, default=50_000)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()
    model = reference_model()
    rk4_table(model)
    lsmc_table(model, args.lsmc_paths, args.seed)
    euler_table(model, args.paths, args.seed)


if __name__ == "__main__":
    main()
