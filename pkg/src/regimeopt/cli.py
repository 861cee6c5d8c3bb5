"""Command-line front end: ``regimeopt {solve,strategy,simulate,verify,export}``.

Exit status: 0 success, 1 failed check or solver error, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, parse_config
from .dual import (AfterSwitchSolution, BeforeSwitchSolution, DualSolution, NumericalFailure,
                   assemble_dual, solve_dual)
from .market import ModelError
from .simulate import (PATH_DUMP_HEADER, dual_objective_sample, density_path, iter_blocks,
                       map_blocks, mean_se, path_dump_rows, wealth_path_euler)
from .strategy import OptimalStrategy, primal_from_dual, primal_value
from .validation import primal_objective_sample, report_json, report_table, run_suite

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2
SOLUTION_FILE = "solution.npz"
PRIMAL_HEADER = ("t", "psi0", "psi1_diag", "psi_tilde", "value_at_x0")


def write_csv(path: Path, header, rows, precision: int = 17) -> None:
    fmt = f"%.{precision}g"
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(v) if isinstance(v, (int, np.integer)) else fmt % v
                              for v in row) + "\n")


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _primal_rows(dual: DualSolution, x0: float):
    primal = primal_from_dual(dual)
    value = x0**primal.p * primal.psi0 / primal.p
    return np.column_stack([primal.grid_t, primal.psi0, primal.psi1_diag, primal.psi_tilde, value])


def _write_solution_csvs(cfg: RunConfig, dual: DualSolution, out: Path) -> list[Path]:
    prec = cfg.output.csv_precision
    strategy = OptimalStrategy.from_dual(cfg.model, dual)
    files = [(out / "dual_solution.csv", DualSolution.CSV_HEADER, dual.rows()),
             (out / "strategy.csv", OptimalStrategy.CSV_HEADER, strategy.rows()),
             (out / "primal_solution.csv", PRIMAL_HEADER, _primal_rows(dual, cfg.model.x0))]
    for path, header, rows in files:
        write_csv(path, header, rows, prec)
    return [f[0] for f in files]


def save_solution(path: Path, cfg: RunConfig, dual: DualSolution) -> None:
    b, a = dual.before, dual.after
    np.savez_compressed(path, config=np.array(json.dumps(cfg.to_dict(), sort_keys=True)),
                        grid_t=b.grid_t, phi0=b.values, zeta0=b.zeta0, m_floor=b.m_floor,
                        phi1=a.values, diag=a.diag, diag_mid=a.diag_mid, zeta1=a.zeta1,
                        bound=a.bound, p=dual.p)


def load_solution(path: Path) -> tuple[RunConfig, DualSolution]:
    with np.load(path) as z:
        cfg = parse_config(json.loads(str(z["config"])))
        before = BeforeSwitchSolution(z["grid_t"], z["phi0"], z["zeta0"], float(z["m_floor"]))
        after = AfterSwitchSolution(z["grid_t"], z["phi1"], z["diag"], z["diag_mid"], z["zeta1"],
                                    float(z["bound"]))
        return cfg, assemble_dual(before, after, float(z["p"]))


# --------------------------------------------------------------------------
# commands


def cmd_solve(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    dual = solve_dual(cfg.model, cfg.solver.n_steps_ode)
    save_solution(out / SOLUTION_FILE, cfg, dual)
    write_csv(out / "dual_solution.csv", DualSolution.CSV_HEADER, dual.rows(),
              cfg.output.csv_precision)
    phi0 = float(dual.phi0[0])
    print(f"Phi0_0 = {phi0:.17g}")
    print(f"V(x0)  = {primal_value(cfg.model.x0, phi0, cfg.model.p):.17g}")
    return EXIT_OK


def cmd_strategy(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    dual = solve_dual(cfg.model, cfg.solver.n_steps_ode)
    strategy = OptimalStrategy.from_dual(cfg.model, dual)
    rows = strategy.rows()
    write_csv(out / "strategy.csv", OptimalStrategy.CSV_HEADER, rows, cfg.output.csv_precision)
    print(f"eta*     = {strategy.eta_star:.17g}")
    print(f"gamma*_0 = {rows[0, 1]:.17g}")
    print(f"pi*_0    = {rows[0, 2]:.17g}")
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, args) -> int:
    model, sim = cfg.model, cfg.sim
    dual = solve_dual(model, sim.n_steps)
    strategy = OptimalStrategy.from_dual(model, dual)

    def block(paths):
        j = dual_objective_sample(paths, density_path(strategy.gamma, paths, model), model.q)
        return {"dual": j, "primal": primal_objective_sample(strategy, paths)}

    res = map_blocks(block, model, sim)
    d_m, d_se = mean_se(res["dual"])
    p_m, p_se = mean_se(res["primal"])
    phi0 = float(dual.phi0[0])
    print(f"paths={sim.n_paths} steps={sim.n_steps} seed={sim.seed}")
    print(f"dual objective   = {d_m:.10g} (SE {d_se:.3g}); Phi0_0 = {phi0:.10g}")
    print(f"primal objective = {p_m:.10g} (SE {p_se:.3g}); V(x0) = "
          f"{primal_value(model.x0, phi0, model.p):.10g}")
    if args.dump_paths:
        out = _out_dir(cfg)
        paths = next(iter_blocks(model, sim))
        paths.L = density_path(strategy.gamma, paths, model)
        wealth_path_euler(strategy.pi, strategy.c, strategy.x0, paths, model)
        write_csv(out / "paths.csv", PATH_DUMP_HEADER, path_dump_rows(paths),
                  cfg.output.csv_precision)
    return EXIT_OK


def cmd_verify(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    lsmc = {"n_paths": cfg.solver.lsmc.n_paths, "n_steps": cfg.solver.lsmc.n_steps,
            "basis_degree": cfg.solver.lsmc.basis_degree}
    reports = run_suite(cfg.model, cfg.sim, lsmc)
    (out / "verify_report.json").write_text(report_json(reports))
    print(report_table(reports))
    return EXIT_OK if all(r.passed for r in reports) else EXIT_CHECK


def cmd_export(cfg: RunConfig | None, args) -> int:
    out = Path(args.out if args.out else (cfg.output.directory if cfg else "out"))
    stored = out / SOLUTION_FILE
    if not stored.exists():
        raise ConfigError(f"{stored}: no stored solution (run 'solve' first)")
    stored_cfg, dual = load_solution(stored)
    cfg = stored_cfg.with_overrides(out=str(out))
    for path in _write_solution_csvs(cfg, dual, out):
        print(path)
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "strategy": cmd_strategy, "simulate": cmd_simulate,
            "verify": cmd_verify, "export": cmd_export}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="regimeopt", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="JSON run configuration")
    ap.add_argument("--seed", type=int, help="override sim.seed")
    ap.add_argument("--out", help="override output.directory")
    ap.add_argument("--dump-paths", action="store_true",
                    help="simulate: also write the first 100 paths to paths.csv")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError(f"--seed: must be an unsigned 64-bit integer, got {args.seed}")
        cfg = None
        if args.config:
            cfg = load_config(args.config).with_overrides(args.seed, args.out)
        elif args.command != "export":
            raise ConfigError("--config: required for this command")
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFailure, ArithmeticError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
