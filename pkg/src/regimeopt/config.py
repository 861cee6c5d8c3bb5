"""JSON run configuration: parsing, defaults and field-addressed validation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .market import CoefficientFn, MarketModel, ModelError, make_model, validate_model
from .simulate import SimConfig

COEFFICIENTS = ("r0", "r1", "nu", "sigma", "lam")
SECTIONS = ("model", "solver", "sim", "output")


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""


@dataclass(frozen=True)
class LsmcConfig:
    n_paths: int = 50_000
    n_steps: int = 50
    basis_degree: int = 3


@dataclass(frozen=True)
class SolverConfig:
    n_steps_ode: int = 1000
    lsmc: LsmcConfig = field(default_factory=LsmcConfig)


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "out"
    csv_precision: int = 17


@dataclass(frozen=True)
class RunConfig:
    model: MarketModel
    solver: SolverConfig = field(default_factory=SolverConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def with_overrides(self, seed: int | None = None, out: str | None = None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, sim=replace(cfg.sim, seed=seed))
        if out is not None:
            cfg = replace(cfg, output=replace(cfg.output, directory=out))
        return cfg

    def to_dict(self) -> dict:
        m = self.model
        model = {"p": m.p, "T": m.T, "x0": m.x0, "Lambda": m.Lambda, "C": m.C}
        model.update({k: getattr(m, k).to_dict() for k in COEFFICIENTS})
        return {"model": model, "solver": asdict(self.solver), "sim": asdict(self.sim),
                "output": asdict(self.output)}


def _number(value, where: str, integer: bool = False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {type(value).__name__}")
    if integer and not (isinstance(value, int) or float(value).is_integer()):
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    return int(value) if integer else float(value)


def _section(raw: dict, name: str) -> dict:
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"{name}: expected an object")
    return sec


def _unknown(sec: dict, allowed, where: str):
    extra = sorted(set(sec) - set(allowed))
    if extra:
        raise ConfigError(f"{where}.{extra[0]}: unknown field")


def parse_coefficient(entry, where: str) -> CoefficientFn:
    """A bare number or ``{"kind": ..., <payload>}``."""
    if not isinstance(entry, dict):
        return CoefficientFn.constant(_number(entry, where))
    kind = entry.get("kind")
    try:
        if kind == "constant":
            _unknown(entry, ("kind", "value"), where)
            return CoefficientFn.constant(_number(_require(entry, "value", where), f"{where}.value"))
        if kind == "piecewise":
            _unknown(entry, ("kind", "breaks", "values"), where)
            breaks, values = (_require(entry, k, where) for k in ("breaks", "values"))
            for k, seq in (("breaks", breaks), ("values", values)):
                if not isinstance(seq, list):
                    raise ConfigError(f"{where}.{k}: expected a list")
            return CoefficientFn.piecewise(
                [_number(b, f"{where}.breaks[{i}]") for i, b in enumerate(breaks)],
                [_number(v, f"{where}.values[{i}]") for i, v in enumerate(values)])
        if kind == "affine_u":
            _unknown(entry, ("kind", "base", "slope"), where)
            base = parse_coefficient(_require(entry, "base", where), f"{where}.base")
            return CoefficientFn.affine_u(base, _number(_require(entry, "slope", where),
                                                        f"{where}.slope"))
    except ModelError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    raise ConfigError(f"{where}.kind: expected 'constant', 'piecewise' or 'affine_u', got {kind!r}")


def _require(sec: dict, key: str, where: str):
    if key not in sec:
        raise ConfigError(f"{where}.{key}: missing field")
    return sec[key]


def parse_model(sec: dict) -> MarketModel:
    _unknown(sec, ("p", "T", "x0", "Lambda", "C") + COEFFICIENTS, "model")
    p = _number(_require(sec, "p", "model"), "model.p")
    T = _number(_require(sec, "T", "model"), "model.T")
    x0 = _number(sec.get("x0", 1.0), "model.x0")
    if not 0.0 < p < 1.0:
        raise ConfigError(f"model.p: utility exponent must lie in (0, 1), got {p}")
    if not T > 0.0:
        raise ConfigError(f"model.T: horizon must be positive, got {T}")
    if not x0 > 0.0:
        raise ConfigError(f"model.x0: initial wealth must be positive, got {x0}")
    coefs = {k: parse_coefficient(_require(sec, k, "model"), f"model.{k}") for k in COEFFICIENTS}
    for k in ("r0", "nu", "sigma", "lam"):
        if coefs[k].depends_on_u:
            raise ConfigError(f"model.{k}: only r1 may depend on the switch time")
    bounds = {k: None if sec.get(k) is None else _number(sec[k], f"model.{k}")
              for k in ("Lambda", "C")}
    try:
        model = make_model(p, T, x0=x0, **coefs, **bounds)
    except ModelError as exc:
        raise ConfigError(f"model: {exc}") from None
    report = validate_model(model)
    if not report.accepted:
        bad = report.failures()[0]
        raise ConfigError(f"model: hypothesis {bad.name} violated ({bad.detail})")
    return model


def _positive_int(sec: dict, key: str, default: int, where: str) -> int:
    v = _number(sec.get(key, default), f"{where}.{key}", integer=True)
    if v <= 0:
        raise ConfigError(f"{where}.{key}: must be positive, got {v}")
    return v


def parse_config(raw) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>: expected a JSON object")
    _unknown(raw, SECTIONS, "<root>")
    if "model" not in raw:
        raise ConfigError("model: missing section")
    model = parse_model(_section(raw, "model"))

    solver = _section(raw, "solver")
    _unknown(solver, ("n_steps_ode", "lsmc"), "solver")
    lsmc = _section(solver, "lsmc")
    _unknown(lsmc, ("n_paths", "n_steps", "basis_degree"), "solver.lsmc")
    degree = _number(lsmc.get("basis_degree", 3), "solver.lsmc.basis_degree", integer=True)
    if not 0 <= degree <= 6:
        raise ConfigError(f"solver.lsmc.basis_degree: must lie in [0, 6], got {degree}")
    solver_cfg = SolverConfig(
        _positive_int(solver, "n_steps_ode", 1000, "solver"),
        LsmcConfig(_positive_int(lsmc, "n_paths", 50_000, "solver.lsmc"),
                   _positive_int(lsmc, "n_steps", 50, "solver.lsmc"), degree))

    sim = _section(raw, "sim")
    _unknown(sim, ("n_paths", "n_steps", "seed", "antithetic"), "sim")
    seed = _number(sim.get("seed", 42), "sim.seed", integer=True)
    if seed < 0:
        raise ConfigError(f"sim.seed: must be non-negative, got {seed}")
    antithetic = sim.get("antithetic", False)
    if not isinstance(antithetic, bool):
        raise ConfigError("sim.antithetic: expected true or false")
    try:
        sim_cfg = SimConfig(_positive_int(sim, "n_paths", 100_000, "sim"),
                            _positive_int(sim, "n_steps", 252, "sim"), seed, antithetic)
    except ModelError as exc:
        raise ConfigError(f"sim: {exc}") from None

    out = _section(raw, "output")
    _unknown(out, ("directory", "csv_precision"), "output")
    directory = out.get("directory", "out")
    if not isinstance(directory, str) or not directory:
        raise ConfigError("output.directory: expected a non-empty string")
    precision = _number(out.get("csv_precision", 17), "output.csv_precision", integer=True)
    if not 1 <= precision <= 17:
        raise ConfigError(f"output.csv_precision: must lie in [1, 17], got {precision}")
    return RunConfig(model, solver_cfg, sim_cfg, OutputConfig(directory, precision))


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: "
                          f"{exc.msg}") from None
    return parse_config(raw)
