"""Scenario simulation: Brownian paths, switch times, discount factors,
dual densities, wealth and conditional-gain processes.

Paths are generated in fixed-size blocks, each with its own counter-based
(Philox) stream keyed by ``(seed, block index)``. Because the partition does
not depend on the number of workers, results are bit-for-bit reproducible for
a given seed however the blocks are scheduled.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np
from numpy.typing import NDArray

from .dual import DualSolution, NumericalFailure
from .market import MarketModel, ModelError

BLOCK_SIZE = 8192
THREADS_ENV = "REGIMEOPT_THREADS"


@dataclass(frozen=True)
class SimConfig:
    n_paths: int = 100_000
    n_steps: int = 252
    seed: int = 42
    antithetic: bool = False

    def __post_init__(self):
        if self.n_steps < 2:
            raise ModelError("n_steps must be at least 2")
        if self.n_paths < 1:
            raise ModelError("n_paths must be at least 1")
        if not (0 <= self.seed < 2**64):
            raise ModelError("seed must be an unsigned 64-bit integer")


def worker_count() -> int:
    cap = os.environ.get(THREADS_ENV)
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ModelError(f"{THREADS_ENV} must be an integer, got {cap!r}") from None
    return n


# --------------------------------------------------------------------------
# switch time


def _intensity_nodes(model: MarketModel):
    bp = model.lam.breakpoints()
    nodes = np.concatenate([[0.0], bp[(bp > 0.0) & (bp < model.T)], [model.T]])
    lam_seg = model.lam(nodes[:-1])
    cum = np.concatenate([[0.0], np.cumsum(lam_seg * np.diff(nodes))])
    return nodes, lam_seg, cum


def cumulative_intensity(model: MarketModel, t) -> NDArray[np.float64]:
    """``int_0^t lam ds`` (exact for the supported coefficient families)."""
    nodes, _, cum = _intensity_nodes(model)
    return np.interp(np.minimum(t, model.T), nodes, cum)


def simulate_default_time(model: MarketModel, draws) -> NDArray[np.float64]:
    """Invert the cumulative intensity at unit-exponential ``draws``.

    Returns ``inf`` where the draw exceeds the intensity mass on ``[0, T]``.
    """
    e = np.asarray(draws, dtype=float)
    if np.any(e <= 0.0):
        raise ModelError("exponential draws must be positive")
    nodes, lam_seg, cum = _intensity_nodes(model)
    idx = np.clip(np.searchsorted(cum, e, side="left") - 1, 0, lam_seg.size - 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = nodes[idx] + (e - cum[idx]) / lam_seg[idx]
    return np.where(e > cum[-1], np.inf, tau)


# --------------------------------------------------------------------------
# paths


@dataclass
class PathBundle:
    """A batch of simulated scenarios sharing one time grid.

    ``switch_idx[p]`` is the first grid index with ``t >= tau`` (``n + 1``
    when there is no switch before ``T``); ``H``, the prevailing rate and
    premium, and the discount factor all change regime from that index.
    ``lam_dt[p, k]`` is the intensity mass of step ``k`` strictly before the
    switch, i.e. ``lam(t_k) * |[t_k, t_{k+1}) n [0, tau)|``.
    """

    t: NDArray[np.float64]
    path_id: NDArray[np.int64]
    dB: NDArray[np.float64]
    B: NDArray[np.float64]
    tau: NDArray[np.float64]
    switch_idx: NDArray[np.int64]
    H: NDArray[np.float64]
    r: NDArray[np.float64]
    theta: NDArray[np.float64]
    nu: NDArray[np.float64]
    sigma: NDArray[np.float64]
    R: NDArray[np.float64]
    lam_dt: NDArray[np.float64]
    L: NDArray[np.float64] | None = None
    X: NDArray[np.float64] | None = None

    @property
    def n_paths(self) -> int:
        return self.B.shape[0]

    @property
    def n_steps(self) -> int:
        return self.t.size - 1

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def state(self, i: int) -> "PathState":
        return PathState(self, i)


class PathState:
    """Cross-section of a :class:`PathBundle` at grid index ``i``.

    Control evaluators receive this object; all attributes are per-path arrays.
    """

    __slots__ = ("paths", "i")

    def __init__(self, paths: PathBundle, i: int):
        self.paths = paths
        self.i = i

    @property
    def t(self) -> float:
        return float(self.paths.t[self.i])

    @property
    def B(self):
        return self.paths.B[:, self.i]

    @property
    def H(self):
        return self.paths.H[:, self.i]

    @property
    def R(self):
        return self.paths.R[:, self.i]

    @property
    def L(self):
        return None if self.paths.L is None else self.paths.L[:, self.i]

    @property
    def X(self):
        return None if self.paths.X is None else self.paths.X[:, self.i]

    @property
    def theta(self):
        return self.paths.theta[:, self.i]

    @property
    def sigma(self):
        return self.paths.sigma[self.i]

    @property
    def switch_idx(self):
        return self.paths.switch_idx


Evaluator = Callable[[PathState], "NDArray[np.float64] | float"]


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block,))))


def _block_sizes(sim: SimConfig) -> list[int]:
    full, rest = divmod(sim.n_paths, BLOCK_SIZE)
    return [BLOCK_SIZE] * full + ([rest] if rest else [])


def _simulate_block(model: MarketModel, sim: SimConfig, block: int, size: int) -> PathBundle:
    n = sim.n_steps
    t = np.linspace(0.0, model.T, n + 1)
    dt = t[1] - t[0]
    rng = _block_rng(sim.seed, block)
    if sim.antithetic:
        half = (size + 1) // 2
        z = rng.standard_normal((half, n))
        z = np.concatenate([z, -z], axis=0)[:size]
    else:
        z = rng.standard_normal((size, n))
    dB = z * np.sqrt(dt)
    B = np.zeros((size, n + 1))
    np.cumsum(dB, axis=1, out=B[:, 1:])

    tau = simulate_default_time(model, rng.standard_exponential(size))
    switch_idx = np.where(np.isfinite(tau), np.ceil(tau / dt - 1e-12), n + 1).astype(np.int64)
    switch_idx = np.minimum(switch_idx, n + 1)
    H = (np.arange(n + 1)[None, :] >= switch_idx[:, None]).astype(float)

    u_hat = np.where(switch_idx <= n, t[np.minimum(switch_idx, n)], model.T)
    r0, nu, sigma = model.r0(t), model.nu(t), model.sigma(t)
    r1 = model.r1(t[None, :], u_hat[:, None])
    r = np.where(H > 0.0, r1, r0[None, :])
    theta = (nu[None, :] - r) / sigma[None, :]
    log_R = np.zeros((size, n + 1))
    np.cumsum(0.5 * (r[:, :-1] + r[:, 1:]) * dt, axis=1, out=log_R[:, 1:])
    R = np.exp(-log_R)

    exposure = np.clip(tau[:, None] - t[None, :-1], 0.0, dt)
    lam_dt = model.lam(t[:-1])[None, :] * exposure

    start = block * BLOCK_SIZE
    return PathBundle(t, np.arange(start, start + size), dB, B, tau, switch_idx, H, r, theta,
                      nu, sigma, R, lam_dt)


def iter_blocks(model: MarketModel, sim: SimConfig) -> Iterator[PathBundle]:
    for b, size in enumerate(_block_sizes(sim)):
        yield _simulate_block(model, sim, b, size)


def map_blocks(fn: Callable[[PathBundle], dict], model: MarketModel, sim: SimConfig) -> dict:
    """Apply ``fn`` to every block and concatenate its per-path outputs in block order."""
    sizes = _block_sizes(sim)

    def work(b):
        return fn(_simulate_block(model, sim, b, sizes[b]))

    workers = min(worker_count(), len(sizes))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(work, range(len(sizes))))
    else:
        parts = [work(b) for b in range(len(sizes))]
    return {k: np.concatenate([part[k] for part in parts]) for k in parts[0]}


def simulate_paths(model: MarketModel, sim: SimConfig) -> PathBundle:
    """All paths of ``sim`` in one bundle (use :func:`map_blocks` for large runs)."""
    blocks = list(iter_blocks(model, sim))
    if len(blocks) == 1:
        return blocks[0]
    cat = {f: np.concatenate([getattr(b, f) for b in blocks])
           for f in ("path_id", "dB", "B", "tau", "switch_idx", "H", "r", "theta", "R", "lam_dt")}
    b0 = blocks[0]
    return PathBundle(b0.t, cat["path_id"], cat["dB"], cat["B"], cat["tau"], cat["switch_idx"],
                      cat["H"], cat["r"], cat["theta"], b0.nu, b0.sigma, cat["R"], cat["lam_dt"])


# --------------------------------------------------------------------------
# processes along paths


def _as_paths(values, n_paths):
    return np.broadcast_to(np.asarray(values, dtype=float), (n_paths,))


def gamma_matrix(gamma: Evaluator, paths: PathBundle) -> NDArray[np.float64]:
    """Pre-switch control values at every grid index, shape ``(P, n+1)``."""
    return np.stack([_as_paths(gamma(paths.state(i)), paths.n_paths)
                     for i in range(paths.n_steps + 1)], axis=1)


def density_path(gamma: Evaluator, paths: PathBundle, model: MarketModel | None = None) -> NDArray[np.float64]:
    """Density ``L^gamma`` of an equivalent martingale measure along each path.

    ``gamma`` gives the pre-switch control; it acts on the compensator up to
    ``tau`` and on the jump, and is ignored afterwards. On step ``k`` the
    left-point value ``gamma_k`` drives both, so the discrete density is an
    exact martingale in the jump component.
    """
    n = paths.n_steps
    P = paths.n_paths
    G = gamma_matrix(gamma, paths)
    j = paths.switch_idx
    rows = np.arange(P)
    live = np.arange(n + 1)[None, :] < j[:, None]
    jump_gamma = G[rows, np.clip(j - 1, 0, n)]
    if np.any(G[live] <= -1.0) or np.any(jump_gamma[j <= n] <= -1.0):
        raise ModelError("inadmissible dual control: gamma <= -1 before the switch")

    th = paths.theta[:, :-1]
    incr = -th * paths.dB - 0.5 * th**2 * paths.dt - G[:, :-1] * paths.lam_dt
    log_L = np.zeros((P, n + 1))
    np.cumsum(incr, axis=1, out=log_L[:, 1:])
    jumped = j <= n
    log_L += np.where(paths.H > 0.0, np.log1p(np.where(jumped, jump_gamma, 0.0))[:, None], 0.0)
    return np.exp(log_L)


def density_path_euler(gamma: Evaluator, paths: PathBundle) -> NDArray[np.float64]:
    """Euler re-integration of ``dL = L-(-theta dB + gamma dM)`` (consistency check)."""
    n = paths.n_steps
    G = gamma_matrix(gamma, paths)
    j = paths.switch_idx
    L = np.ones((paths.n_paths, n + 1))
    for k in range(n):
        g = np.where(k < j, G[:, k], 0.0)
        jump = (j == k + 1).astype(float)
        L[:, k + 1] = L[:, k] * (1.0 - paths.theta[:, k] * paths.dB[:, k]
                                 + g * (jump - paths.lam_dt[:, k]))
    return L


def wealth_path_euler(pi: Evaluator, c: Evaluator, x0: float, paths: PathBundle,
                      model: MarketModel | None = None):
    """Explicit Euler for the self-financing wealth equation.

    Returns ``(X, admissible)``. Paths whose wealth hits zero or below are
    flagged inadmissible, never clamped. ``paths.X`` is filled in as the
    recursion advances so feedback controls can read it.
    """
    if not x0 > 0.0:
        raise ModelError("initial wealth must be positive")
    n, dt = paths.n_steps, paths.dt
    X = np.empty((paths.n_paths, n + 1))
    X[:, 0] = x0
    paths.X = X
    for k in range(n):
        st = paths.state(k)
        pk = _as_paths(pi(st), paths.n_paths)
        ck = _as_paths(c(st), paths.n_paths)
        rk = paths.r[:, k]
        drift = rk + pk * (paths.nu[k] - rk)
        X[:, k + 1] = X[:, k] + X[:, k] * (drift * dt + pk * paths.sigma[k] * paths.dB[:, k]) - ck * dt
    if not np.all(np.isfinite(X)):
        raise NumericalFailure("wealth recursion produced non-finite values")
    admissible = np.all(X > 0.0, axis=1)
    return X, admissible


def _cumtrapz(y, dt):
    out = np.zeros_like(y)
    np.cumsum(0.5 * (y[:, :-1] + y[:, 1:]) * dt, axis=1, out=out[:, 1:])
    return out


def dual_gain_path(gamma: Evaluator, dual: DualSolution, paths: PathBundle,
                   model: MarketModel, L=None) -> NDArray[np.float64]:
    """Conditional gains ``int_0^t (RL)^q ds + (R_t L_t)^q Phi_t`` along each path."""
    if dual.n_steps != paths.n_steps:
        raise ModelError("grid mismatch between dual solution and simulated paths")
    if L is None:
        L = density_path(gamma, paths, model)
    w = (paths.R * L) ** model.q
    phi = np.stack([dual.phi(i, paths.switch_idx) for i in range(paths.n_steps + 1)], axis=1)
    return _cumtrapz(w, paths.dt) + w * phi


def dual_objective_sample(paths: PathBundle, L, q: float) -> NDArray[np.float64]:
    w = (paths.R * L) ** q
    return _cumtrapz(w, paths.dt)[:, -1] + w[:, -1]


def mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size)) if x.size > 1 else 0.0


def dual_objective_mc(gamma: Evaluator, model: MarketModel, sim: SimConfig) -> tuple[float, float]:
    """Monte Carlo ``E[int_0^T (R L)^q ds + (R_T L_T)^q]`` with its standard error."""
    if sim.n_paths < 100:
        raise ModelError("n_paths < 100 is statistically meaningless")

    def block(paths):
        return {"j": dual_objective_sample(paths, density_path(gamma, paths, model), model.q)}

    return mean_se(map_blocks(block, model, sim)["j"])


PATH_DUMP_HEADER = ("path_id", "t", "B", "H", "R", "L", "X")


def path_dump_rows(paths: PathBundle, max_paths: int = 100):
    """Rows for the debugging CSV ``path_id, t, B, H, R, L, X`` (NaN if absent)."""
    k = min(max_paths, paths.n_paths)
    nanm = np.full((k, paths.n_steps + 1), np.nan)
    L = paths.L[:k] if paths.L is not None else nanm
    X = paths.X[:k] if paths.X is not None else nanm
    for a in range(k):
        for i in range(paths.n_steps + 1):
            yield (int(paths.path_id[a]), paths.t[i], paths.B[a, i], paths.H[a, i],
                   paths.R[a, i], L[a, i], X[a, i])
