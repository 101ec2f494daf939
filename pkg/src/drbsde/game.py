"""Mixed zero-sum stochastic differential game (controls plus stopping).

Player 1 picks ``(u, tau)`` and minimises, player 2 picks ``(v, sigma)`` and
maximises

    J = E^{u,v}[ int_0^{tau^sigma} h ds + L_sigma 1{sigma <= tau, sigma < T}
                 + U_tau 1{tau < sigma} + xi 1{tau ^ sigma = T} ].

Controls live on finite grids. The value is the first component of the
doubly reflected BSDE driven by the saddle Hamiltonian
``H*(t, x, z) = inf_u sup_v [z sigma^{-1} phi(t, x, u, v) + h(t, x, u, v)]``.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .bsde_lsmc import RegressionBasis, solve_double_barrier_direct
from .core import (BarrierPair, DrbsdeError, GeneratorSpec, SolutionQuadruple,
                   TerminalCondition)
from .forward_sde import PathEnsemble, SdeSpec, brownian
from . import registry


@dataclass(frozen=True)
class GameSpec:
    """``phi(t, x, u, v) -> (M, d)`` and ``h_run(t, x, u, v) -> (M,)`` take a
    batch of states ``x`` and single grid elements ``u``, ``v``."""

    sde: SdeSpec
    phi: Callable
    h_run: Callable
    Ugrid: Sequence
    Vgrid: Sequence
    barriers: BarrierPair
    terminal: TerminalCondition
    growth_K: float = np.inf
    name: str = "custom"

    def __post_init__(self):
        if len(self.Ugrid) == 0 or len(self.Vgrid) == 0:
            raise DrbsdeError("control grids must be non-empty")

    def drift(self, t, x, a, b):
        return np.broadcast_to(np.asarray(self.phi(t, x, self.Ugrid[a], self.Vgrid[b]),
                                          dtype=float), x.shape)

    def reward(self, t, x, a, b):
        return np.broadcast_to(np.asarray(self.h_run(t, x, self.Ugrid[a], self.Vgrid[b]),
                                          dtype=float), (x.shape[0],))

    def check(self, t: float, x: np.ndarray) -> dict:
        """Spot-check linear growth of ``|h| + |phi|`` and the size of ``sigma^{-1}``."""
        x = np.atleast_2d(x)
        worst = 0.0
        for a in range(len(self.Ugrid)):
            for b in range(len(self.Vgrid)):
                g = np.abs(self.reward(t, x, a, b)) + np.linalg.norm(self.drift(t, x, a, b), axis=1)
                worst = max(worst, float(np.max(g / (1 + np.linalg.norm(x, axis=1)))))
        sinv = np.linalg.norm(self.sde.sigma_inv(t, x), ord=2, axis=(1, 2))
        return {"growth_ratio_max": worst, "growth_ok": worst <= self.growth_K,
                "sigma_inv_max": float(np.max(sinv))}


@dataclass
class SaddleResult:
    H_star: np.ndarray
    u_idx: np.ndarray
    v_idx: np.ndarray
    isaacs_gap: np.ndarray


def hamiltonian_table(spec: GameSpec, t: float, x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """``H[a, b, m]`` for every control pair on a batch of states."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    z = np.asarray(z, dtype=float).reshape(x.shape[0], -1)
    sinv = spec.sde.sigma_inv(t, x)
    zs = np.einsum("mi,mij->mj", z, sinv)
    H = np.empty((len(spec.Ugrid), len(spec.Vgrid), x.shape[0]))
    for a in range(len(spec.Ugrid)):
        for b in range(len(spec.Vgrid)):
            H[a, b] = np.einsum("mj,mj->m", zs, spec.drift(t, x, a, b)) + spec.reward(t, x, a, b)
    return H


def hamiltonian_saddle(spec: GameSpec, t: float, x, z) -> SaddleResult:
    """Brute-force ``inf_u sup_v H`` with lowest-index tie-breaks."""
    H = hamiltonian_table(spec, t, x, z)
    upper = H.max(axis=1)                      # (nu, M)
    u_idx = upper.argmin(axis=0)
    m = np.arange(H.shape[2])
    v_idx = H[u_idx, :, m].argmax(axis=1)
    H_star = upper[u_idx, m]
    supinf = H.min(axis=0).max(axis=0)
    return SaddleResult(H_star, u_idx, v_idx, H_star - supinf)


def game_generator(spec: GameSpec) -> GeneratorSpec:
    def driver(t, x, y, z):
        return hamiltonian_saddle(spec, t, x, z).H_star
    return GeneratorSpec(driver, name=f"hamiltonian_{spec.name}")


@dataclass
class GameSolution:
    sol: SolutionQuadruple
    u_idx: np.ndarray   # (M, N)
    v_idx: np.ndarray   # (M, N)
    isaacs_gap_max: float


def solve_game_bsde(spec: GameSpec, ens: PathEnsemble,
                    basis: Optional[RegressionBasis] = None) -> GameSolution:
    """Reflected BSDE with driver ``H*``; records ``u*``, ``v*`` along it."""
    # H* grows linearly in z, so the log-growth probe is not applicable here
    sol = solve_double_barrier_direct(game_generator(spec), spec.terminal, spec.barriers,
                                      ens, basis, check_generator=False)
    M, N = ens.M, ens.grid.N
    u_idx = np.empty((M, N), dtype=int)
    v_idx = np.empty((M, N), dtype=int)
    gap = 0.0
    t = ens.grid.nodes
    for i in range(N):
        s = hamiltonian_saddle(spec, t[i], ens.X[:, i], sol.Z[:, i])
        u_idx[:, i], v_idx[:, i] = s.u_idx, s.v_idx
        gap = max(gap, float(np.max(np.abs(s.isaacs_gap))))
    return GameSolution(sol, u_idx, v_idx, gap)


def default_tol_hit(barriers: BarrierPair, ens: PathEnsemble) -> float:
    lo, hi = barriers.values(0.0, ens.X[:, 0])
    width = hi - lo
    width = width[np.isfinite(width)]
    return 1e-6 * (float(np.median(width)) if width.size else 1.0)


def saddle_stopping_times(sol: SolutionQuadruple, barriers: BarrierPair, ens: PathEnsemble,
                          tol_hit: Optional[float] = None) -> tuple[np.ndarray, np.ndarray]:
    """First node where ``Y`` touches ``U`` (tau*) and ``L`` (sigma*); ``N`` if never."""
    if tol_hit is None:
        tol_hit = default_tol_hit(barriers, ens)
    N = ens.grid.N
    t = ens.grid.nodes
    tau = np.full(ens.M, N)
    sigma = np.full(ens.M, N)
    for i in range(N, -1, -1):
        lo, hi = barriers.values(t[i], ens.X[:, i])
        Y = sol.Y[:, i]
        sigma = np.where(Y <= lo + tol_hit, i, sigma)
        tau = np.where(Y >= hi - tol_hit, i, tau)
    return tau, sigma


@dataclass
class StrategyProfile:
    u_idx: np.ndarray   # (M, N) indices into Ugrid
    v_idx: np.ndarray   # (M, N) indices into Vgrid
    tau: np.ndarray     # (M,) stopping node of the minimiser
    sigma: np.ndarray   # (M,) stopping node of the maximiser

    def __post_init__(self):
        self.tau = np.asarray(self.tau, dtype=int)
        self.sigma = np.asarray(self.sigma, dtype=int)

    @classmethod
    def from_policies(cls, spec: GameSpec, ens: PathEnsemble, Z: np.ndarray,
                      u_policy: Callable, v_policy: Callable, tau, sigma):
        """Evaluate feedback maps ``(t, x, z) -> grid index`` along the paths."""
        t = ens.grid.nodes
        M, N = ens.M, ens.grid.N
        u = np.empty((M, N), dtype=int)
        v = np.empty((M, N), dtype=int)
        for i in range(N):
            u[:, i] = u_policy(t[i], ens.X[:, i], Z[:, i])
            v[:, i] = v_policy(t[i], ens.X[:, i], Z[:, i])
        prof = cls(u, v, tau, sigma)
        prof.validate(spec, N)
        return prof

    def validate(self, spec: GameSpec, N: int) -> None:
        if self.u_idx.min() < 0 or self.u_idx.max() >= len(spec.Ugrid):
            raise DrbsdeError("u policy leaves the control grid")
        if self.v_idx.min() < 0 or self.v_idx.max() >= len(spec.Vgrid):
            raise DrbsdeError("v policy leaves the control grid")
        if self.tau.min() < 0 or self.tau.max() > N or self.sigma.min() < 0 or self.sigma.max() > N:
            raise DrbsdeError("stopping indices must lie in [0, N]")


def _pairwise(spec, t, x, u_idx, v_idx, fn):
    out = np.zeros((x.shape[0],) + (() if fn == "reward" else (x.shape[1],)))
    for a in np.unique(u_idx):
        for b in np.unique(v_idx):
            m = (u_idx == a) & (v_idx == b)
            if m.any():
                f = spec.reward if fn == "reward" else spec.drift
                out[m] = f(t, x[m], a, b)
    return out


@dataclass
class WeightReport:
    weights: np.ndarray
    mean: float
    SE: float
    flagged: np.ndarray


def girsanov_weight(spec: GameSpec, ens: PathEnsemble, u_idx, v_idx,
                    log_cap: float = 700.0) -> WeightReport:
    """Discrete stochastic exponential ``exp(sum theta dB - 0.5 sum |theta|^2 dt)``
    with ``theta = sigma^{-1} phi``."""
    t = ens.grid.nodes
    dt = ens.grid.dt
    logw = np.zeros(ens.M)
    for i in range(ens.grid.N):
        x = ens.X[:, i]
        phi = _pairwise(spec, t[i], x, u_idx[:, i], v_idx[:, i], "drift")
        theta = np.einsum("mij,mj->mi", spec.sde.sigma_inv(t[i], x), phi)
        logw += np.einsum("mi,mi->m", theta, ens.dB[:, i]) - 0.5 * dt * np.sum(theta ** 2, axis=1)
    flagged = np.flatnonzero(logw > log_cap)
    if flagged.size:
        warnings.warn(f"{flagged.size} Girsanov weights overflow; use a smaller T or bounded phi",
                      RuntimeWarning, stacklevel=2)
    w = np.exp(np.minimum(logw, log_cap))
    return WeightReport(w, float(w.mean()), float(w.std(ddof=1) / np.sqrt(ens.M)) if ens.M > 1 else 0.0,
                        flagged)


@dataclass
class PayoffEstimate:
    J: float
    SE: float
    per_path: np.ndarray


def payoff_estimate(spec: GameSpec, ens: PathEnsemble, profile: StrategyProfile,
                    weights: Optional[np.ndarray] = None) -> PayoffEstimate:
    N = ens.grid.N
    t = ens.grid.nodes
    dt = ens.grid.dt
    tau, sigma = profile.tau, profile.sigma
    stop = np.minimum(tau, sigma)
    running = np.zeros(ens.M)
    for i in range(N):
        alive = stop > i
        if alive.any():
            running[alive] += dt * _pairwise(spec, t[i], ens.X[alive, i],
                                             profile.u_idx[alive, i], profile.v_idx[alive, i],
                                             "reward")
    rows = np.arange(ens.M)
    xs = ens.X[rows, stop]
    final = spec.terminal(ens.X[:, N])
    lower_hit = (sigma <= tau) & (sigma < N)
    upper_hit = tau < sigma
    reward = np.where(stop == N, final, 0.0)
    for i in np.unique(stop[lower_hit | upper_hit]):
        m = stop == i
        lo, hi = spec.barriers.values(t[i], xs[m])
        reward[m] = np.where(lower_hit[m], lo, np.where(upper_hit[m], hi, reward[m]))
    if weights is None:
        weights = girsanov_weight(spec, ens, profile.u_idx, profile.v_idx).weights
    G = weights * (running + reward)
    se = float(G.std(ddof=1) / np.sqrt(ens.M)) if ens.M > 1 else 0.0
    return PayoffEstimate(float(G.mean()), se, G)


@dataclass
class SaddleReport:
    Y0: float
    J_star: float
    SE: float
    isaacs_gap_max: float
    lower_side: list = field(default_factory=list)   # (v, sigma) perturbed
    upper_side: list = field(default_factory=list)   # (u, tau) perturbed
    tau_hist: list = field(default_factory=list)
    sigma_hist: list = field(default_factory=list)

    @property
    def violations_lower(self) -> int:
        return sum(1 for r in self.lower_side if r["violation"])

    @property
    def violations_upper(self) -> int:
        return sum(1 for r in self.upper_side if r["violation"])

    @property
    def value_gap(self) -> float:
        return abs(self.J_star - self.Y0)

    def to_json(self) -> dict:
        return {"Y0": self.Y0, "J_star": self.J_star, "SE": self.SE,
                "isaacs_gap_max": self.isaacs_gap_max,
                "violations_lower": self.violations_lower,
                "violations_upper": self.violations_upper,
                "tau_hist": self.tau_hist, "sigma_hist": self.sigma_hist,
                "perturbations_lower": self.lower_side,
                "perturbations_upper": self.upper_side}

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        return path


def _perturb(rng, idx, n_grid, N, star_stop, kind):
    M = idx.shape[0]
    p = rng.uniform(0.3, 1.0)
    mask = rng.random(idx.shape) < p
    new_idx = np.where(mask, rng.integers(0, n_grid, idx.shape), idx)
    if kind == 0:
        stop = star_stop.copy()
    elif kind == 1:
        stop = rng.integers(0, N + 1, M)
    elif kind == 2:
        stop = np.full(M, N)
    else:
        stop = np.minimum(star_stop, rng.integers(0, N + 1, M))
    return new_idx, stop


def verify_saddle(spec: GameSpec, ens: PathEnsemble, star: StrategyProfile, Y0: float,
                  perturbations: int = 10, seed: int = 0, n_se: float = 3.0,
                  isaacs_gap_max: float = 0.0) -> SaddleReport:
    """Check ``J(u*, tau*; v, sigma) <= J* <= J(u, tau; v*, sigma*)`` under
    random perturbations of one player at a time."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    N = ens.grid.N
    star_est = payoff_estimate(spec, ens, star)
    rep = SaddleReport(Y0, star_est.J, star_est.SE, isaacs_gap_max,
                       tau_hist=np.bincount(star.tau, minlength=N + 1).tolist(),
                       sigma_hist=np.bincount(star.sigma, minlength=N + 1).tolist())
    for k in range(perturbations):
        v, sig = _perturb(rng, star.v_idx, len(spec.Vgrid), N, star.sigma, k % 4)
        est = payoff_estimate(spec, ens, StrategyProfile(star.u_idx, v, star.tau, sig))
        band = n_se * np.hypot(est.SE, star_est.SE)
        rep.lower_side.append({"J": est.J, "SE": est.SE, "kind": k % 4,
                               "violation": bool(est.J > star_est.J + band)})
        u, tau = _perturb(rng, star.u_idx, len(spec.Ugrid), N, star.tau, k % 4)
        est = payoff_estimate(spec, ens, StrategyProfile(u, star.v_idx, tau, star.sigma))
        band = n_se * np.hypot(est.SE, star_est.SE)
        rep.upper_side.append({"J": est.J, "SE": est.SE, "kind": k % 4,
                               "violation": bool(star_est.J > est.J + band)})
    return rep


def star_profile(spec: GameSpec, ens: PathEnsemble, gs: GameSolution,
                 tol_hit: Optional[float] = None) -> StrategyProfile:
    tau, sigma = saddle_stopping_times(gs.sol, spec.barriers, ens, tol_hit)
    return StrategyProfile(gs.u_idx, gs.v_idx, tau, sigma)


# built-in games -------------------------------------------------------------

def zero_game(x0=0.0) -> GameSpec:
    return GameSpec(brownian(1, x0), lambda t, x, u, v: np.zeros_like(x),
                    lambda t, x, u, v: np.zeros(x.shape[0]), [0.0], [0.0],
                    registry.const_barrier(-1.0, 1.0), registry.constant_terminal(0.0),
                    growth_K=1.0, name="zero-game")


def running_reward_game(rate=1.0, x0=0.0) -> GameSpec:
    """Control-free game paying ``rate`` per unit time, slack barriers."""
    return GameSpec(brownian(1, x0), lambda t, x, u, v: np.zeros_like(x),
                    lambda t, x, u, v: np.full(x.shape[0], rate), [0.0], [0.0],
                    registry.const_barrier(-10.0, 10.0), registry.constant_terminal(0.0),
                    growth_K=abs(rate), name="running-reward")


def stopping_game(lo=-1.0, hi=1.0, width=0.3, x0=0.0) -> GameSpec:
    """Control-free Dynkin game with barriers ``clamp(x) -/+ width``."""
    return GameSpec(brownian(1, x0), lambda t, x, u, v: np.zeros_like(x),
                    lambda t, x, u, v: np.zeros(x.shape[0]), [0.0], [0.0],
                    registry.clamp_band(lo, hi, width), registry.clamp_terminal(lo, hi),
                    growth_K=1.0, name="stopping-game")


def symmetric_game(x0=0.0) -> GameSpec:
    """``phi = u + v``, ``h = -u^2 + v^2`` on ``{-1, 0, 1}`` with slack barriers."""
    return GameSpec(brownian(1, x0), lambda t, x, u, v: np.full_like(x, u + v),
                    lambda t, x, u, v: np.full(x.shape[0], -u * u + v * v),
                    [-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0],
                    registry.const_barrier(-1.0, 1.0), registry.clamp_terminal(-1.0, 1.0),
                    growth_K=3.0, name="symmetric-game")


def benchmark_game(a=0.25, b=0.5, width=0.3, x0=0.0) -> GameSpec:
    """Mixed game used for the saddle checks.

    ``phi = a u + b v``, ``h = -u^2 + v^2`` on ``{-1, 0, 1}``, so that
    ``H* = (b - a)|z|``; barriers ``clamp(x, -1, 1) -/+ width`` and
    ``xi = clamp(X_T, -1, 1)`` make both stopping rules bind.
    """
    return GameSpec(brownian(1, x0), lambda t, x, u, v: np.full_like(x, a * u + b * v),
                    lambda t, x, u, v: np.full(x.shape[0], -u * u + v * v),
                    [-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0],
                    registry.clamp_band(-1.0, 1.0, width), registry.clamp_terminal(-1.0, 1.0),
                    growth_K=abs(a) + abs(b) + 2.0, name="benchmark-game")


GAMES = {"zero-game": zero_game, "running-reward": running_reward_game,
         "stopping-game": stopping_game, "symmetric-game": symmetric_game,
         "benchmark-game": benchmark_game}
