"""Least-squares Monte Carlo solvers for (reflected) BSDEs.

All schemes share one backward recursion. At step ``i``::

    Yhat_i = E[Y_{i+1} | X_i] + f(t_i, X_i, E[Y_{i+1} | X_i], Z_i) dt
    Z_i    = E[(Y_{i+1} - E[Y_{i+1} | X_i]) dB_i | X_i] / dt

followed by optional penalty relaxation towards a barrier and/or projection
onto it. Pushes are logged as increments of ``K+`` (upward) and ``K-``
(downward) attached to node ``i``.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import (BarrierError, BarrierPair, DivergenceError, GeneratorError,
                   GeneratorSpec, SolutionQuadruple, TerminalCondition,
                   check_log_growth, eval_generator, no_barriers, penalty_relax,
                   probe_samples)
from .forward_sde import PathEnsemble


class RankDeficiencyWarning(UserWarning):
    pass


@dataclass(frozen=True)
class RegressionBasis:
    """Regression basis on standardised, clipped states.

    ``family`` is ``"polynomial"`` (total degree ``degree``) or ``"bins"``
    (piecewise constant, ``bins`` cells on the first coordinate). States are
    standardised per slice and clipped to ``[-clip, clip]``.
    """

    family: str = "polynomial"
    degree: int = 3
    bins: int = 32
    clip: float = 4.0

    def __post_init__(self):
        if self.family not in ("polynomial", "bins"):
            raise ValueError(f"unknown basis family {self.family!r}")
        if self.degree < 0 or self.bins < 1 or self.clip <= 0:
            raise ValueError("degree >= 0, bins >= 1 and clip > 0 required")

    def exponents(self, d: int) -> list[tuple[int, ...]]:
        out = [()]
        for k in range(1, self.degree + 1):
            out += _combinations(d, k)
        return out

    def size(self, d: int) -> int:
        return len(self.exponents(d)) if self.family == "polynomial" else self.bins

    def design(self, s: np.ndarray) -> np.ndarray:
        """Design matrix for standardised states ``s`` of shape ``(M, d)``."""
        if self.family == "polynomial":
            cols = [np.prod(s[:, list(c)], axis=1) if c else np.ones(len(s))
                    for c in self.exponents(s.shape[1])]
            return np.column_stack(cols)
        idx = self.bin_index(s)
        A = np.zeros((len(s), self.bins))
        A[np.arange(len(s)), idx] = 1.0
        return A

    def bin_index(self, s):
        edges = np.linspace(-self.clip, self.clip, self.bins + 1)
        return np.clip(np.searchsorted(edges, s[:, 0], side="right") - 1, 0, self.bins - 1)


def _combinations(d, k):
    if k == 0:
        return [()]
    out = []
    for c in _combinations(d, k - 1):
        start = c[-1] if c else 0
        out += [c + (j,) for j in range(start, d)]
    return out


@dataclass
class FittedRegression:
    basis: RegressionBasis
    mean: np.ndarray
    scale: np.ndarray
    coef: np.ndarray  # (p, k)

    def standardise(self, states):
        s = (np.atleast_2d(states) - self.mean) / self.scale
        return np.clip(s, -self.basis.clip, self.basis.clip)

    def __call__(self, states: np.ndarray) -> np.ndarray:
        s = self.standardise(states)
        if self.basis.family == "bins":
            out = self.coef[self.basis.bin_index(s)]
        else:
            out = self.basis.design(s) @ self.coef
        return out[:, 0] if out.shape[1] == 1 else out


def regress_conditional_expectation(values, states, basis: RegressionBasis,
                                    ridge: float = 1e-8) -> FittedRegression:
    """Least-squares projection of ``values`` on ``basis(states)``.

    ``values`` may be ``(M,)`` or ``(M, k)`` (several targets share one
    design). A slice where every state coincides is fitted by the sample
    mean. Other rank deficiencies fall back to a ridge solve and warn.
    """
    states = np.asarray(states, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    vals = np.asarray(values, dtype=float)
    vals2 = vals[:, None] if vals.ndim == 1 else vals
    M, d = states.shape
    mean = states.mean(axis=0)
    std = states.std(axis=0)
    p = basis.size(d)

    if np.all(std == 0):
        coef = np.zeros((p, vals2.shape[1]))
        fit = FittedRegression(basis, mean, np.ones(d), coef)
        if basis.family == "polynomial":
            coef[0] = vals2.mean(axis=0)
        else:
            coef[:] = vals2.mean(axis=0)
        return fit

    scale = np.where(std > 0, std, 1.0)
    fit = FittedRegression(basis, mean, scale, np.zeros((p, vals2.shape[1])))
    if M < p:
        raise ValueError(f"need at least {p} samples for this basis, got {M}")

    if basis.family == "bins":
        idx = basis.bin_index(fit.standardise(states))
        counts = np.bincount(idx, minlength=p).astype(float)
        sums = np.column_stack([np.bincount(idx, weights=v, minlength=p) for v in vals2.T])
        empty = counts == 0
        if empty.any():
            warnings.warn(f"{int(empty.sum())} empty regression bins; filled with the global mean",
                          RankDeficiencyWarning, stacklevel=2)
        fit.coef = np.where(empty[:, None], vals2.mean(axis=0),
                            sums / np.maximum(counts, 1)[:, None])
        return fit

    A = basis.design(fit.standardise(states))
    coef, _, rank, _ = np.linalg.lstsq(A, vals2, rcond=None)
    if rank < p:
        warnings.warn(f"design matrix rank {rank} < {p}; using ridge-regularised solve",
                      RankDeficiencyWarning, stacklevel=2)
        G = A.T @ A
        lam = ridge * max(np.trace(G) / p, 1.0)
        coef = np.linalg.solve(G + lam * np.eye(p), A.T @ vals2)
    fit.coef = coef
    return fit


@dataclass(frozen=True)
class PenalizationSchedule:
    levels: tuple = tuple(2.0 ** k for k in range(11))

    def __post_init__(self):
        lv = tuple(float(v) for v in self.levels)
        if not lv or any(v < 1 for v in lv) or any(b <= a for a, b in zip(lv, lv[1:])):
            raise ValueError(f"penalty levels must be strictly increasing and >= 1, got {lv}")
        object.__setattr__(self, "levels", lv)


DEFAULT_BASIS = RegressionBasis()


def _barrier_grid(barriers: BarrierPair, ens: PathEnsemble, check_order=True):
    t = ens.grid.nodes
    lo = np.empty((ens.M, ens.grid.N + 1))
    hi = np.empty_like(lo)
    for i in range(ens.grid.N + 1):
        lo[:, i], hi[:, i] = barriers.values(t[i], ens.X[:, i])
        if check_order:
            both = np.isfinite(lo[:, i]) & np.isfinite(hi[:, i])
            bad = both & ~(lo[:, i] < hi[:, i])
            if bad.any():
                k = int(np.argmax(bad))
                raise BarrierError(f"barrier ordering L < U fails at step {i}, path {k}: "
                                   f"L={lo[k, i]}, U={hi[k, i]}")
    return lo, hi


def _check_generator(gen: GeneratorSpec, ens: PathEnsemble):
    report = check_log_growth(gen, probe_samples(ens.d, ens.grid.T))
    if not report.passed:
        raise GeneratorError(f"{gen.name} exceeds its declared log-growth envelope: "
                             f"{report.violations[0]}")


def _backward(gen, xi, ens, basis, lo, hi, *, pen_lower=0.0, pen_upper=0.0,
              project_lower=False, project_upper=False, y_cap=1e8):
    grid = ens.grid
    M, N, d = ens.M, grid.N, ens.d
    dt = grid.dt
    t = grid.nodes
    basis = basis or DEFAULT_BASIS

    Y = np.empty((M, N + 1))
    Z = np.zeros((M, N, d))
    dKp = np.zeros((M, N))
    dKm = np.zeros((M, N))
    drive = np.zeros(M)
    Y[:, N] = xi(ens.X[:, N])

    for i in range(N - 1, -1, -1):
        x = ens.X[:, i]
        y_next = Y[:, i + 1]
        if M == 1:
            ey = y_next.copy()
        else:
            ey = regress_conditional_expectation(y_next, x, basis)(x)
            # centring leaves the estimator unbiased (E[dB | X_i] = 0) and
            # removes the noise carried by the conditional mean
            zfit = regress_conditional_expectation((y_next - ey)[:, None] * ens.dB[:, i], x, basis)
            Z[:, i] = zfit(x).reshape(M, d) / dt
        fdt = eval_generator(gen, t[i], x, ey, Z[:, i]) * dt
        drive += fdt
        y = ey + fdt
        if pen_lower:
            y, push = penalty_relax(y, lo[:, i], pen_lower, dt, "lower")
            dKp[:, i] += push
        if pen_upper:
            y, push = penalty_relax(y, hi[:, i], pen_upper, dt, "upper")
            dKm[:, i] += push
        if project_lower:
            push = np.maximum(lo[:, i] - y, 0.0)
            dKp[:, i] += push
            y = y + push
        if project_upper:
            push = np.maximum(y - hi[:, i], 0.0)
            dKm[:, i] += push
            y = y - push
        if not np.all(np.abs(y) <= y_cap):
            raise DivergenceError(f"|Y| exceeded cap {y_cap} at step {i}")
        Y[:, i] = y

    zeros = np.zeros((M, 1))
    sol = SolutionQuadruple(Y, Z, np.hstack([zeros, np.cumsum(dKp, axis=1)]),
                            np.hstack([zeros, np.cumsum(dKm, axis=1)]))
    # Regression residuals average to zero slice by slice (the basis holds the
    # constants), so Y0 is the sample mean of the pathwise quantity below. Its
    # spread carries the regression noise that std(Y_1) alone would miss.
    pathwise = Y[:, N] + drive + dKp.sum(axis=1) - dKm.sum(axis=1)
    se = float(pathwise.std(ddof=1) / np.sqrt(M)) if M > 1 else 0.0
    with np.errstate(invalid="ignore"):
        res_lo = np.where(np.isfinite(lo), np.maximum(lo - Y, 0.0), 0.0)
        res_hi = np.where(np.isfinite(hi), np.maximum(Y - hi, 0.0), 0.0)
    sol.meta.update(Y0=sol.Y0, SE=se,
                    sup_residual_lower=float(res_lo.max()),
                    sup_residual_upper=float(res_hi.max()),
                    Kplus_T_mean=float(sol.Kplus[:, -1].mean()),
                    Kminus_T_mean=float(sol.Kminus[:, -1].mean()))
    return sol


def _prepare(gen, xi, ens, barriers, check=True):
    barriers = barriers or no_barriers()
    if check:
        _check_generator(gen, ens)
    lo, hi = _barrier_grid(barriers, ens)
    xi.check_sandwich(barriers, ens.grid.T, ens.X[:, -1])
    return lo, hi


def solve_bsde(gen: GeneratorSpec, xi: TerminalCondition, ens: PathEnsemble,
               basis: Optional[RegressionBasis] = None, *, y_cap: float = 1e8,
               check_generator: bool = True) -> SolutionQuadruple:
    """Unreflected BSDE; ``K+ = K- = 0``."""
    lo, hi = _prepare(gen, xi, ens, None, check_generator)
    return _backward(gen, xi, ens, basis, lo, hi, y_cap=y_cap)


def solve_one_barrier_penalized(gen, xi, barrier: BarrierPair, ens, basis=None,
                                sched: Optional[PenalizationSchedule] = None, *,
                                y_cap=1e8, check_generator=True) -> list[SolutionQuadruple]:
    """Penalised driver ``f + n (L - y)^+`` for every level ``n``.

    Only the lower side of ``barrier`` is used.
    """
    sched = sched or PenalizationSchedule()
    lower_only = BarrierPair(barrier.lower, lambda t, x: np.inf, name=barrier.name)
    lo, hi = _prepare(gen, xi, ens, lower_only, check_generator)
    out = []
    for n in sched.levels:
        sol = _backward(gen, xi, ens, basis, lo, hi, pen_lower=n, y_cap=y_cap)
        sol.meta["n"] = n
        out.append(sol)
    return out


def solve_double_barrier_penalized(gen, xi, barriers: BarrierPair, ens, basis=None,
                                   sched: Optional[PenalizationSchedule] = None,
                                   direction: str = "increasing", *, y_cap=1e8,
                                   check_generator=True) -> list[SolutionQuadruple]:
    """Increasing mode penalises ``L`` and reflects on ``U``; decreasing mode
    penalises ``U`` and reflects on ``L``."""
    if direction not in ("increasing", "decreasing"):
        raise ValueError(f"direction must be 'increasing' or 'decreasing', got {direction!r}")
    sched = sched or PenalizationSchedule()
    lo, hi = _prepare(gen, xi, ens, barriers, check_generator)
    inc = direction == "increasing"
    out = []
    for n in sched.levels:
        sol = _backward(gen, xi, ens, basis, lo, hi,
                        pen_lower=n if inc else 0.0, pen_upper=0.0 if inc else n,
                        project_upper=inc, project_lower=not inc, y_cap=y_cap)
        sol.meta.update(n=n, direction=direction)
        out.append(sol)
    return out


def solve_double_barrier_direct(gen, xi, barriers: BarrierPair, ens, basis=None, *,
                                y_cap=1e8, check_generator=True) -> SolutionQuadruple:
    """Clamp the unconstrained update onto ``[L, U]`` at every step."""
    lo, hi = _prepare(gen, xi, ens, barriers, check_generator)
    return _backward(gen, xi, ens, basis, lo, hi, project_lower=True,
                     project_upper=True, y_cap=y_cap)


@dataclass
class SkorokhodReport:
    residual_lower: np.ndarray
    residual_upper: np.ndarray
    bound_lower: np.ndarray
    bound_upper: np.ndarray

    @property
    def failing_paths(self) -> np.ndarray:
        bad = (self.residual_lower > self.bound_lower) | (self.residual_upper > self.bound_upper)
        return np.flatnonzero(bad)

    @property
    def passed(self) -> bool:
        return self.failing_paths.size == 0


def check_skorokhod(sol: SolutionQuadruple, barriers: BarrierPair, ens: PathEnsemble,
                    tol: float = 1e-8) -> SkorokhodReport:
    """Per-path sums ``sum (Y - L) dK+`` and ``sum (U - Y) dK-``."""
    if sol.Y.shape != (ens.M, ens.grid.N + 1):
        raise ValueError(f"solution shape {sol.Y.shape} does not match ensemble "
                         f"({ens.M}, {ens.grid.N + 1})")
    lo, hi = _barrier_grid(barriers, ens, check_order=False)
    dKp = np.diff(sol.Kplus, axis=1)
    dKm = np.diff(sol.Kminus, axis=1)
    Y = sol.Y[:, :-1]
    with np.errstate(invalid="ignore"):
        rl = np.where(dKp > 0, np.abs(Y - lo[:, :-1]) * dKp, 0.0).sum(axis=1)
        ru = np.where(dKm > 0, np.abs(hi[:, :-1] - Y) * dKm, 0.0).sum(axis=1)
    return SkorokhodReport(rl, ru, tol * (1 + sol.Kplus[:, -1]), tol * (1 + sol.Kminus[:, -1]))


CONVERGENCE_COLUMNS = ("n", "Y0", "SE", "sup_residual_lower", "sup_residual_upper",
                       "Kplus_T_mean", "Kminus_T_mean")


def convergence_rows(levels: Sequence[SolutionQuadruple]) -> list[dict]:
    return [{k: s.meta[k] for k in CONVERGENCE_COLUMNS} for s in levels]


def write_convergence_csv(levels: Sequence[SolutionQuadruple], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CONVERGENCE_COLUMNS)
        for row in convergence_rows(levels):
            w.writerow([repr(float(row[k])) for k in CONVERGENCE_COLUMNS])
    return path
