"""Finite-difference solvers for one- and two-obstacle parabolic problems in 1-d.

The backward problem is ``du/dt + L u + c u + f(t, x, u, sigma u_x) = 0``
with ``L = 0.5 sigma^2 d_xx + b d_x``, terminal value ``g`` and obstacles
``h <= u <= h'``. Time stepping is a theta-scheme with ``f`` taken from the
previous (later) slice. Boundary nodes carry no diffusion: they follow
``u <- u + dt (f + c u)`` and are clamped to the obstacles.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_banded

from .core import (BarrierError, BarrierPair, DrbsdeError, GeneratorSpec,
                   TerminalCondition, TimeGrid, eval_generator, no_barriers)


class CFLError(DrbsdeError):
    pass


class ConvergenceError(DrbsdeError):
    pass


def _field(fn, t, x, default=0.0):
    if fn is None:
        return np.full_like(x, default)
    return np.broadcast_to(np.asarray(fn(t, x), dtype=float), x.shape).copy()


@dataclass(frozen=True)
class PdeSpec:
    """Coefficients and data of a 1-d obstacle problem.

    ``drift(t, x)`` and ``vol(t, x)`` act on node arrays ``x`` of shape
    ``(nx,)``. ``reaction`` is a constant zeroth-order coefficient ``c``.
    """

    generator: GeneratorSpec
    terminal: TerminalCondition
    barriers: BarrierPair = field(default_factory=no_barriers)
    drift: Optional[Callable] = None
    vol: Optional[Callable] = None
    reaction: float = 0.0

    def b(self, t, x):
        return _field(self.drift, t, x)

    def sigma(self, t, x):
        return _field(self.vol, t, x, default=1.0)

    def obstacles(self, t, x):
        lo, hi = self.barriers.values(t, x[:, None])
        return lo, hi

    def validate(self, x: np.ndarray, tgrid: TimeGrid) -> None:
        for t in tgrid.nodes:
            lo, hi = self.obstacles(t, x)
            both = np.isfinite(lo) & np.isfinite(hi)
            bad = ~(lo < hi) & both
            if bad.any() or np.any(lo == np.inf) or np.any(hi == -np.inf):
                raise BarrierError(f"obstacles need h < h' (t={t})")
        self.terminal.check_sandwich(self.barriers, tgrid.T, x[:, None])

    @classmethod
    def from_sde(cls, sde, generator, terminal, barriers=None, reaction=0.0):
        """Build a 1-d spec from a scalar forward SDE."""
        if sde.dim != 1:
            raise DrbsdeError("the finite-difference oracle supports d = 1 only")
        return cls(generator, terminal, barriers or no_barriers(),
                   drift=lambda t, x: sde.b(t, x[:, None])[:, 0],
                   vol=lambda t, x: sde.sigma(t, x[:, None])[:, 0, 0],
                   reaction=reaction)


@dataclass(frozen=True)
class SpaceGrid:
    x_min: float
    x_max: float
    nx: int

    def __post_init__(self):
        if self.nx < 3:
            raise DrbsdeError(f"need nx >= 3, got {self.nx}")
        if not self.x_max > self.x_min:
            raise DrbsdeError("x_max must exceed x_min")

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.nx)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.nx - 1)

    @classmethod
    def around(cls, x0: float, sigma: float, T: float, nx: int, width: float = 6.0):
        """Domain ``x0 -/+ width sigma sqrt(T)`` with ``x0`` on a node when nx is odd."""
        half = width * abs(sigma) * np.sqrt(T)
        return cls(x0 - half, x0 + half, nx)


@dataclass
class TridiagOperator:
    """Rows of ``L + c``: ``(L u)_j = sub_j u_{j-1} + diag_j u_j + sup_j u_{j+1}``.

    Boundary rows are zero.
    """

    sub: np.ndarray
    diag: np.ndarray
    sup: np.ndarray

    def apply(self, u: np.ndarray) -> np.ndarray:
        out = self.diag * u
        out[1:] += self.sub[1:] * u[:-1]
        out[:-1] += self.sup[:-1] * u[1:]
        return out


def build_operator(spec: PdeSpec, xgrid: SpaceGrid, t: float = 0.0,
                   dt: Optional[float] = None, theta: float = 1.0) -> TridiagOperator:
    """Central second differences for the diffusion, upwind first differences
    for the drift. With ``theta < 1`` and a ``dt`` the explicit part is checked
    for stability."""
    x = xgrid.nodes
    dx = xgrid.dx
    a = 0.5 * spec.sigma(t, x) ** 2
    b = spec.b(t, x)
    bp, bm = np.maximum(b, 0.0), np.maximum(-b, 0.0)
    sub = a / dx ** 2 + bm / dx
    sup = a / dx ** 2 + bp / dx
    diag = -(sub + sup) + spec.reaction
    for arr in (sub, diag, sup):
        arr[0] = arr[-1] = 0.0
    if dt is not None and theta < 1:
        rate = float(np.max(sub + sup))
        if rate > 0 and (1 - theta) * dt * rate > 1 + 1e-12:
            raise CFLError(f"explicit step unstable: dt={dt} > {1 / ((1 - theta) * rate):.3e} "
                           f"(use dt <= dx^2/max(sigma^2) or theta=1)")
    return TridiagOperator(sub, diag, sup)


@dataclass
class GridValueFunction:
    t: np.ndarray          # (N+1,)
    x: np.ndarray          # (nx,)
    u: np.ndarray          # (N+1, nx)
    h: np.ndarray          # (N+1, nx)
    hp: np.ndarray         # (N+1, nx)
    meta: dict = field(default_factory=dict)

    def value(self, x, step: int = 0):
        return np.interp(x, self.x, self.u[step])

    def active_set(self, step: int, tol: float = 1e-10) -> np.ndarray:
        u, h, hp = self.u[step], self.h[step], self.hp[step]
        out = np.full(u.shape, "interior", dtype=object)
        out[u <= h + tol] = "lower"
        out[u >= hp - tol] = "upper"
        return out

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "u", "h", "h_prime", "active_set"])
            for i, t in enumerate(self.t):
                act = self.active_set(i)
                for j, x in enumerate(self.x):
                    w.writerow([repr(float(t)), repr(float(x)), repr(float(self.u[i, j])),
                                repr(float(self.h[i, j])), repr(float(self.hp[i, j])), act[j]])
        return path


def _banded(A_sub, A_diag, A_sup):
    ab = np.zeros((3, len(A_diag)))
    ab[0, 1:] = A_sup[:-1]
    ab[1] = A_diag
    ab[2, :-1] = A_sub[1:]
    return ab


def projected_sor(A_sub, A_diag, A_sup, rhs, lo, hi, u0, *, tol=1e-13, max_iter=20000,
                  omega=None):
    """Box-constrained LCP ``lo <= u <= hi`` for a tridiagonal M-matrix by
    projected SOR (red-black sweeps)."""
    u = np.clip(u0, lo, hi)
    n = len(u)
    if omega is None:
        off = np.abs(A_sub) + np.abs(A_sup)
        rho = float(np.max(off / A_diag))
        rho = min(rho, 0.9999)
        omega = 2.0 / (1.0 + np.sqrt(1.0 - rho ** 2))
    scale = max(1.0, float(np.max(np.abs(u[np.isfinite(u)]), initial=1.0)))
    idx = [np.arange(1, n - 1, 2), np.arange(2, n - 1, 2)]
    for it in range(max_iter):
        change = 0.0
        for j in idx:
            gs = (rhs[j] - A_sub[j] * u[j - 1] - A_sup[j] * u[j + 1]) / A_diag[j]
            new = np.clip(u[j] + omega * (gs - u[j]), lo[j], hi[j])
            if j.size:
                change = max(change, float(np.max(np.abs(new - u[j]))))
            u[j] = new
        if change <= tol * scale:
            return u, it + 1
    raise ConvergenceError(f"projected SOR did not converge in {max_iter} sweeps "
                           f"(last change {change:.3e})")


def _gradient(u, dx):
    g = np.empty_like(u)
    g[1:-1] = (u[2:] - u[:-2]) / (2 * dx)
    g[0] = (u[1] - u[0]) / dx
    g[-1] = (u[-1] - u[-2]) / dx
    return g


def _solve(spec: PdeSpec, xgrid: SpaceGrid, tgrid: TimeGrid, *, constrain: str,
           theta: float = 1.0, method: str = "psor", n: float = 0.0,
           penalize: tuple = (), validate: bool = True) -> GridValueFunction:
    x = xgrid.nodes
    t = tgrid.nodes
    dt = tgrid.dt
    N, nx = tgrid.N, xgrid.nx
    if validate:
        spec.validate(x, tgrid)
    if method not in ("psor", "projection"):
        raise ValueError(f"method must be 'psor' or 'projection', got {method!r}")

    U = np.empty((N + 1, nx))
    H = np.empty_like(U)
    HP = np.empty_like(U)
    for i in range(N + 1):
        H[i], HP[i] = spec.obstacles(t[i], x)
    U[N] = spec.terminal(x[:, None])

    use_lo = constrain in ("lower", "both")
    use_hi = constrain in ("upper", "both")
    big = np.inf
    comp = 0.0
    sweeps = 0
    pen_iters = 0

    op_next = build_operator(spec, xgrid, t[N], dt, theta)
    for i in range(N - 1, -1, -1):
        op = build_operator(spec, xgrid, t[i], dt, theta)
        un = U[i + 1]
        zs = spec.sigma(t[i], x) * _gradient(un, xgrid.dx)
        F = eval_generator(spec.generator, t[i], x[:, None], un, zs[:, None])
        rhs = un + dt * F
        if theta < 1:
            rhs = rhs + (1 - theta) * dt * op_next.apply(un)
        A_sub = -theta * dt * op.sub
        A_sup = -theta * dt * op.sup
        A_diag = 1.0 - theta * dt * op.diag
        A_diag[0] = A_diag[-1] = 1.0
        A_sub[0] = A_sup[-1] = 0.0

        lo = H[i] if use_lo else np.full(nx, -big)
        hi = HP[i] if use_hi else np.full(nx, big)
        bval = un[[0, -1]] + dt * (F[[0, -1]] + spec.reaction * un[[0, -1]])
        if constrain != "none" or penalize:
            bval = np.clip(bval, H[i][[0, -1]], HP[i][[0, -1]])
        rhs[0], rhs[-1] = bval
        lo = lo.copy(); hi = hi.copy()
        lo[[0, -1]] = hi[[0, -1]] = bval

        if penalize:
            u, k = _penalized_step(A_sub, A_diag, A_sup, rhs, lo, hi, H[i], HP[i],
                                   n * dt, penalize, constrain != "none", method)
            pen_iters = max(pen_iters, k)
        else:
            u = solve_banded((1, 1), _banded(A_sub, A_diag, A_sup), rhs)
            if constrain != "none":
                if method == "psor" and not np.all((u >= lo) & (u <= hi)):
                    u, k = projected_sor(A_sub, A_diag, A_sup, rhs, lo, hi, u)
                    sweeps = max(sweeps, k)
                else:
                    u = np.clip(u, lo, hi)

        if constrain == "both" and not penalize:
            Au = A_diag * u
            Au[1:] += A_sub[1:] * u[:-1]
            Au[:-1] += A_sup[:-1] * u[1:]
            r = (Au - rhs)[1:-1] / dt
            c = np.minimum(u[1:-1] - H[i][1:-1], np.maximum(r, u[1:-1] - HP[i][1:-1]))
            comp = max(comp, float(np.max(np.abs(c))))
        elif constrain == "lower" and not penalize:
            Au = A_diag * u
            Au[1:] += A_sub[1:] * u[:-1]
            Au[:-1] += A_sup[:-1] * u[1:]
            r = (Au - rhs)[1:-1] / dt
            comp = max(comp, float(np.max(np.abs(np.minimum(u[1:-1] - H[i][1:-1], r)))))
        U[i] = u
        op_next = op

    meta = {"complementarity_residual": comp, "max_sor_sweeps": sweeps,
            "max_penalty_iterations": pen_iters, "constrain": constrain,
            "method": method, "theta": theta, "penalty": n, "penalize": list(penalize)}
    return GridValueFunction(t, x, U, H, HP, meta)


def _penalized_step(A_sub, A_diag, A_sup, rhs, lo, hi, h, hp, ndt, penalize,
                    reflect, method, max_iter=100):
    """Implicit penalty solved by policy iteration on the active set."""
    u = solve_banded((1, 1), _banded(A_sub, A_diag, A_sup), rhs)
    if reflect:
        u = np.clip(u, lo, hi)
    free_lo = np.full(len(u), -np.inf)
    free_hi = np.full(len(u), np.inf)
    free_lo[[0, -1]] = lo[[0, -1]]
    free_hi[[0, -1]] = hi[[0, -1]]
    prev = None
    u_prev = None
    for k in range(1, max_iter + 1):
        act_lo = ("lower" in penalize) & (u < h)
        act_hi = ("upper" in penalize) & (u > hp)
        act_lo[[0, -1]] = act_hi[[0, -1]] = False
        key = (act_lo.tobytes(), act_hi.tobytes())
        if key == prev:
            return u, k
        # round-off level flips of the active set would otherwise cycle
        if u_prev is not None and np.max(np.abs(u - u_prev)) <= 1e-14 * max(1.0, np.max(np.abs(u))):
            return u, k
        prev, u_prev = key, u
        d = A_diag + ndt * (act_lo | act_hi)
        r = rhs + ndt * (np.where(act_lo, h, 0.0) + np.where(act_hi, hp, 0.0))
        u = solve_banded((1, 1), _banded(A_sub, d, A_sup), r)
        if reflect:
            rlo = lo if "lower" not in penalize else free_lo
            rhi = hi if "upper" not in penalize else free_hi
            if not np.all((u >= rlo) & (u <= rhi)):
                if method == "psor":
                    u, _ = projected_sor(A_sub, d, A_sup, r, rlo, rhi, u)
                else:
                    u = np.clip(u, rlo, rhi)
    raise ConvergenceError(f"penalty iteration did not settle in {max_iter} iterations")


def solve_unconstrained(spec: PdeSpec, xgrid: SpaceGrid, tgrid: TimeGrid,
                        theta: float = 1.0) -> GridValueFunction:
    return _solve(spec, xgrid, tgrid, constrain="none", theta=theta, validate=False)


def solve_one_obstacle_vi(spec: PdeSpec, xgrid: SpaceGrid, tgrid: TimeGrid,
                          theta: float = 1.0, method: str = "psor") -> GridValueFunction:
    """Lower obstacle only; the upper side of ``spec.barriers`` is ignored."""
    one = replace(spec, barriers=BarrierPair(spec.barriers.lower, lambda t, x: np.inf,
                                             name=spec.barriers.name))
    return _solve(one, xgrid, tgrid, constrain="lower", theta=theta, method=method)


def solve_double_obstacle_vi(spec: PdeSpec, xgrid: SpaceGrid, tgrid: TimeGrid,
                             theta: float = 1.0, method: str = "psor") -> GridValueFunction:
    return _solve(spec, xgrid, tgrid, constrain="both", theta=theta, method=method)


def solve_penalized_pde(spec: PdeSpec, xgrid: SpaceGrid, tgrid: TimeGrid, n: float,
                        penalize: str = "both", theta: float = 1.0,
                        method: str = "psor") -> GridValueFunction:
    """Penalised problem with weight ``n``.

    ``penalize="both"``: sources ``n (h - u)^+`` and ``-n (u - h')^+``, no
    reflection. ``"lower"``: lower obstacle penalised, upper one reflected
    (solution sits below the VI solution). ``"upper"``: upper obstacle
    penalised, lower one reflected (solution sits above it).
    """
    if n < 1:
        raise DrbsdeError(f"penalty weight must be >= 1, got {n}")
    sides = {"both": ("lower", "upper"), "lower": ("lower",), "upper": ("upper",)}
    if penalize not in sides:
        raise ValueError(f"penalize must be one of {sorted(sides)}")
    constrain = {"both": "none", "lower": "upper", "upper": "lower"}[penalize]
    # obstacles still bound the boundary nodes, so validate as a VI
    spec.validate(xgrid.nodes, tgrid)
    return _solve(spec, xgrid, tgrid, constrain=constrain, theta=theta, method=method,
                  n=n, penalize=sides[penalize], validate=False)


def exp_time_transform(u: GridValueFunction, direction: str = "forward") -> GridValueFunction:
    """``w -> e^t w`` (forward) or ``e^{-t} w`` (inverse), obstacles included."""
    if direction not in ("forward", "inverse"):
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    s = np.exp(u.t if direction == "forward" else -u.t)[:, None]
    return GridValueFunction(u.t.copy(), u.x.copy(), u.u * s, u.h * s, u.hp * s,
                             dict(u.meta, transform=direction))


def transformed_spec(spec: PdeSpec, T: float) -> PdeSpec:
    """Problem solved by ``e^t w`` when ``w`` solves ``spec`` on ``[0, T]``."""
    f = spec.generator

    def driver(t, x, y, z):
        e = np.exp(t)
        return e * f.driver(t, x, y / e, z / e)

    lower, upper = spec.barriers.lower, spec.barriers.upper
    bar = BarrierPair(lambda t, x: np.exp(t) * np.asarray(lower(t, x), dtype=float),
                      lambda t, x: np.exp(t) * np.asarray(upper(t, x), dtype=float),
                      name=f"exp_transformed_{spec.barriers.name}")
    eT = np.exp(T)
    term = TerminalCondition(lambda xT: eT * spec.terminal(xT),
                             name=f"exp_transformed_{spec.terminal.name}")
    return replace(spec, generator=GeneratorSpec(driver, name=f"exp_transformed_{f.name}"),
                   barriers=bar, terminal=term, reaction=spec.reaction - 1.0)


def solve_transformed(spec: PdeSpec, xgrid: SpaceGrid, tgrid: TimeGrid,
                      constrain: str = "both", theta: float = 1.0,
                      method: str = "psor") -> GridValueFunction:
    """Solve the exponentially transformed problem; returns ``e^t w``."""
    tspec = transformed_spec(spec, tgrid.T)
    if constrain == "lower":
        tspec = replace(tspec, barriers=BarrierPair(tspec.barriers.lower, lambda t, x: np.inf))
    return _solve(tspec, xgrid, tgrid, constrain=constrain, theta=theta, method=method)


REFINEMENT_COLUMNS = ("nx", "N", "u00", "delta_vs_previous")


def refinement_table(spec: PdeSpec, x0: float, T: float, levels, *, solver=None,
                     width: float = 6.0, sigma_scale: float = 1.0) -> list[dict]:
    """Re-solve on successively finer ``(nx, N)`` grids and tabulate ``u(0, x0)``."""
    solver = solver or solve_double_obstacle_vi
    rows, prev = [], None
    for nx, N in levels:
        xg = SpaceGrid.around(x0, sigma_scale, T, int(nx), width)
        v = float(solver(spec, xg, TimeGrid(T, int(N))).value(x0))
        rows.append({"nx": int(nx), "N": int(N), "u00": v,
                     "delta_vs_previous": float("nan") if prev is None else abs(v - prev)})
        prev = v
    return rows


def write_refinement_csv(rows, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REFINEMENT_COLUMNS)
        for r in rows:
            w.writerow([r["nx"], r["N"], repr(r["u00"]), repr(r["delta_vs_previous"])])
    return path
