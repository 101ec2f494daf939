"""Domain types shared by the solvers.

Drivers, barriers and terminal conditions are vectorised over paths: states
arrive as arrays of shape ``(M, d)``, scalars ``y`` as ``(M,)`` and gradients
``z`` as ``(M, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Driver = Callable[[float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
BarrierFn = Callable[[float, np.ndarray], np.ndarray]
TerminalFn = Callable[[np.ndarray], np.ndarray]


class DrbsdeError(ValueError):
    """Base class for input and contract violations."""


class GeneratorError(DrbsdeError):
    pass


class BarrierError(DrbsdeError):
    pass


class DivergenceError(DrbsdeError):
    pass


def safe_ylogy(y):
    """``y ln|y|`` extended by continuity with value 0 at ``y = 0``."""
    y = np.asarray(y, dtype=float)
    a = np.abs(y)
    out = np.zeros_like(y)
    nz = a > 0
    out[nz] = y[nz] * np.log(a[nz])
    return out


def safe_zsqrtlog(r):
    """``r sqrt(|ln r|)`` for ``r >= 0``; 0 at ``r = 0`` (and at ``r = 1``)."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    nz = r > 0
    out[nz] = r[nz] * np.sqrt(np.abs(np.log(r[nz])))
    return out


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self):
        if not (np.isfinite(self.T) and self.T > 0):
            raise DrbsdeError(f"horizon T must be > 0, got {self.T}")
        if int(self.N) != self.N or self.N < 1:
            raise DrbsdeError(f"steps N must be a positive integer, got {self.N}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.N + 1) * self.dt
        t[-1] = self.T
        return t


@dataclass(frozen=True)
class GeneratorSpec:
    """Driver ``f(t, x, y, z)`` with its declared log-growth envelope.

    The envelope is ``eta_bound + c0 |y||ln|y|| + c1 |z| sqrt(|ln|z||)``.
    """

    driver: Driver
    eta_bound: float = 0.0
    c0: float = 0.0
    c1: float = 0.0
    name: str = "custom"

    def __post_init__(self):
        for key in ("eta_bound", "c0", "c1"):
            if getattr(self, key) < 0:
                raise GeneratorError(f"{key} must be nonnegative")

    def envelope(self, y, z) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        zn = np.linalg.norm(np.atleast_2d(np.asarray(z, dtype=float)), axis=-1)
        return (self.eta_bound + self.c0 * np.abs(safe_ylogy(y))
                + self.c1 * safe_zsqrtlog(zn).reshape(y.shape))


def _as_batch(x, y, z):
    y = np.atleast_1d(np.asarray(y, dtype=float))
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    M = y.shape[0]
    x = x.reshape(M, -1) if x.size else np.zeros((M, 1))
    z = z.reshape(M, -1) if z.size else np.zeros((M, 1))
    return x, y, z


def eval_generator(spec: GeneratorSpec, t, x, y, z):
    """Evaluate the driver, rejecting non-finite inputs or outputs.

    Scalar ``y`` gives a float back; arrays give arrays.
    """
    scalar = np.ndim(y) == 0
    xb, yb, zb = _as_batch(x, y, z)
    for label, arr in (("t", np.asarray(t, dtype=float)), ("x", xb), ("y", yb), ("z", zb)):
        if not np.all(np.isfinite(arr)):
            raise GeneratorError(f"{spec.name}: non-finite input {label}={arr!r}")
    out = np.asarray(spec.driver(float(t), xb, yb, zb), dtype=float).reshape(yb.shape)
    bad = ~np.isfinite(out)
    if bad.any():
        k = int(np.argmax(bad))
        raise GeneratorError(
            f"{spec.name}: non-finite value at t={t}, x={xb[k]}, y={yb[k]}, z={zb[k]}")
    return float(out[0]) if scalar else out


@dataclass
class LogGrowthReport:
    checked: int
    violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations


def check_log_growth(spec: GeneratorSpec, samples: Sequence[tuple],
                     rtol: float = 1e-12) -> LogGrowthReport:
    """List samples ``(t, x, y, z)`` where ``|f|`` exceeds the declared envelope."""
    if len(samples) == 0:
        raise GeneratorError("check_log_growth needs at least one sample")
    report = LogGrowthReport(checked=len(samples))
    for t, x, y, z in samples:
        val = abs(eval_generator(spec, t, x, float(y), z))
        bound = float(spec.envelope(np.array([float(y)]), np.atleast_2d(z))[0])
        if val > bound * (1 + rtol) + rtol:
            report.violations.append({"t": float(t), "y": float(y),
                                      "z": np.atleast_1d(z).tolist(),
                                      "abs_f": val, "envelope": bound})
    return report


def probe_samples(d: int = 1, T: float = 1.0, n: int = 64, seed: int = 0) -> list:
    """Default probe set for the growth check: a y-sweep plus random draws."""
    rng = np.random.default_rng(seed)
    ys = np.concatenate([[0.0, 1.0, -1.0, np.e, -np.e], rng.uniform(-10, 10, n)])
    out = []
    for y in ys:
        t = float(rng.uniform(0, T))
        x = rng.normal(size=d)
        z = rng.normal(scale=2.0, size=d)
        out.append((t, x, y, z))
    return out


@dataclass(frozen=True)
class BarrierPair:
    """Lower and upper obstacles; ``-inf`` / ``+inf`` switch a side off."""

    lower: BarrierFn
    upper: BarrierFn
    name: str = "custom"

    def values(self, t: float, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.atleast_2d(x)
        M = x.shape[0]
        lo = np.broadcast_to(np.asarray(self.lower(t, x), dtype=float), (M,)).copy()
        hi = np.broadcast_to(np.asarray(self.upper(t, x), dtype=float), (M,)).copy()
        return lo, hi

    def check_ordering(self, t: float, x: np.ndarray) -> None:
        lo, hi = self.values(t, x)
        both = np.isfinite(lo) & np.isfinite(hi)
        bad = both & ~(lo < hi)
        if bad.any():
            k = int(np.argmax(bad))
            raise BarrierError(
                f"{self.name}: need L < U, got L={lo[k]}, U={hi[k]} at t={t}, x={np.atleast_2d(x)[k]}")


def no_barriers() -> BarrierPair:
    return BarrierPair(lambda t, x: -np.inf, lambda t, x: np.inf, name="none")


@dataclass(frozen=True)
class TerminalCondition:
    xi: TerminalFn
    name: str = "custom"

    def __call__(self, xT: np.ndarray) -> np.ndarray:
        xT = np.atleast_2d(xT)
        return np.broadcast_to(np.asarray(self.xi(xT), dtype=float), (xT.shape[0],)).copy()

    def check_sandwich(self, barriers: BarrierPair, T: float, xT: np.ndarray,
                       atol: float = 1e-12) -> np.ndarray:
        vals = self(xT)
        lo, hi = barriers.values(T, xT)
        bad = (vals < lo - atol) | (vals > hi + atol)
        if bad.any():
            k = int(np.argmax(bad))
            raise BarrierError(
                f"terminal {self.name}: L_T <= xi <= U_T fails on path {k}: "
                f"L={lo[k]}, xi={vals[k]}, U={hi[k]}")
        return vals


@dataclass
class SolutionQuadruple:
    """Discrete ``(Y, Z, K+, K-)`` on M paths and N+1 nodes."""

    Y: np.ndarray        # (M, N+1)
    Z: np.ndarray        # (M, N, d)
    Kplus: np.ndarray    # (M, N+1)
    Kminus: np.ndarray   # (M, N+1)
    meta: dict = field(default_factory=dict)

    @property
    def Y0(self) -> float:
        return float(np.mean(self.Y[:, 0]))

    def check_invariants(self, lower=None, upper=None, xi=None, tol=1e-12) -> list[str]:
        """Return a list of broken invariants (empty when all hold)."""
        problems = []
        for name, K in (("Kplus", self.Kplus), ("Kminus", self.Kminus)):
            if np.any(K[:, 0] != 0):
                problems.append(f"{name}_0 != 0")
            if np.any(np.diff(K, axis=1) < -tol):
                problems.append(f"{name} decreases")
        if lower is not None and np.any(self.Y < lower - tol):
            problems.append("Y below L")
        if upper is not None and np.any(self.Y > upper + tol):
            problems.append("Y above U")
        if xi is not None and np.any(np.abs(self.Y[:, -1] - xi) > tol):
            problems.append("Y_N != xi")
        return problems


@dataclass(frozen=True)
class DiagnosticsConfig:
    lam: float = 1.0
    p: float = 1.5

    def __post_init__(self):
        if not self.lam > 0:
            raise DrbsdeError("lambda must be > 0")
        if not 1 < self.p < 2:
            raise DrbsdeError("p must lie in (1, 2)")

    def terminal_exponent(self, T: float) -> float:
        return float(np.exp(self.lam * T) + 1)


def terminal_moment(xi_values: np.ndarray, cfg: DiagnosticsConfig, T: float) -> dict:
    """Sample estimate of ``E|xi|^(exp(lambda T) + 1)`` with a finiteness flag."""
    q = cfg.terminal_exponent(T)
    with np.errstate(over="ignore"):
        m = float(np.mean(np.abs(np.asarray(xi_values, dtype=float)) ** q))
    return {"exponent": q, "moment": m, "finite": bool(np.isfinite(m))}


def penalty_relax(y: np.ndarray, target: np.ndarray, n: float, dt: float,
                  side: str) -> tuple[np.ndarray, np.ndarray]:
    """Apply the penalty ``n (target - y)^+`` (side='lower') or
    ``-n (y - target)^+`` (side='upper') over one step of length ``dt``.

    When ``n dt > 1`` the step is split into ``ceil(n dt)`` explicit sub-steps
    so the penalised value never crosses the target. Returns the new value and
    the (nonnegative) amount pushed.
    """
    if n <= 0:
        return y, np.zeros_like(y)
    m = max(1, int(np.ceil(n * dt - 1e-12)))
    factor = (1.0 - n * dt / m) ** m
    if side == "lower":
        gap = np.where(np.isfinite(target), np.maximum(target - y, 0.0), 0.0)
        push = gap * (1.0 - factor)
        return y + push, push
    if side == "upper":
        gap = np.where(np.isfinite(target), np.maximum(y - target, 0.0), 0.0)
        push = gap * (1.0 - factor)
        return y - push, push
    raise ValueError(f"side must be 'lower' or 'upper', got {side!r}")
