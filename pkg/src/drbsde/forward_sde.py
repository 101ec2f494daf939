"""Euler-Maruyama simulation of the forward diffusion."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .core import DivergenceError, DrbsdeError, TimeGrid

BLOCK = 256  # paths per RNG substream


@dataclass(frozen=True)
class SdeSpec:
    """``dX = b(t, X) dt + sigma(t, X) dB`` in dimension ``dim``.

    ``drift(t, x)`` maps ``(M, d) -> (M, d)`` and ``vol(t, x)`` maps
    ``(M, d) -> (M, d, d)``. With ``uses_running_sup`` the volatility is called
    as ``vol(t, x, xsup)`` where ``xsup`` is the running max of ``|X|``.
    """

    dim: int
    x0: np.ndarray
    drift: Optional[Callable] = None
    vol: Optional[Callable] = None
    lipschitz: float = 1.0
    uses_running_sup: bool = False

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if x0.shape != (self.dim,):
            raise DrbsdeError(f"x0 must have shape ({self.dim},), got {x0.shape}")
        object.__setattr__(self, "x0", x0)

    def b(self, t, x):
        if self.drift is None:
            return np.zeros_like(x)
        return np.broadcast_to(np.asarray(self.drift(t, x), dtype=float), x.shape)

    def sigma(self, t, x, xsup=None):
        M, d = x.shape
        if self.vol is None:
            return np.broadcast_to(np.eye(d), (M, d, d))
        s = self.vol(t, x, xsup) if self.uses_running_sup else self.vol(t, x)
        s = np.asarray(s, dtype=float)
        if s.ndim < 3:
            s = s.reshape(-1, d, d) if s.size == M * d * d else np.broadcast_to(s.reshape(d, d), (M, d, d))
        return np.broadcast_to(s, (M, d, d))

    def sigma_inv(self, t, x, xsup=None):
        return np.linalg.inv(self.sigma(t, x, xsup))


def brownian(dim: int = 1, x0=0.0, scale: float = 1.0) -> SdeSpec:
    eye = scale * np.eye(dim)
    return SdeSpec(dim, np.full(dim, x0, dtype=float) if np.ndim(x0) == 0 else np.asarray(x0),
                   vol=lambda t, x: eye)


@dataclass
class PathEnsemble:
    grid: TimeGrid
    X: np.ndarray   # (M, N+1, d)
    dB: np.ndarray  # (M, N, d)
    seed: int
    sde: Optional[SdeSpec] = field(default=None, repr=False)

    @property
    def M(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[2]


def gaussian_increments(M: int, N: int, d: int, dt: float, seed: int) -> np.ndarray:
    """Increments for paths ``0..M-1``; path ``i`` does not depend on ``M``."""
    nblocks = -(-M // BLOCK)
    out = np.empty((nblocks * BLOCK, N, d))
    for k in range(nblocks):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,)))
        out[k * BLOCK:(k + 1) * BLOCK] = rng.standard_normal((BLOCK, N, d))
    return out[:M] * np.sqrt(dt)


def euler_from_increments(sde: SdeSpec, grid: TimeGrid, dB: np.ndarray) -> np.ndarray:
    M, N, d = dB.shape
    t = grid.nodes
    X = np.empty((M, N + 1, d))
    X[:, 0] = sde.x0
    xsup = np.linalg.norm(X[:, 0], axis=1)
    for i in range(N):
        x = X[:, i]
        s = sde.sigma(t[i], x, xsup)
        X[:, i + 1] = x + sde.b(t[i], x) * grid.dt + np.einsum("mij,mj->mi", s, dB[:, i])
        if not np.all(np.isfinite(X[:, i + 1])):
            raise DivergenceError(f"non-finite state at step {i + 1}")
        xsup = np.maximum(xsup, np.linalg.norm(X[:, i + 1], axis=1))
    return X


def simulate_paths(sde: SdeSpec, grid: TimeGrid, M: int, seed: int) -> PathEnsemble:
    if M < 1:
        raise DrbsdeError(f"need M >= 1 paths, got {M}")
    dB = gaussian_increments(M, grid.N, sde.dim, grid.dt, seed)
    return PathEnsemble(grid, euler_from_increments(sde, grid, dB), dB, seed, sde)


def replay(ens: PathEnsemble, sde: Optional[SdeSpec] = None) -> np.ndarray:
    """Rebuild the states from the stored increments."""
    sde = sde or ens.sde
    if sde is None:
        raise DrbsdeError("replay needs the SdeSpec the ensemble was built from")
    return euler_from_increments(sde, ens.grid, ens.dB)


def path_sup_moment(ens: PathEnsemble, n: float) -> float:
    """Monte Carlo estimate of ``E[sup_t |X_t|^n]``."""
    if n < 1:
        raise DrbsdeError(f"exponent must be >= 1, got {n}")
    sup = np.linalg.norm(ens.X, axis=2).max(axis=1)
    with np.errstate(over="ignore"):
        vals = sup ** n
    bad = ~np.isfinite(vals)
    if bad.any():
        raise DivergenceError(f"sup-moment overflow for n={n} on path {int(np.argmax(bad))}")
    return float(vals.mean())


def dump_ensemble(ens: PathEnsemble, path) -> Path:
    """Write a path-major CSV: one row per (path, node)."""
    path = Path(path)
    d = ens.d
    with path.open("w", newline="") as fh:
        fh.write(f"# seed={ens.seed} T={ens.grid.T!r} N={ens.grid.N} M={ens.M} d={d}\n")
        w = csv.writer(fh)
        w.writerow(["path", "step"] + [f"x{k}" for k in range(d)] + [f"dB{k}" for k in range(d)])
        for m in range(ens.M):
            for i in range(ens.grid.N + 1):
                inc = ens.dB[m, i] if i < ens.grid.N else np.full(d, np.nan)
                w.writerow([m, i] + [repr(float(v)) for v in ens.X[m, i]]
                           + [repr(float(v)) for v in inc])
    return path


def load_ensemble(path, sde: Optional[SdeSpec] = None) -> PathEnsemble:
    path = Path(path)
    with path.open() as fh:
        header = dict(kv.split("=") for kv in fh.readline()[1:].split())
        rows = list(csv.reader(fh))[1:]
    M, N, d = int(header["M"]), int(header["N"]), int(header["d"])
    data = np.array([[float(v) for v in r[2:]] for r in rows]).reshape(M, N + 1, 2 * d)
    grid = TimeGrid(float(header["T"]), N)
    return PathEnsemble(grid, data[:, :, :d].copy(), data[:, :N, d:].copy(), int(header["seed"]), sde)
