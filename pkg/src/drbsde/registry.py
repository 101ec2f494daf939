"""Built-in generators, barriers and terminal conditions, selected by name."""
from __future__ import annotations

import inspect
from typing import Callable

import numpy as np

from .core import (BarrierPair, DrbsdeError, GeneratorSpec, TerminalCondition,
                   safe_ylogy, safe_zsqrtlog)


class RegistryError(DrbsdeError):
    pass


GENERATORS: dict[str, Callable[..., GeneratorSpec]] = {}
BARRIERS: dict[str, Callable[..., BarrierPair]] = {}
TERMINALS: dict[str, Callable[..., TerminalCondition]] = {}


def _register(table):
    def deco(fn):
        table[fn.__name__] = fn
        return fn
    return deco


def _build(table, kind, name, params):
    if name not in table:
        raise RegistryError(f"unknown {kind} {name!r}; known: {sorted(table)}")
    factory = table[name]
    allowed = set(inspect.signature(factory).parameters)
    extra = set(params) - allowed
    if extra:
        raise RegistryError(f"{kind} {name!r} does not take {sorted(extra)}; allowed: {sorted(allowed)}")
    return factory(**{k: float(v) for k, v in params.items()})


def generator(name: str, **params) -> GeneratorSpec:
    return _build(GENERATORS, "generator", name, params)


def barriers(name: str, **params) -> BarrierPair:
    return _build(BARRIERS, "barrier", name, params)


def terminal(name: str, **params) -> TerminalCondition:
    return _build(TERMINALS, "terminal", name, params)


def params_of(table, name) -> list[str]:
    return list(inspect.signature(table[name]).parameters)


# generators ---------------------------------------------------------------

@_register(GENERATORS)
def zero():
    return GeneratorSpec(lambda t, x, y, z: np.zeros_like(y), name="zero")


@_register(GENERATORS)
def constant(value=1.0):
    return GeneratorSpec(lambda t, x, y, z: np.full_like(y, value),
                         eta_bound=abs(value), name="constant")


@_register(GENERATORS)
def neg_y_log_y(K=1.0, shift=0.0):
    """``shift - K y ln|y|``."""
    return GeneratorSpec(lambda t, x, y, z: shift - K * safe_ylogy(y),
                         eta_bound=abs(shift), c0=abs(K), name="neg_y_log_y")


@_register(GENERATORS)
def z_sqrt_log(C=1.0):
    def f(t, x, y, z):
        return C * safe_zsqrtlog(np.linalg.norm(z, axis=1))
    return GeneratorSpec(f, c1=abs(C), name="z_sqrt_log")


@_register(GENERATORS)
def log_mixed(K=1.0, C=1.0, shift=0.0):
    """``shift - K y ln|y| + C |z| sqrt(|ln|z||)``."""
    def f(t, x, y, z):
        return shift - K * safe_ylogy(y) + C * safe_zsqrtlog(np.linalg.norm(z, axis=1))
    return GeneratorSpec(f, eta_bound=abs(shift), c0=abs(K), c1=abs(C), name="log_mixed")


# barriers -----------------------------------------------------------------

@_register(BARRIERS)
def none():
    return BarrierPair(lambda t, x: -np.inf, lambda t, x: np.inf, name="none")


@_register(BARRIERS)
def const_barrier(lower=-1.0, upper=1.0):
    return BarrierPair(lambda t, x: lower, lambda t, x: upper, name="const_barrier")


@_register(BARRIERS)
def step_lower(level=0.5, until=0.5):
    """Lower barrier ``level`` on ``[0, until]``, absent afterwards."""
    return BarrierPair(lambda t, x: level if t <= until + 1e-12 else -np.inf,
                       lambda t, x: np.inf, name="step_lower")


@_register(BARRIERS)
def clamp_band(lo=-1.0, hi=1.0, width=0.3):
    """``clamp(x_1, lo, hi) -/+ width``."""
    def centre(x):
        return np.clip(np.atleast_2d(x)[:, 0], lo, hi)
    return BarrierPair(lambda t, x: centre(x) - width,
                       lambda t, x: centre(x) + width, name="clamp_band")


# terminal conditions --------------------------------------------------------

@_register(TERMINALS)
def constant_terminal(value=0.0):
    return TerminalCondition(lambda xT: np.full(xT.shape[0], value), name="constant_terminal")


@_register(TERMINALS)
def clamp_terminal(lo=-1.0, hi=1.0):
    return TerminalCondition(lambda xT: np.clip(xT[:, 0], lo, hi), name="clamp_terminal")


@_register(TERMINALS)
def identity_terminal():
    return TerminalCondition(lambda xT: xT[:, 0].copy(), name="identity_terminal")
