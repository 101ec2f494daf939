"""Experiment configuration: INI-style sections, fail-closed on unknown keys."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .. import registry
from ..core import DrbsdeError

SCENARIOS = ("bsde", "penalized", "double-barrier", "pde", "cross-validate", "game")
AXES = ("N", "M", "nx", "penalty")


class ConfigError(DrbsdeError):
    """Invalid configuration; the message starts with the offending field path."""


DEFAULT_TOLERANCES = {
    "oracle": 5e-3,        # closed-form / deterministic oracle gaps
    "skorokhod": 1e-8,     # flat-off residual, relative to 1 + K_T
    "crossval": 0.03,      # LSMC vs finite differences
    "agreement": 0.05,     # increasing vs decreasing penalisation
    "residual": 0.02,      # final sup (L - Y)^+ of the penalised scheme
    "complementarity": 1e-8,
    "penalty_gap": 1e-2,   # final ||u_n - u_VI||
    "n_se": 3.0,           # Monte Carlo band, in standard errors
    "value_gap": 0.03,     # |J* - Y0*| beyond the Monte Carlo band
}


@dataclass
class ExperimentConfig:
    scenario: str = "bsde"
    label: str = ""
    seed: int = 0
    out: Path = Path("results")
    T: float = 1.0
    N: int = 50
    M: int = 20000
    nx: int = 401
    pde_N: int = 200
    x0: float = 0.0
    vol: float = 1.0
    drift: float = 0.0
    width: float = 6.0
    generator: tuple = ("zero", {})
    barrier: tuple = ("none", {})
    terminal: tuple = ("constant_terminal", {})
    basis_family: str = "polynomial"
    basis_degree: int = 3
    basis_bins: int = 32
    basis_clip: float = 4.0
    levels: tuple = tuple(2.0 ** k for k in range(11))
    pde_levels: tuple = (10.0, 100.0, 1000.0, 10000.0)
    game: tuple = ("benchmark-game", {})
    perturbations: int = 10
    tol_hit: Optional[float] = None
    axis: str = "N"
    axis_values: tuple = ()
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))

    def validate(self) -> "ExperimentConfig":
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"experiment.scenario: unknown scenario {self.scenario!r}; "
                              f"choose from {list(SCENARIOS) + sorted(PRESETS)}")
        for key in ("N", "M", "nx", "pde_N", "perturbations"):
            v = getattr(self, key)
            if int(v) != v or v < 1:
                raise ConfigError(f"grid.{key}: must be a positive integer, got {v}")
        if self.nx < 3:
            raise ConfigError(f"grid.nx: need at least 3 nodes, got {self.nx}")
        for key in ("T", "width"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"grid.{key}: must be positive, got {getattr(self, key)}")
        for k, v in self.tolerances.items():
            if not v > 0:
                raise ConfigError(f"tolerance.{k}: must be positive, got {v}")
        for section, (name, params), table in (("generator", self.generator, registry.GENERATORS),
                                               ("barrier", self.barrier, registry.BARRIERS),
                                               ("terminal", self.terminal, registry.TERMINALS)):
            if name not in table:
                raise ConfigError(f"{section}.name: unknown {section} {name!r}; known: {sorted(table)}")
            extra = set(params) - set(registry.params_of(table, name))
            if extra:
                raise ConfigError(f"{section}.{sorted(extra)[0]}: not a parameter of {name!r}")
        from ..game import GAMES
        if self.game[0] not in GAMES:
            raise ConfigError(f"game.name: unknown game {self.game[0]!r}; known: {sorted(GAMES)}")
        if self.axis not in AXES:
            raise ConfigError(f"convergence.axis: must be one of {AXES}, got {self.axis!r}")
        try:
            from ..bsde_lsmc import PenalizationSchedule, RegressionBasis
            PenalizationSchedule(self.levels)
            PenalizationSchedule(self.pde_levels)
            RegressionBasis(self.basis_family, self.basis_degree, self.basis_bins, self.basis_clip)
        except ValueError as exc:
            raise ConfigError(f"schedule/basis: {exc}") from None
        return self


# Named scenarios: a base scenario plus overrides.
PRESETS = {
    "log-ode": ("bsde", dict(M=1, N=200, vol=0.0, generator=("neg_y_log_y", {"K": 1.0}),
                             terminal=("constant_terminal", {"value": 2.718281828459045}))),
    "zero-game": ("game", dict(game=("zero-game", {}), M=2000, N=20)),
    "clamped-brownian": ("cross-validate", dict(M=50000, N=50, nx=401,
                                                barrier=("const_barrier", {"lower": -1.0, "upper": 1.0}),
                                                terminal=("clamp_terminal", {"lo": -1.0, "hi": 1.0}))),
    "step-barrier": ("penalized", dict(M=5000, N=50, barrier=("step_lower", {"level": 0.5, "until": 0.5}),
                                       terminal=("constant_terminal", {"value": 0.0}))),
    "benchmark-game": ("game", dict(game=("benchmark-game", {}), M=50000, N=50)),
}


_SECTIONS = {
    "experiment": {"scenario": str, "seed": int, "out": Path},
    "grid": {"T": float, "N": int, "M": int, "nx": int, "pde_N": int, "x0": float,
             "width": float},
    "sde": {"vol": float, "drift": float},
    "basis": {"family": str, "degree": int, "bins": int, "clip": float},
    "schedule": {"levels": "floats", "pde_levels": "floats"},
    "convergence": {"axis": str, "values": "floats"},
}
_REGISTRY_SECTIONS = ("generator", "barrier", "terminal", "game")


def _convert(path, raw, kind):
    try:
        if kind == "floats":
            return tuple(float(v) for v in raw.replace(";", ",").split(",") if v.strip())
        if kind is int:
            f = float(raw)
            if f != int(f):
                raise ValueError(raw)
            return int(f)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{path}: cannot parse {raw!r}") from None


def preset(name: str) -> ExperimentConfig:
    base, overrides = PRESETS[name]
    return replace(ExperimentConfig(scenario=base, label=name), **overrides)


def parse_config_text(text: str, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=", ":"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config: {exc}") from None

    scenario = cp.get("experiment", "scenario", fallback=None)
    cfg = base or (preset(scenario) if scenario in PRESETS else ExperimentConfig())
    upd: dict = {}
    for section in cp.sections():
        items = dict(cp.items(section))
        if section in _REGISTRY_SECTIONS:
            name = items.pop("name", None)
            if name is None:
                name = {"generator": cfg.generator, "barrier": cfg.barrier,
                        "terminal": cfg.terminal, "game": cfg.game}[section][0]
            params = {}
            for k, v in items.items():
                if section == "game" and k in ("perturbations", "tol_hit"):
                    upd[k] = _convert(f"game.{k}", v, int if k == "perturbations" else float)
                    continue
                params[k] = _convert(f"{section}.{k}", v, float)
            upd[section] = (name, params)
        elif section == "tolerance":
            tol = dict(cfg.tolerances)
            for k, v in items.items():
                if k not in DEFAULT_TOLERANCES:
                    raise ConfigError(f"tolerance.{k}: unknown tolerance; known: {sorted(DEFAULT_TOLERANCES)}")
                tol[k] = _convert(f"tolerance.{k}", v, float)
            upd["tolerances"] = tol
        elif section in _SECTIONS:
            spec = _SECTIONS[section]
            for k, v in items.items():
                if k not in spec:
                    raise ConfigError(f"{section}.{k}: unknown key; known: {sorted(spec)}")
                val = _convert(f"{section}.{k}", v, spec[k])
                attr = {"basis": f"basis_{k}", "convergence": "axis_values" if k == "values" else k
                        }.get(section, k)
                if section == "experiment" and k == "scenario" and val in PRESETS:
                    continue
                upd[attr] = val
        else:
            raise ConfigError(f"{section}: unknown section; known: "
                              f"{sorted(set(_SECTIONS) | set(_REGISTRY_SECTIONS) | {'tolerance'})}")
    names = {f.name for f in fields(ExperimentConfig)}
    assert set(upd) <= names, set(upd) - names
    return replace(cfg, **upd)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config: file not found: {path}")
    return parse_config_text(path.read_text())
