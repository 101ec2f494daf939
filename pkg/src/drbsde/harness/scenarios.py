"""Scenario runners, convergence studies and report emission."""
from __future__ import annotations

import csv
import json
import logging
import zlib
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .. import registry
from ..bsde_lsmc import (PenalizationSchedule, RegressionBasis, check_skorokhod,
                         solve_bsde, solve_double_barrier_direct,
                         solve_double_barrier_penalized, solve_one_barrier_penalized,
                         write_convergence_csv)
from ..core import TimeGrid
from ..forward_sde import SdeSpec, simulate_paths
from ..game import GAMES, solve_game_bsde, star_profile, verify_saddle
from ..obstacle_pde import (PdeSpec, SpaceGrid, solve_double_obstacle_vi,
                            solve_penalized_pde)
from .config import ExperimentConfig

log = logging.getLogger("drbsde")

ANCHORS = {
    "bsde": "Y_t = xi + int_t^T f(s, Y_s, Z_s) ds - int_t^T Z_s dB_s with f of logarithmic growth",
    "penalized": "penalised drivers f + n (L - y)^+ converge to the reflected solution as n grows",
    "double-barrier": "L <= Y <= U with int (Y - L) dK+ = int (U - Y) dK- = 0",
    "pde": "min[u - h, max(-u_t - Lu - f, u - h')] = 0, u(T) = g",
    "cross-validate": "u(t, x) = Y^{t,x}_t links the reflected BSDE and the obstacle problem",
    "game": "Y*_0 = J(u*, tau*; v*, sigma*) and the saddle inequality for the mixed game",
}


def substream_seed(seed: int, name: str) -> int:
    """Stable child seed for a named random substream."""
    ss = np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def build_sde(cfg: ExperimentConfig) -> SdeSpec:
    vol, drift = cfg.vol, cfg.drift
    return SdeSpec(1, [cfg.x0], drift=lambda t, x: np.full_like(x, drift),
                   vol=lambda t, x: np.full((x.shape[0], 1, 1), vol))


def build_parts(cfg: ExperimentConfig):
    gen = registry.generator(cfg.generator[0], **cfg.generator[1])
    bar = registry.barriers(cfg.barrier[0], **cfg.barrier[1])
    term = registry.terminal(cfg.terminal[0], **cfg.terminal[1])
    basis = RegressionBasis(cfg.basis_family, cfg.basis_degree, cfg.basis_bins, cfg.basis_clip)
    return gen, bar, term, basis


def build_ensemble(cfg: ExperimentConfig, sde=None):
    sde = sde or build_sde(cfg)
    return simulate_paths(sde, TimeGrid(cfg.T, cfg.N), cfg.M, substream_seed(cfg.seed, "paths"))


def build_pde(cfg: ExperimentConfig, gen, bar, term):
    spec = PdeSpec.from_sde(build_sde(cfg), gen, term, bar)
    xg = SpaceGrid.around(cfg.x0, max(abs(cfg.vol), 1e-3), cfg.T, cfg.nx, cfg.width)
    return spec, xg, TimeGrid(cfg.T, cfg.pde_N)


class Checks:
    def __init__(self):
        self.items = []

    def add(self, name, passed, **detail):
        self.items.append({"name": name, "passed": bool(passed), **_plain(detail)})
        log.info("%s %s %s", "PASS" if passed else "FAIL", name, detail)

    @property
    def ok(self):
        return all(c["passed"] for c in self.items)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _log_ode_oracle(cfg):
    name, p = cfg.generator
    tname, tp = cfg.terminal
    if (name == "neg_y_log_y" and p.get("shift", 0.0) == 0.0 and tname == "constant_terminal"
            and tp.get("value", 0.0) > 0 and cfg.vol == 0 and cfg.drift == 0
            and cfg.barrier[0] == "none"):
        K = p.get("K", 1.0)
        return float(np.exp(np.log(tp["value"]) * np.exp(-K * cfg.T)))
    return None


def write_path_means(sol, grid, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "Y_mean", "Y_std", "Kplus_mean", "Kminus_mean"])
        for i, t in enumerate(grid.nodes):
            w.writerow([repr(float(t)), repr(float(sol.Y[:, i].mean())),
                        repr(float(sol.Y[:, i].std())), repr(float(sol.Kplus[:, i].mean())),
                        repr(float(sol.Kminus[:, i].mean()))])


def run_bsde(cfg, out, checks):
    gen, bar, term, basis = build_parts(cfg)
    ens = build_ensemble(cfg)
    if bar.name == "none":
        sol = solve_bsde(gen, term, ens, basis)
    else:
        sol = solve_double_barrier_direct(gen, term, bar, ens, basis)
    write_path_means(sol, ens.grid, out / "bsde_path_means.csv")
    res = {"Y0": sol.Y0, "SE": sol.meta["SE"]}
    oracle = _log_ode_oracle(cfg)
    if oracle is not None:
        res["oracle"] = oracle
        checks.add("log-generator closed form", abs(sol.Y0 - oracle) <= cfg.tolerances["oracle"],
                   Y0=sol.Y0, oracle=oracle, tol=cfg.tolerances["oracle"])
    checks.add("quadruple invariants", not sol.check_invariants(xi=term(ens.X[:, -1])),
               problems=sol.check_invariants(xi=term(ens.X[:, -1])))
    return res


def run_penalized(cfg, out, checks):
    gen, bar, term, basis = build_parts(cfg)
    ens = build_ensemble(cfg)
    sched = PenalizationSchedule(cfg.levels)
    n_se = cfg.tolerances["n_se"]
    _, hi0 = bar.values(0.0, ens.X[:, 0])
    res = {}
    if np.all(np.isposinf(hi0)):
        levels = solve_one_barrier_penalized(gen, term, bar, ens, basis, sched)
        write_convergence_csv(levels, out / "penalization_one_barrier.csv")
        runs = {"increasing": levels}
    else:
        runs = {d: solve_double_barrier_penalized(gen, term, bar, ens, basis, sched, d)
                for d in ("increasing", "decreasing")}
        for d, levels in runs.items():
            write_convergence_csv(levels, out / f"penalization_{d}.csv")
    inc = runs["increasing"]
    y0 = [s.meta["Y0"] for s in inc]
    se = [s.meta["SE"] for s in inc]
    drops = [y0[k] - y0[k + 1] - n_se * np.hypot(se[k], se[k + 1]) for k in range(len(y0) - 1)]
    checks.add("increasing scheme Y0 nondecreasing in n", max(drops, default=-1) <= 0,
               Y0=y0, worst_excess=max(drops, default=0.0))
    final_res = inc[-1].meta["sup_residual_lower"]
    checks.add("final sup (L - Y)^+", final_res <= cfg.tolerances["residual"],
               residual=final_res, tol=cfg.tolerances["residual"])
    res["increasing_Y0"] = y0
    if "decreasing" in runs:
        dec = runs["decreasing"]
        yd = [s.meta["Y0"] for s in dec]
        sd = [s.meta["SE"] for s in dec]
        rises = [yd[k + 1] - yd[k] - n_se * np.hypot(sd[k], sd[k + 1]) for k in range(len(yd) - 1)]
        checks.add("decreasing scheme Y0 nonincreasing in m", max(rises, default=-1) <= 0,
                   Y0=yd, worst_excess=max(rises, default=0.0))
        gap = abs(y0[-1] - yd[-1])
        checks.add("increasing/decreasing agreement", gap <= cfg.tolerances["agreement"],
                   gap=gap, tol=cfg.tolerances["agreement"])
        res["decreasing_Y0"] = yd
    return res


def run_double_barrier(cfg, out, checks):
    gen, bar, term, basis = build_parts(cfg)
    ens = build_ensemble(cfg)
    sol = solve_double_barrier_direct(gen, term, bar, ens, basis)
    write_path_means(sol, ens.grid, out / "double_barrier_path_means.csv")
    rep = check_skorokhod(sol, bar, ens, cfg.tolerances["skorokhod"])
    checks.add("Skorokhod flat-off", rep.passed, failing=len(rep.failing_paths),
               max_lower=float(rep.residual_lower.max()), max_upper=float(rep.residual_upper.max()))
    lo = np.column_stack([bar.values(t, ens.X[:, i])[0] for i, t in enumerate(ens.grid.nodes)])
    hi = np.column_stack([bar.values(t, ens.X[:, i])[1] for i, t in enumerate(ens.grid.nodes)])
    probs = sol.check_invariants(lo, hi, term(ens.X[:, -1]))
    checks.add("sandwich and K monotonicity", not probs, problems=probs)
    return {"Y0": sol.Y0, "SE": sol.meta["SE"], "Kplus_T_mean": sol.meta["Kplus_T_mean"],
            "Kminus_T_mean": sol.meta["Kminus_T_mean"]}


def run_pde(cfg, out, checks):
    gen, bar, term, _ = build_parts(cfg)
    spec, xg, tg = build_pde(cfg, gen, bar, term)
    vi = solve_double_obstacle_vi(spec, xg, tg)
    vi.to_csv(out / "value_function.csv")
    sandwich = bool(np.all(vi.u >= vi.h - 1e-12) and np.all(vi.u <= vi.hp + 1e-12))
    checks.add("VI sandwich", sandwich)
    comp = vi.meta["complementarity_residual"]
    checks.add("VI complementarity", comp <= cfg.tolerances["complementarity"],
               residual=comp, tol=cfg.tolerances["complementarity"])
    gaps = []
    with (out / "pde_penalization.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "gap_both", "gap_lower", "gap_upper"])
        for n in cfg.pde_levels:
            row = [float(np.max(np.abs(solve_penalized_pde(spec, xg, tg, n, p).u - vi.u)))
                   for p in ("both", "lower", "upper")]
            gaps.append(row[0])
            w.writerow([repr(float(n))] + [repr(g) for g in row])
    mono = all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))
    checks.add("penalised PDE gap nonincreasing", mono, gaps=gaps)
    checks.add("penalised PDE final gap", gaps[-1] <= cfg.tolerances["penalty_gap"],
               gap=gaps[-1], tol=cfg.tolerances["penalty_gap"])
    return {"u00": float(vi.value(cfg.x0)), "penalty_gaps": gaps}


def run_cross_validate(cfg, out, checks):
    gen, bar, term, basis = build_parts(cfg)
    ens = build_ensemble(cfg)
    sol = solve_double_barrier_direct(gen, term, bar, ens, basis)
    spec, xg, tg = build_pde(cfg, gen, bar, term)
    vi = solve_double_obstacle_vi(spec, xg, tg)
    u00 = float(vi.value(cfg.x0))
    gap = abs(sol.Y0 - u00)
    checks.add("LSMC vs finite differences", gap <= cfg.tolerances["crossval"],
               Y0=sol.Y0, u00=u00, gap=gap, tol=cfg.tolerances["crossval"])
    with (out / "cross_validation.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["Y0_lsmc", "SE", "u00_fd", "gap"])
        w.writerow([repr(sol.Y0), repr(sol.meta["SE"]), repr(u00), repr(gap)])
    return {"Y0": sol.Y0, "SE": sol.meta["SE"], "u00": u00, "gap": gap}


def run_game(cfg, out, checks):
    spec = GAMES[cfg.game[0]](**cfg.game[1])
    ens = simulate_paths(spec.sde, TimeGrid(cfg.T, cfg.N), cfg.M, substream_seed(cfg.seed, "paths"))
    basis = RegressionBasis(cfg.basis_family, cfg.basis_degree, cfg.basis_bins, cfg.basis_clip)
    gs = solve_game_bsde(spec, ens, basis)
    star = star_profile(spec, ens, gs, cfg.tol_hit)
    rep = verify_saddle(spec, ens, star, gs.sol.Y0, cfg.perturbations,
                        seed=substream_seed(cfg.seed, "perturbations"),
                        n_se=cfg.tolerances["n_se"], isaacs_gap_max=gs.isaacs_gap_max)
    rep.write(out / "game_report.json")
    checks.add("saddle lower side", rep.violations_lower == 0, violations=rep.violations_lower)
    checks.add("saddle upper side", rep.violations_upper == 0, violations=rep.violations_upper)
    band = cfg.tolerances["n_se"] * rep.SE + cfg.tolerances["value_gap"]
    checks.add("value identity |J* - Y0*|", rep.value_gap <= band, gap=rep.value_gap, band=band)
    res = {"Y0": rep.Y0, "J_star": rep.J_star, "SE": rep.SE, "isaacs_gap_max": rep.isaacs_gap_max}
    if cfg.game[0] == "zero-game":
        # early stopping still pays L or U, so only the equilibrium payoffs vanish
        checks.add("zero game equilibrium payoffs", rep.J_star == 0 and rep.Y0 == 0,
                   J_star=rep.J_star, Y0=rep.Y0)
    return res


RUNNERS = {"bsde": run_bsde, "penalized": run_penalized, "double-barrier": run_double_barrier,
           "pde": run_pde, "cross-validate": run_cross_validate, "game": run_game}


def emit_report(cfg: ExperimentConfig, results: dict, checks: Checks, out: Path,
                name: str = "results.json") -> Path:
    cfg_dump = {k: _plain(v) for k, v in asdict(cfg).items()}
    payload = {"scenario": cfg.scenario, "label": cfg.label or cfg.scenario,
               "anchor": ANCHORS[cfg.scenario], "seed": cfg.seed,
               "passed": checks.ok, "checks": checks.items,
               "results": _plain(results), "config": cfg_dump}
    path = out / name
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def run_experiment(cfg: ExperimentConfig) -> int:
    """Run the configured scenario; returns 0 iff every check passed."""
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    checks = Checks()
    results = RUNNERS[cfg.scenario](cfg, out, checks)
    emit_report(cfg, results, checks, out)
    return 0 if checks.ok else 1


def _axis_config(cfg, axis, value):
    if axis == "penalty":
        return replace(cfg, levels=(float(value),), pde_levels=(float(value),))
    if axis == "nx":
        return replace(cfg, nx=int(value))
    if axis == "N":
        return replace(cfg, N=int(value), pde_N=max(int(value), 1))
    return replace(cfg, M=int(value))


def convergence_study(cfg: ExperimentConfig, axis: str, values=None) -> list[dict]:
    """Re-run the scenario's headline quantity along one axis and tabulate deltas."""
    defaults = {"N": (25, 50, 100, 200), "M": (2500, 5000, 10000, 20000),
                "nx": (101, 201, 401, 801), "penalty": cfg.levels}
    values = tuple(values or cfg.axis_values or defaults[axis])
    rows, prev = [], None
    for v in values:
        c = _axis_config(cfg, axis, v)
        gen, bar, term, basis = build_parts(c)
        if axis == "nx" or cfg.scenario == "pde":
            spec, xg, tg = build_pde(c, gen, bar, term)
            if axis == "penalty":
                val = float(solve_penalized_pde(spec, xg, tg, v).value(c.x0))
            else:
                val = float(solve_double_obstacle_vi(spec, xg, tg).value(c.x0))
            se = 0.0
        else:
            ens = build_ensemble(c)
            if axis == "penalty":
                sol = solve_double_barrier_penalized(gen, term, bar, ens, basis,
                                                     PenalizationSchedule((float(v),)))[0]
            else:
                sol = solve_double_barrier_direct(gen, term, bar, ens, basis)
            val, se = sol.Y0, sol.meta["SE"]
        rows.append({"axis": axis, "value": float(v), "estimate": val, "SE": se,
                     "delta_vs_previous": float("nan") if prev is None else abs(val - prev)})
        prev = val
    return rows


def write_convergence_table(rows, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "value", "estimate", "SE", "delta_vs_previous"])
        for r in rows:
            w.writerow([r["axis"], repr(r["value"]), repr(r["estimate"]), repr(r["SE"]),
                        repr(r["delta_vs_previous"])])
    return path
